"""Random small MILPs and an exhaustive-enumeration reference."""
import itertools

import numpy as np
from scipy.optimize import linprog

from robust_e2e.certify import MilpModel


def random_milp(rng, n_bin, n_cont, n_rows):
    model = MilpModel(sense=rng.choice(["max", "min"]))
    xb = model.add_vars("b", n_bin, binary=True)
    xc = model.add_vars("c", n_cont, -5.0, 5.0)
    cols = np.concatenate([xb, xc])
    A = rng.normal(size=(n_rows, cols.size))
    rhs = A @ np.concatenate([rng.integers(0, 2, n_bin), rng.uniform(-2, 2, n_cont)]) + rng.uniform(0.1, 2, n_rows)
    model.add_dense(A, cols, "<=", rhs, "r")
    model.set_objective(cols, rng.normal(size=cols.size))
    return model


def enumerate_milp(model):
    """Best objective over all binary settings (LP in the continuous part); None if infeasible."""
    c = np.asarray(model.obj, dtype=float)
    c = -c if model.sense == "max" else c
    A_ub, b_ub, A_eq, b_eq = model.matrices()
    A_ub = A_ub.toarray() if hasattr(A_ub, "toarray") else A_ub
    A_eq = A_eq.toarray() if hasattr(A_eq, "toarray") else A_eq
    lo, hi = np.asarray(model.lo), np.asarray(model.hi)
    bins = np.asarray(model.binaries, dtype=int)
    best = None
    for bits in itertools.product((0.0, 1.0), repeat=bins.size):
        l, h = lo.copy(), hi.copy()
        l[bins] = h[bins] = bits
        res = linprog(c, A_ub=A_ub if A_ub.shape[0] else None, b_ub=b_ub if A_ub.shape[0] else None,
                      A_eq=A_eq if A_eq.shape[0] else None, b_eq=b_eq if A_eq.shape[0] else None,
                      bounds=np.column_stack([l, h]), method="highs")
        if res.status == 0 and (best is None or res.fun < best):
            best = res.fun
    if best is None:
        return None
    return -best if model.sense == "max" else best

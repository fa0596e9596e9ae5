"""Mixed-integer linear models, best-first branch and bound, and LP-format I/O.

LP relaxations are solved with ``scipy.optimize.linprog`` (HiGHS). The node
bound is the LP optimal value, which HiGHS certifies through its dual
objective, so it is a valid bound even when the primal point is slightly off.
"""
from __future__ import annotations

import heapq
import math
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

GAP_ABS = 1e-6
GAP_REL = 1e-4
INT_TOL = 1e-6
FEAS_TOL = 1e-6


class MilpError(ValueError):
    pass


class MilpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    GAP_LIMIT = "GapLimit"
    NODE_LIMIT = "NodeLimit"


@dataclass
class MilpModel:
    """Linear objective, linear rows, bounds and binary markers.

    Rows are stored sparsely as (columns, coefficients, sense, rhs, label);
    ``sense`` is one of ``"<="``, ``"="``, ``">="``. ``blocks`` maps a name to
    the variable indices it owns.
    """
    sense: str = "max"
    names: list[str] = field(default_factory=list)
    lo: list[float] = field(default_factory=list)
    hi: list[float] = field(default_factory=list)
    obj: list[float] = field(default_factory=list)
    binaries: list[int] = field(default_factory=list)
    rows: list[tuple[np.ndarray, np.ndarray, str, float]] = field(default_factory=list)
    meta: list[str] = field(default_factory=list)
    blocks: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def add_vars(self, name: str, size: int, lo=-np.inf, hi=np.inf, binary: bool = False) -> np.ndarray:
        start = self.n
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (size,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (size,))
        if binary:
            lo, hi = np.zeros(size), np.ones(size)
        for i in range(size):
            self.names.append(f"{name}_{i}")
            self.lo.append(float(lo[i]))
            self.hi.append(float(hi[i]))
            self.obj.append(0.0)
        idx = np.arange(start, start + size)
        if binary:
            self.binaries.extend(idx.tolist())
        self.blocks[name] = idx
        return idx

    def add_row(self, cols, coefs, sense: str, rhs: float, label: str) -> None:
        if sense not in ("<=", "=", ">="):
            raise MilpError(f"unknown row sense {sense!r}")
        cols = np.asarray(cols, dtype=int)
        coefs = np.asarray(coefs, dtype=float)
        keep = coefs != 0.0
        self.rows.append((cols[keep], coefs[keep], sense, float(rhs)))
        self.meta.append(label)

    def add_dense(self, M, cols, sense: str, rhs, label: str) -> None:
        """One row per line of ``M`` over variables ``cols``."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), (M.shape[0],))
        for i in range(M.shape[0]):
            self.add_row(cols, M[i], sense, rhs[i], label)

    def set_objective(self, cols, coefs) -> None:
        for c, v in zip(np.asarray(cols, dtype=int), np.asarray(coefs, dtype=float)):
            self.obj[c] += float(v)

    def validate(self) -> None:
        for j in self.binaries:
            if self.lo[j] < 0 or self.hi[j] > 1:
                raise MilpError(f"binary {self.names[j]} has bounds outside [0, 1]")
        if len(set(self.names)) != self.n:
            raise MilpError("duplicate variable names")
        if not np.all(np.isfinite(self.obj)):
            raise MilpError("non-finite objective coefficient")
        for (cols, coefs, _, rhs), label in zip(self.rows, self.meta):
            if cols.size and (cols.min() < 0 or cols.max() >= self.n):
                raise MilpError(f"row in block {label!r} references an undeclared variable")
            if not (np.all(np.isfinite(coefs)) and math.isfinite(rhs)):
                raise MilpError(f"non-finite coefficient in block {label!r}")
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise MilpError("variable with lower bound above upper bound")

    def matrices(self):
        """(A_ub, b_ub, A_eq, b_eq) in ``<=``/``=`` form as CSR matrices."""
        ub_r, ub_c, ub_v, b_ub = [], [], [], []
        eq_r, eq_c, eq_v, b_eq = [], [], [], []
        for cols, coefs, sense, rhs in self.rows:
            if sense == "=":
                eq_r.extend([len(b_eq)] * cols.size)
                eq_c.extend(cols)
                eq_v.extend(coefs)
                b_eq.append(rhs)
            else:
                s = 1.0 if sense == "<=" else -1.0
                ub_r.extend([len(b_ub)] * cols.size)
                ub_c.extend(cols)
                ub_v.extend(s * coefs)
                b_ub.append(s * rhs)
        A_ub = sp.csr_matrix((ub_v, (ub_r, ub_c)), shape=(len(b_ub), self.n))
        A_eq = sp.csr_matrix((eq_v, (eq_r, eq_c)), shape=(len(b_eq), self.n))
        return A_ub, np.array(b_ub), A_eq, np.array(b_eq)

    def objective_value(self, x) -> float:
        return float(np.dot(self.obj, x))

    def violation(self, x, scaled: bool = True) -> float:
        """Largest row or bound violation at ``x`` (row violations divided by 1 + |rhs|)."""
        x = np.asarray(x, dtype=float)
        worst = max(float(np.max(np.asarray(self.lo) - x, initial=0.0)),
                    float(np.max(x - np.asarray(self.hi), initial=0.0)))
        for cols, coefs, sense, rhs in self.rows:
            lhs = float(coefs @ x[cols])
            v = lhs - rhs if sense == "<=" else rhs - lhs if sense == ">=" else abs(lhs - rhs)
            if scaled:
                v /= 1.0 + abs(rhs)
            worst = max(worst, v)
        if self.binaries:
            xb = x[self.binaries]
            worst = max(worst, float(np.max(np.abs(xb - np.round(xb)))))
        return worst

    def rows_in(self, label: str) -> int:
        return sum(1 for m in self.meta if m == label)


@dataclass
class MilpResult:
    status: MilpStatus
    objective: float
    assignment: Optional[np.ndarray]
    nodes: int
    gap: float
    bound: float = math.nan
    seconds: float = 0.0


# -- branch and bound ----------------------------------------------------------

class _Lp:
    def __init__(self, model: MilpModel):
        self.c = -np.asarray(model.obj) if model.sense == "max" else np.asarray(model.obj, dtype=float)
        self.A_ub, self.b_ub, self.A_eq, self.b_eq = model.matrices()
        self.lo = np.asarray(model.lo, dtype=float)
        self.hi = np.asarray(model.hi, dtype=float)
        self.bins = np.asarray(model.binaries, dtype=int)

    def solve(self, b_lo, b_hi):
        lo, hi = self.lo.copy(), self.hi.copy()
        lo[self.bins], hi[self.bins] = b_lo, b_hi
        res = linprog(self.c, A_ub=self.A_ub if self.A_ub.shape[0] else None,
                      b_ub=self.b_ub if self.A_ub.shape[0] else None,
                      A_eq=self.A_eq if self.A_eq.shape[0] else None,
                      b_eq=self.b_eq if self.A_eq.shape[0] else None,
                      bounds=np.column_stack([lo, hi]), method="highs")
        if res.status == 0:
            return float(res.fun), res.x
        if res.status == 3:
            raise MilpError("LP relaxation is unbounded; add variable bounds")
        return math.inf, None


def _gap(upper: float, lower: float) -> float:
    """Relative gap between the incumbent (upper, min sense) and the best bound."""
    if not math.isfinite(upper):
        return math.inf
    return max(0.0, upper - lower) / max(1.0, abs(upper))


def solve_milp(model: MilpModel, node_limit: int = 100_000, time_limit: Optional[float] = None,
               gap_abs: float = GAP_ABS, gap_rel: float = GAP_REL,
               heuristic: Optional[Callable[[np.ndarray], Optional[np.ndarray]]] = None,
               incumbent: Optional[np.ndarray] = None) -> MilpResult:
    """Best-first branch and bound on the most fractional binary.

    ``heuristic`` maps a relaxed LP point to a candidate full assignment (or
    None); candidates and a given ``incumbent`` are accepted only if they
    satisfy every row within ``FEAS_TOL``.
    """
    model.validate()
    t0 = time.perf_counter()
    lp = _Lp(model)
    sign = -1.0 if model.sense == "max" else 1.0
    nb = lp.bins.size
    best_x, best_val = None, math.inf  # min sense internally

    def offer(x):
        nonlocal best_x, best_val
        if x is None or model.violation(x) > FEAS_TOL:
            return
        v = float(lp.c @ x)
        if v < best_val:
            best_x, best_val = np.asarray(x, dtype=float).copy(), v

    def close_enough(bound):
        return best_val - bound <= max(gap_abs, gap_rel * abs(best_val))

    if incumbent is not None:
        offer(incumbent)

    heap = [(-math.inf, 0, np.zeros(nb), np.ones(nb))]
    counter = 1
    nodes = 0
    status = None
    closed_at = None
    while heap:
        key = heap[0][0]
        if math.isfinite(best_val) and close_enough(key):
            closed_at = key
            heap.clear()
            break
        if nodes >= node_limit:
            status = MilpStatus.NODE_LIMIT
            break
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            status = MilpStatus.GAP_LIMIT
            break
        _, _, b_lo, b_hi = heapq.heappop(heap)
        nodes += 1
        val, x = lp.solve(b_lo, b_hi)
        if x is None or (math.isfinite(best_val) and close_enough(val)):
            continue
        if heuristic is not None:
            offer(heuristic(x))
        xb = x[lp.bins] if nb else np.zeros(0)
        frac = np.abs(xb - np.round(xb))
        if nb == 0 or frac.max() <= INT_TOL:
            # round, fix and re-solve so the point satisfies complementarity exactly
            fixed = np.round(xb)
            v2, x2 = lp.solve(fixed, fixed) if nb else (val, x)
            if x2 is not None:
                offer(x2)
            continue
        j = int(np.argmax(frac))
        for side in (0.0, 1.0):
            lo_c, hi_c = b_lo.copy(), b_hi.copy()
            lo_c[j] = hi_c[j] = side
            heapq.heappush(heap, (val, counter, lo_c, hi_c))
            counter += 1

    bound = min([h[0] for h in heap], default=best_val if closed_at is None else closed_at)
    if status is None:
        status = MilpStatus.OPTIMAL if best_x is not None else MilpStatus.INFEASIBLE
    gap = _gap(best_val, bound) if best_x is not None else math.inf
    obj = sign * best_val if best_x is not None else math.nan
    return MilpResult(status, obj, best_x, nodes, gap, sign * bound if math.isfinite(bound) else math.nan,
                      time.perf_counter() - t0)


# -- LP-format text --------------------------------------------------------------
#
# The export follows the common "CPLEX LP" layout:
#
#   \ comment lines start with a backslash
#   Maximize                      (or Minimize)
#    obj: 1 x0 + 2.5 x1
#   Subject To
#    r0: 1 x0 - 1 x1 <= 3         each row on one line, label before the colon;
#                                 the block label is kept as a "\ block" comment
#   Bounds
#    -1 <= x0 <= 1                "xj free" for unbounded, "-inf"/"+inf" allowed
#   Binaries
#    x2 x3
#   End
#
# Coefficients are written with repr() precision so a round trip is exact.

def _fmt(v: float) -> str:
    if v == math.inf:
        return "+inf"
    if v == -math.inf:
        return "-inf"
    return repr(float(v))


def _terms(cols, coefs, names) -> str:
    if len(cols) == 0:
        return "0 " + names[0] if names else "0"
    parts = []
    for c, v in zip(cols, coefs):
        parts.append(("+ " if v >= 0 else "- ") + f"{_fmt(abs(v))} {names[c]}")
    s = " ".join(parts)
    return s[2:] if s.startswith("+ ") else "-" + s[1:]


def write_lp(model: MilpModel, path: Union[str, Path]) -> None:
    names = [f"x{j}" for j in range(model.n)]
    out = ["\\ robust_e2e MILP export", "\\ variables: " + " ".join(f"x{j}={n}" for j, n in enumerate(model.names))]
    out.append("Maximize" if model.sense == "max" else "Minimize")
    nz = [j for j, v in enumerate(model.obj) if v != 0.0]
    out.append(" obj: " + _terms(nz, [model.obj[j] for j in nz], names))
    out.append("Subject To")
    for i, ((cols, coefs, sense, rhs), label) in enumerate(zip(model.rows, model.meta)):
        out.append(f"\\ block {label}")
        out.append(f" r{i}: {_terms(cols, coefs, names)} {sense} {_fmt(rhs)}")
    out.append("Bounds")
    for j in range(model.n):
        lo, hi = model.lo[j], model.hi[j]
        if lo == -math.inf and hi == math.inf:
            out.append(f" x{j} free")
        else:
            out.append(f" {_fmt(lo)} <= x{j} <= {_fmt(hi)}")
    if model.binaries:
        out.append("Binaries")
        out.append(" " + " ".join(f"x{j}" for j in model.binaries))
    out.append("End")
    Path(path).write_text("\n".join(out) + "\n")


_TERM = re.compile(r"([+-])?\s*([0-9.eE+-]+|inf)\s+(x\d+)")


def _parse_terms(text: str) -> tuple[list[int], list[float]]:
    cols, coefs = [], []
    for sgn, num, var in _TERM.findall(text):
        v = float(num)
        cols.append(int(var[1:]))
        coefs.append(-v if sgn == "-" else v)
    return cols, coefs


def read_lp(path: Union[str, Path]) -> MilpModel:
    """Read a model written by :func:`write_lp` (names restored from the header comment)."""
    lines = Path(path).read_text().splitlines()
    model = MilpModel()
    names: dict[int, str] = {}
    section = None
    label = ""
    pending_rows = []
    bounds = {}
    bins = []
    objective = ([], [])
    for raw in lines:
        line = raw.strip()
        if not line:
            continue
        if line.startswith("\\"):
            if line.startswith("\\ variables:"):
                for tok in line[len("\\ variables:"):].split():
                    k, v = tok.split("=", 1)
                    names[int(k[1:])] = v
            elif line.startswith("\\ block "):
                label = line[len("\\ block "):]
            continue
        head = line.lower()
        if head in ("maximize", "minimize"):
            model.sense = "max" if head == "maximize" else "min"
            section = "obj"
            continue
        if head == "subject to":
            section = "rows"
            continue
        if head in ("bounds", "binaries", "end"):
            section = head
            continue
        if section == "obj":
            objective = _parse_terms(line.split(":", 1)[1])
        elif section == "rows":
            body = line.split(":", 1)[1]
            m = re.match(r"(.*)\s(<=|>=|=)\s(\S+)$", body)
            if m is None:
                raise MilpError(f"cannot parse row: {line}")
            cols, coefs = _parse_terms(m.group(1))
            pending_rows.append((cols, coefs, m.group(2), float(m.group(3)), label))
        elif section == "bounds":
            toks = line.split()
            if len(toks) == 2 and toks[1] == "free":
                bounds[int(toks[0][1:])] = (-math.inf, math.inf)
            elif len(toks) == 5:
                bounds[int(toks[2][1:])] = (float(toks[0]), float(toks[4]))
            else:
                raise MilpError(f"cannot parse bound: {line}")
        elif section == "binaries":
            bins.extend(int(t[1:]) for t in line.split())
    n = max([*names.keys(), *bounds.keys(), -1]) + 1
    for j in range(n):
        lo, hi = bounds.get(j, (0.0, math.inf))
        model.names.append(names.get(j, f"x{j}"))
        model.lo.append(lo)
        model.hi.append(hi)
        model.obj.append(0.0)
    model.set_objective(*objective)
    for cols, coefs, sense, rhs, lab in pending_rows:
        model.add_row(cols, coefs, sense, rhs, lab)
    model.binaries = bins
    return model

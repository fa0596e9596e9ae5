"""Big-M MILP encodings of the ReLU forecaster and of QP optimality, and the
assembled worst-case input attack on the two-stage dispatch pipeline.

Both decision stages are encoded as pure LPs (no proximal term) so the MILP is
exactly linear; the pipeline used to verify MILP solutions solves the same
LPs.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .. import forecaster, qp as qpmod
from ..forecaster import MlpParams
from ..grid import GridSpec
from ..qp import AffineQp
from ..tasks import build_dispatch, build_redispatch, task_cost
from .ibp import LayerBounds, ibp_bounds, input_box
from .milp import MilpModel, MilpResult, MilpStatus, solve_milp

BIG_M = 1e5
NEAR_M = 0.99  # duals above this share of M make the encoding suspect


class CertifyError(ValueError):
    pass


@dataclass
class Affine:
    """A vector whose entries are ``model var`` (idx >= 0) or a constant (idx = -1), plus an offset."""
    idx: np.ndarray
    offset: np.ndarray

    @classmethod
    def of_vars(cls, idx) -> "Affine":
        idx = np.asarray(idx, dtype=int)
        return cls(idx, np.zeros(idx.size))

    @classmethod
    def const(cls, values) -> "Affine":
        v = np.asarray(values, dtype=float).ravel()
        return cls(np.full(v.size, -1), v)

    @staticmethod
    def concat(*parts: "Affine") -> "Affine":
        return Affine(np.concatenate([p.idx for p in parts]), np.concatenate([p.offset for p in parts]))

    @property
    def size(self) -> int:
        return self.idx.size

    def linear(self, M) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rows of ``M @ self`` as (variable columns, coefficients per row, constant per row)."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        var = self.idx >= 0
        const = M @ self.offset
        return self.idx[var], M[:, var], const

    def value(self, x) -> np.ndarray:
        out = self.offset.copy()
        var = self.idx >= 0
        out[var] += np.asarray(x)[self.idx[var]]
        return out


def _rows(model, blocks, sense, rhs, label):
    """Add rows given as a list of (cols, coef-matrix) blocks sharing a right-hand side."""
    cols = np.concatenate([c for c, _ in blocks])
    mat = np.hstack([m for _, m in blocks])
    model.add_dense(mat, cols, sense, rhs, label)


# -- ReLU network --------------------------------------------------------------

@dataclass
class NnVars:
    inputs: Affine
    activations: list[np.ndarray]  # post-activation variable indices per hidden layer
    binaries: list[np.ndarray]  # binary index per unit (-1 when the unit is stable)
    output: np.ndarray


def encode_nn(mlp: MlpParams, bounds: LayerBounds, model: Optional[MilpModel] = None,
              inputs: Optional[Affine] = None, label: str = "nn") -> tuple[MilpModel, NnVars]:
    """Stable units become identity or zero rows; each unstable unit gets one binary and four rows."""
    if model is None:
        model = MilpModel()
    if inputs is None:
        inputs = Affine.of_vars(model.add_vars("x", mlp.n_in, bounds.input_lo, bounds.input_hi))
    if inputs.size != mlp.n_in:
        raise CertifyError(f"{inputs.size} input expressions for a network with {mlp.n_in} inputs")
    for k, (l, u) in enumerate(zip(bounds.lower, bounds.upper)):
        if np.any(l > u):
            raise CertifyError(f"inconsistent bounds in layer {k}")
    prev = inputs
    acts, bins = [], []
    last = len(mlp.weights) - 1
    for k, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        l, u = bounds.lower[k], bounds.upper[k]
        cols, coef, const = prev.linear(W)
        bias = b + const  # pre-activation = coef @ x[cols] + bias
        relu = k < last or mlp.terminal_relu
        n_out = W.shape[0]
        if not relu:
            out = model.add_vars("yhat", n_out, l, u)
            for j in range(n_out):
                _rows(model, [(np.array([out[j]]), np.array([[1.0]])), (cols, -coef[j:j + 1])],
                      "=", bias[j], label)
            acts.append(out)
            bins.append(np.full(n_out, -1))
            prev = Affine.of_vars(out)
            continue
        name = "yhat" if k == last else f"a{k}"
        out = model.add_vars(name, n_out, 0.0, np.maximum(u, 0.0))
        unstable = (l < 0) & (u > 0)
        bidx = np.full(n_out, -1)
        if unstable.any():
            vb = model.add_vars(f"v{k}", int(unstable.sum()), binary=True)
            bidx[unstable] = vb
        for j in range(n_out):
            a = np.array([out[j]])
            if l[j] >= 0:
                _rows(model, [(a, np.array([[1.0]])), (cols, -coef[j:j + 1])], "=", bias[j], label)
            elif u[j] <= 0:
                model.add_row(a, [1.0], "=", 0.0, label)
            else:
                v = np.array([bidx[j]])
                model.add_row(a, [1.0], ">=", 0.0, label)
                # a >= W h + b
                _rows(model, [(a, np.array([[-1.0]])), (cols, coef[j:j + 1])], "<=", -bias[j], label)
                # a <= W h + b - l (1 - v)
                _rows(model, [(a, np.array([[1.0]])), (cols, -coef[j:j + 1]), (v, np.array([[-l[j]]]))],
                      "<=", bias[j] - l[j], label)
                # a <= u v
                _rows(model, [(a, np.array([[1.0]])), (v, np.array([[-u[j]]]))], "<=", 0.0, label)
        acts.append(out)
        bins.append(bidx)
        prev = Affine.of_vars(out)
    return model, NnVars(inputs, acts[:-1], bins, acts[-1])


def nn_assignment(mlp: MlpParams, nn: NnVars, x_input, out: np.ndarray) -> None:
    """Write the forward pass at ``x_input`` into an assignment vector."""
    _, tape = forecaster.forward(mlp, np.asarray(x_input, dtype=float))
    last = len(mlp.weights) - 1
    for k, pre in enumerate(tape.pre):
        relu = k < last or mlp.terminal_relu
        idx = nn.output if k == last else nn.activations[k]
        out[idx] = np.maximum(pre, 0.0) if relu else pre
        b = nn.binaries[k]
        on = b >= 0
        out[b[on]] = (pre[on] > 0).astype(float)


# -- QP optimality -------------------------------------------------------------

@dataclass
class KktVars:
    z: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    phi: np.ndarray
    param: Affine


def encode_kkt(qp: AffineQp, big_m: float = BIG_M, model: Optional[MilpModel] = None,
               param: Optional[Affine] = None, label: str = "kkt", prefix: str = "",
               fixed: Iterable[str] = ()) -> tuple[MilpModel, KktVars]:
    """Stationarity, feasibility, dual sign and big-M complementarity rows.

    ``fixed`` names quantities baked into the constraint matrices that the
    caller holds constant (for example nominal susceptances); any other such
    quantity makes the optimality conditions nonlinear and is rejected.
    """
    coupled = set(qp.matrix_params) - set(fixed)
    if coupled:
        raise CertifyError(f"{label}: parameters {sorted(coupled)} enter the constraint matrices; "
                           "their optimality conditions are not linear")
    if model is None:
        model = MilpModel()
    n, m, p, k = qp.n, qp.m, qp.p, qp.k
    if param is None:
        param = Affine.of_vars(model.add_vars(f"{prefix}param", k))
    if param.size != k:
        raise CertifyError(f"{label}: parameter has {param.size} entries, QP expects {k}")
    M = float(big_m)
    z = model.add_vars(f"{prefix}z", n, -M, M)
    lam = model.add_vars(f"{prefix}lam", m, 0.0, M)
    nu = model.add_vars(f"{prefix}nu", p, -M, M)
    phi = model.add_vars(f"{prefix}phi", m, binary=True)

    # Q z + A' lam + C' nu = -q
    if n:
        _rows(model, [(z, qp.Q), (lam, qp.A_in.T), (nu, qp.C_eq.T)], "=", -qp.q, label)
    # C z + H p = d
    if p:
        pc, pH, pconst = param.linear(qp.H_eq)
        _rows(model, [(z, qp.C_eq), (pc, pH)], "=", qp.d_eq - pconst, label)
    if m:
        gc, gG, gconst = param.linear(qp.G_in)
        b_eff = qp.b_in - gconst
        # A z + G p <= b
        _rows(model, [(z, qp.A_in), (gc, gG)], "<=", b_eff, label)
        # lam <= M phi
        _rows(model, [(lam, np.eye(m)), (phi, -M * np.eye(m))], "<=", 0.0, label)
        # b - A z - G p <= M (1 - phi)
        _rows(model, [(z, -qp.A_in), (gc, -gG), (phi, M * np.eye(m))], "<=", M - b_eff, label)
    return model, KktVars(z, lam, nu, phi, param)


def kkt_assignment(qp: AffineQp, kv: KktVars, sol: qpmod.QpSolution, param_value, out: np.ndarray) -> None:
    out[kv.z] = sol.z_star
    lam = np.maximum(sol.lambda_star, 0.0)
    bp, _ = qp.rhs(param_value)
    slack = bp - qp.A_in @ sol.z_star
    active = lam > slack
    # snap the complementary side so the big-M rows hold exactly
    out[kv.lam] = np.where(active, lam, 0.0)
    out[kv.nu] = sol.nu_star
    out[kv.phi] = active.astype(float)


# -- the pipeline attack -------------------------------------------------------

@dataclass
class CertModel:
    model: MilpModel
    mlp: MlpParams
    grid: GridSpec
    x: np.ndarray
    y: np.ndarray
    eps: float
    mask: np.ndarray
    bounds: LayerBounds
    delta: np.ndarray
    nn: NnVars
    dispatch: KktVars
    redispatch: KktVars
    dispatch_qp: AffineQp
    redispatch_qp: AffineQp
    big_m: float

    def pipeline_cost(self, delta) -> tuple[float, Optional[np.ndarray]]:
        """Pure-LP pipeline cost at ``delta`` and the matching MILP assignment (None on failure)."""
        x_in = self.x + np.asarray(delta, dtype=float)
        out = np.zeros(self.model.n)
        out[self.delta] = delta
        nn_assignment(self.mlp, self.nn, x_in, out)
        y_hat = out[self.nn.output]
        s1 = qpmod.solve(self.dispatch_qp, y_hat)
        if not s1.optimal:
            return np.nan, None
        kkt_assignment(self.dispatch_qp, self.dispatch, s1, y_hat, out)
        g = self.grid
        p_g = s1.z_star[:g.n_gen]
        par2 = np.concatenate([self.y, p_g])
        s2 = qpmod.solve(self.redispatch_qp, par2)
        if not s2.optimal:
            return np.nan, None
        kkt_assignment(self.redispatch_qp, self.redispatch, s2, par2, out)
        nd = g.n_load
        cost = task_cost(p_g, s2.z_star[:nd], s2.z_star[nd:nd + g.n_gen], g)
        return cost, out

    def delta_of(self, assignment) -> np.ndarray:
        lo, hi = self.bounds.input_lo - self.x, self.bounds.input_hi - self.x
        return np.clip(np.asarray(assignment)[self.delta], lo, hi)

    def lift(self, assignment) -> Optional[np.ndarray]:
        """Heuristic: evaluate the pipeline at the (relaxed) point's perturbation."""
        return self.pipeline_cost(self.delta_of(assignment))[1]


def assemble_cert(mlp: MlpParams, grid: GridSpec, x, y, eps: float, mask=None,
                  big_m: float = BIG_M) -> CertModel:
    """Worst-case task cost over the input box, as a MILP in (delta, network, both stages)."""
    x = np.asarray(x, dtype=float)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mask = np.ones(x.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if np.any(x[mask] < 0) or np.any(x[mask] > 1):
        raise CertifyError("attackable features must lie in [0, 1]")
    lo, hi = input_box(x, eps, mask)
    bounds = ibp_bounds(mlp, x, eps, mask, box=(lo, hi))
    model = MilpModel(sense="max")
    delta = model.add_vars("delta", x.size, lo - x, hi - x)
    try:
        model, nn = encode_nn(mlp, bounds, model, Affine(delta, x.copy()), label="nn")
        d_qp = build_dispatch(grid, gamma=0.0)
        model, kd = encode_kkt(d_qp, big_m, model, Affine.of_vars(nn.output), "dispatch-kkt", "d_")
        # susceptances stay at nominal, so the redispatch matrices are constants
        r_qp = build_redispatch(grid, gamma=0.0)
        par2 = Affine.concat(Affine.const(y), Affine.of_vars(kd.z[:grid.n_gen]))
        model, kr = encode_kkt(r_qp, big_m, model, par2, "redispatch-kkt", "r_", fixed={"susceptance"})
    except CertifyError as exc:
        raise CertifyError(f"assembling certification model: {exc}") from exc
    nd, ng = grid.n_load, grid.n_gen
    model.set_objective(kd.z[:ng], grid.gen_cost)
    model.set_objective(kr.z[:nd], np.full(nd, grid.c_ls))
    model.set_objective(kr.z[nd:nd + ng], np.full(ng, grid.c_gs))
    return CertModel(model, mlp, grid, x, y, float(eps), mask, bounds, delta, nn, kd, kr,
                     d_qp, r_qp, float(big_m))


# -- certification driver ------------------------------------------------------

@dataclass
class CertResult:
    status: MilpStatus
    objective: float
    delta: Optional[np.ndarray]
    verify_cost: float
    clean_cost: float
    nodes: int
    gap: float
    seconds: float
    n_binaries: int
    near_big_m: bool
    regularized_cost: float = np.nan
    milp: Optional[MilpResult] = field(default=None, repr=False)

    @property
    def verify_error(self) -> float:
        return abs(self.objective - self.verify_cost)


def certify_sample(mlp: MlpParams, grid: GridSpec, x, y, eps: float, mask=None, big_m: float = BIG_M,
                   node_limit: int = 20_000, time_limit: Optional[float] = None,
                   start_deltas: Sequence[np.ndarray] = ()) -> CertResult:
    """Exact worst-case input perturbation of one sample.

    ``start_deltas`` are optional perturbations (for example from PGD) lifted
    into starting incumbents; the clean point is always offered.
    """
    from ..pipeline import get_pipeline, UnpredictableParams

    cm = assemble_cert(mlp, grid, x, y, eps, mask, big_m)
    clean_cost, clean_pt = cm.pipeline_cost(np.zeros(cm.x.size))
    incumbent = clean_pt
    best = clean_cost if clean_pt is not None else -np.inf
    for d in start_deltas:
        c, pt = cm.pipeline_cost(cm.delta_of(_embed(cm, d)))
        if pt is not None and c > best and cm.model.violation(pt) <= 1e-6:
            best, incumbent = c, pt
    res = solve_milp(cm.model, node_limit=node_limit, time_limit=time_limit, heuristic=cm.lift,
                     incumbent=incumbent)
    if res.assignment is None:
        return CertResult(res.status, np.nan, None, np.nan, clean_cost, res.nodes, res.gap, res.seconds,
                          len(cm.model.binaries), False, milp=res)
    a = res.assignment
    delta = cm.delta_of(a)
    verify, _ = cm.pipeline_cost(delta)
    duals = np.concatenate([a[cm.dispatch.lam], a[cm.dispatch.nu], a[cm.redispatch.lam], a[cm.redispatch.nu]])
    near = bool(np.any(np.abs(duals) >= NEAR_M * big_m))
    if near:
        warnings.warn("a dual variable at the MILP optimum is within 1% of the big-M bound; "
                      "the certificate may be invalid", RuntimeWarning, stacklevel=2)
    phi = UnpredictableParams.nominal(grid)
    reg = get_pipeline(grid).infer(mlp, cm.x + delta, cm.y, phi).cost
    return CertResult(res.status, res.objective, delta, verify, clean_cost, res.nodes, res.gap, res.seconds,
                      len(cm.model.binaries), near, reg, res)


def _embed(cm: CertModel, delta) -> np.ndarray:
    full = np.zeros(cm.model.n)
    full[cm.delta] = np.asarray(delta, dtype=float)
    return full

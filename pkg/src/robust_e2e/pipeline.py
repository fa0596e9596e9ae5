"""Forecast -> dispatch -> redispatch as one differentiable map.

The composition is written for a generic chain of affine-parametric QPs whose
parameter slots are affine in the previous stage's decision::

    p_1 = E_1 y_hat + e_1,   p_i = E_i z_{i-1} + e_i,   cost = sum_i c_i' z_i

The power task is the two-stage instance of this chain.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import diffqp, forecaster
from .diffqp import SingularJacobian
from .forecaster import MlpParams
from .grid import GridSpec
from .batched import backward_batch, solve_batch
from .qp import AffineQp, QpSolution, solve
from .tasks import (
    GAMMA_REG,
    DispatchDecision,
    RedispatchDecision,
    build_dispatch,
    build_redispatch,
    redispatch_cost_gradient,
    redispatch_matrices,
    split_dispatch,
    split_redispatch,
    susceptance_grad,
    task_cost,
)


class StageError(RuntimeError):
    """A lower-level solve or its backward pass failed."""

    def __init__(self, stage: str, reason: str):
        super().__init__(f"{stage}: {reason}")
        self.stage = stage
        self.reason = reason


@dataclass
class UnpredictableParams:
    b: np.ndarray
    nominal_b: np.ndarray

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.nominal_b = np.asarray(self.nominal_b, dtype=float)
        if np.any(self.b <= 0):
            raise ValueError("susceptances must stay positive")

    @classmethod
    def nominal(cls, grid: GridSpec) -> "UnpredictableParams":
        b = grid.susceptance
        return cls(b.copy(), b.copy())

    def perturbed(self, delta_b) -> "UnpredictableParams":
        return UnpredictableParams(self.nominal_b + np.asarray(delta_b, dtype=float), self.nominal_b)


# -- generic chain -----------------------------------------------------------------

@dataclass
class ChainStage:
    name: str
    qp: AffineQp
    link: np.ndarray  # E_i: maps previous output to this parameter slot
    offset: np.ndarray  # e_i
    cost: np.ndarray  # c_i


@dataclass
class ChainResult:
    solutions: list[QpSolution]
    params: list[np.ndarray]
    cost: float


def chain_forward(stages: Sequence[ChainStage], first_input) -> ChainResult:
    prev = np.asarray(first_input, dtype=float)
    sols, params = [], []
    cost = 0.0
    for st in stages:
        p = st.link @ prev + st.offset
        sol = solve(st.qp, p)
        if not sol.optimal:
            raise StageError(st.name, f"solver returned {sol.status.value}")
        sols.append(sol)
        params.append(p)
        cost += float(st.cost @ sol.z_star)
        prev = sol.z_star
    return ChainResult(sols, params, cost)


def chain_backward(stages: Sequence[ChainStage], res: ChainResult) -> tuple[np.ndarray, list[diffqp.QpGradients]]:
    """Gradient of the chain cost w.r.t. the first input, plus per-stage QP gradients."""
    grads: list[Optional[diffqp.QpGradients]] = [None] * len(stages)
    upstream = np.zeros(stages[-1].qp.n)
    for i in range(len(stages) - 1, -1, -1):
        st = stages[i]
        dz = st.cost + upstream
        try:
            g = diffqp.backward(st.qp, res.params[i], res.solutions[i], dz)
        except SingularJacobian as exc:
            raise StageError(st.name, f"singular KKT Jacobian ({exc})") from exc
        grads[i] = g
        upstream = st.link.T @ g.d_param
    return upstream, grads


# -- power two-stage pipeline ------------------------------------------------------

@dataclass
class PipelineOutput:
    y_hat: np.ndarray
    dispatch: DispatchDecision
    redispatch: RedispatchDecision
    cost: float
    tapes: dict = field(default_factory=dict)


class PowerPipeline:
    """Two-stage power task with the dispatch QP cached (it never changes)."""

    def __init__(self, grid: GridSpec, gamma: float = GAMMA_REG):
        self.grid = grid
        self.gamma = gamma
        self.dispatch_qp = build_dispatch(grid, gamma)
        self._redispatch = {}
        ng, nb, nd = grid.n_gen, grid.n_bus, grid.n_load
        # stage 2 parameter = (y, P_g) = [0; S] z_1 + [y; 0]
        self._link2 = np.zeros((nd + ng, ng + nb + nd))
        self._link2[nd:, :ng] = np.eye(ng)
        self._cost1 = np.concatenate([grid.gen_cost, np.zeros(nb + nd)])
        self._cost2 = redispatch_cost_gradient(grid)

    def redispatch_qp(self, b) -> AffineQp:
        key = np.asarray(b, dtype=float).tobytes()
        qp = self._redispatch.get(key)
        if qp is None:
            if len(self._redispatch) > 256:
                self._redispatch.clear()
            qp = build_redispatch(self.grid, b, self.gamma)
            self._redispatch[key] = qp
        return qp

    def stages(self, y, b) -> list[ChainStage]:
        nd = self.grid.n_load
        offset2 = np.zeros(nd + self.grid.n_gen)
        offset2[:nd] = y
        return [
            ChainStage("dispatch", self.dispatch_qp, np.eye(nd), np.zeros(nd), self._cost1),
            ChainStage("redispatch", self.redispatch_qp(b), self._link2, offset2, self._cost2),
        ]

    def decide(self, y_hat, y, b) -> tuple[ChainResult, list[ChainStage]]:
        stages = self.stages(np.asarray(y, dtype=float), b)
        return chain_forward(stages, y_hat), stages

    def infer(self, theta: MlpParams, x, y, phi: UnpredictableParams) -> PipelineOutput:
        y_hat, tape = forecaster.forward(theta, x)
        res, stages = self.decide(y_hat, y, phi.b)
        d1 = split_dispatch(self.grid, res.solutions[0].z_star)
        d2 = split_redispatch(self.grid, res.solutions[1].z_star)
        cost = task_cost(d1.p_g, d2.p_ls, d2.p_gs, self.grid)
        return PipelineOutput(y_hat, d1, d2, cost,
                              {"nn": tape, "chain": res, "stages": stages, "b": np.array(phi.b)})

    def grads(self, theta: MlpParams, out: PipelineOutput) -> tuple[MlpParams, np.ndarray, np.ndarray]:
        d_yhat, qgrads = chain_backward(out.tapes["stages"], out.tapes["chain"])
        d_theta, d_x = forecaster.backward(theta, out.tapes["nn"], d_yhat)
        d_b = susceptance_grad(self.grid, qgrads[1])
        return d_theta, d_x, d_b

    def cost_at_forecast(self, y_hat, y, b) -> float:
        res, _ = self.decide(y_hat, y, b)
        d1 = split_dispatch(self.grid, res.solutions[0].z_star)
        d2 = split_redispatch(self.grid, res.solutions[1].z_star)
        return task_cost(d1.p_g, d2.p_ls, d2.p_gs, self.grid)


    # -- batched path ----------------------------------------------------------

    def infer_batch(self, theta: MlpParams, X, Y, b_rows=None) -> "BatchOutput":
        """Vectorized :meth:`infer` over rows of ``X``/``Y``.

        ``b_rows`` holds one susceptance vector per row (nominal when None).
        Rows whose solve fails get ``ok = False`` and a NaN cost instead of
        raising.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        B = X.shape[0]
        grid = self.grid
        ng, nd = grid.n_gen, grid.n_load
        if b_rows is None:
            b_rows = np.broadcast_to(grid.susceptance, (B, grid.n_line))
        b_rows = np.atleast_2d(np.asarray(b_rows, dtype=float))
        y_hat, tape = forecaster.forward(theta, X)
        sols1 = solve_batch(self.dispatch_qp, y_hat)
        ok = np.array([s.optimal for s in sols1])
        z1 = np.stack([s.z_star if s.optimal else np.zeros(self.dispatch_qp.n) for s in sols1])
        p_g = z1[:, :ng]
        params2 = np.hstack([Y, p_g])
        A2, C2 = redispatch_matrices(grid, b_rows)
        tmpl = self.redispatch_qp(grid.susceptance)
        sols2 = solve_batch(tmpl, params2, A=A2, C=C2)
        ok &= np.array([s.optimal for s in sols2])
        z2 = np.stack([s.z_star if s.optimal else np.zeros(tmpl.n) for s in sols2])
        p_ls, p_gs = z2[:, :nd], z2[:, nd:nd + ng]
        cost = p_g @ grid.gen_cost + grid.c_ls * p_ls.sum(axis=1) + grid.c_gs * p_gs.sum(axis=1)
        cost = np.where(ok, cost, np.nan)
        tapes = {"nn": tape, "sols": (sols1, sols2), "params": (y_hat, params2),
                 "mats": (A2, C2), "b": b_rows.copy()}
        return BatchOutput(y_hat, p_g, p_ls, p_gs, cost, ok, tapes)

    def grads_batch(self, theta: MlpParams, out: "BatchOutput", row_weights=None,
                    need_b: bool = True) -> tuple[MlpParams, np.ndarray, Optional[np.ndarray]]:
        """(d_theta, d_x, d_b) for the batch.

        ``d_theta`` is ``sum_i w_i d cost_i / d theta`` (failed rows weigh 0);
        ``d_x`` and ``d_b`` are per-row gradients of the unweighted cost.
        """
        sols1, sols2 = out.tapes["sols"]
        y_hat, params2 = out.tapes["params"]
        A2, C2 = out.tapes["mats"]
        B = y_hat.shape[0]
        ok = out.ok
        ng = self.grid.n_gen
        nd = self.grid.n_load
        # failed rows are fed a harmless stand-in and masked afterwards
        good1 = [s if ok[i] else _standin(sols1, ok) for i, s in enumerate(sols1)]
        good2 = [s if ok[i] else _standin(sols2, ok) for i, s in enumerate(sols2)]
        tmpl = self.redispatch_qp(self.grid.susceptance)
        g2 = backward_batch(tmpl, params2, good2, np.broadcast_to(self._cost2, (B, tmpl.n)),
                            A=A2, C=C2, with_matrices=need_b)
        dz1 = np.tile(self._cost1, (B, 1))
        dz1[:, :ng] += g2.d_param[:, nd:]
        g1 = backward_batch(self.dispatch_qp, y_hat, good1, dz1)
        d_yhat = np.where(ok[:, None], g1.d_param, 0.0)
        w = np.ones(B) if row_weights is None else np.asarray(row_weights, dtype=float)
        d_theta, _ = forecaster.backward(theta, out.tapes["nn"], d_yhat * w[:, None])
        _, d_x = forecaster.backward(theta, out.tapes["nn"], d_yhat)
        d_b = None
        if need_b:
            d_b = np.where(ok[:, None], susceptance_grad(self.grid, g2), 0.0)
        out.regularized = (g1.regularized | g2.regularized) & ok
        return d_theta, d_x, d_b


def _standin(sols, ok):
    for s, good in zip(sols, ok):
        if good:
            return s
    raise StageError("batch", "no row of the batch was solved")


@dataclass
class BatchOutput:
    y_hat: np.ndarray
    p_g: np.ndarray
    p_ls: np.ndarray
    p_gs: np.ndarray
    cost: np.ndarray
    ok: np.ndarray
    tapes: dict = field(default_factory=dict)
    regularized: Optional[np.ndarray] = None


@lru_cache(maxsize=16)
def get_pipeline(grid: GridSpec, gamma: float = GAMMA_REG) -> PowerPipeline:
    return PowerPipeline(grid, gamma)


def infer(theta: MlpParams, x, y, phi: UnpredictableParams, grid: GridSpec,
          gamma: float = GAMMA_REG) -> PipelineOutput:
    """Forecast, dispatch on the forecast, redispatch on the realized load."""
    return get_pipeline(grid, gamma).infer(theta, x, y, phi)


def grads(theta: MlpParams, x, y, phi: UnpredictableParams, grid: GridSpec,
          out: Optional[PipelineOutput] = None, gamma: float = GAMMA_REG):
    """(d_theta, d_x, d_b) of the task cost; ``out`` is recomputed when omitted."""
    pipe = get_pipeline(grid, gamma)
    if out is None:
        out = pipe.infer(theta, x, y, phi)
    return pipe.grads(theta, out)


def regret(theta: MlpParams, x, y, phi: UnpredictableParams, grid: GridSpec,
           gamma: float = GAMMA_REG) -> float:
    """Task cost of the forecast-driven decision minus that of a perfect forecast."""
    pipe = get_pipeline(grid, gamma)
    out = pipe.infer(theta, x, y, phi)
    return out.cost - pipe.cost_at_forecast(np.asarray(y, dtype=float), y, phi.b)


# -- two formulations of decision-matching training ----------------------------

@dataclass
class Toy:
    """Scalar toy: y_hat = theta * x, lower level min 1/2 (z - y)^2 on [lo, hi]."""
    x: np.ndarray
    y: np.ndarray
    lo: float
    hi: float

    def lower(self, y) -> np.ndarray:
        return np.clip(y, self.lo, self.hi)

    @staticmethod
    def loss(z, y):
        return 0.5 * (z - y) ** 2


@dataclass
class MisformulationResult:
    m_feasible: float  # formulation with z only required feasible
    m_bilevel: float  # formulation with z required optimal
    m_infer_bilevel: float  # inference with the bilevel-trained model
    m_infer_feasible: float  # inference with the feasible-trained model
    theta_feasible: float
    theta_bilevel: float
    tol: float

    @property
    def quadruple(self) -> tuple[float, float, float, float]:
        return (self.m_feasible, self.m_bilevel, self.m_infer_bilevel, self.m_infer_feasible)

    @property
    def chain_holds(self) -> bool:
        a, b, c, d = self.quadruple
        return a <= b + self.tol and abs(b - c) <= self.tol and c <= d + self.tol

    @property
    def strict(self) -> bool:
        return self.m_feasible < self.m_infer_feasible - self.tol


def random_toy(rng: np.random.Generator, n_samples: Optional[int] = None) -> Toy:
    n = int(n_samples or rng.integers(2, 9))
    x = rng.uniform(0.5, 2.0, size=n)
    y = rng.uniform(0.5, 1.5) * x + rng.normal(scale=0.3, size=n)
    lo = float(rng.uniform(-0.5, 0.8))
    hi = lo + float(rng.uniform(0.2, 1.5))
    return Toy(x, y, lo, hi)


def demo_misformulation(toy: Toy, theta_grid: Optional[np.ndarray] = None,
                        n_z: int = 401) -> MisformulationResult:
    """Grid-search both training formulations and their inference decisions.

    The matching loss is ``|l(z_hat; y_hat) - l(z*; y)|`` summed over samples.
    """
    if theta_grid is None:
        theta_grid = np.linspace(-3.0, 3.0, 601)
    target = toy.loss(toy.lower(toy.y), toy.y)
    y_hat = theta_grid[:, None] * toy.x[None, :]  # (n_theta, n)

    # bilevel: z_hat is the lower-level optimum for y_hat
    z_opt = toy.lower(y_hat)
    per_theta_bilevel = np.abs(toy.loss(z_opt, y_hat) - target).sum(axis=1)

    # feasible only: best feasible z per sample (grid plus the optimum itself)
    zs = np.linspace(toy.lo, toy.hi, n_z)
    cand = np.abs(toy.loss(zs[None, None, :], y_hat[:, :, None]) - target[None, :, None]).min(axis=2)
    cand = np.minimum(cand, np.abs(toy.loss(z_opt, y_hat) - target))
    per_theta_feasible = cand.sum(axis=1)

    i1 = int(np.argmin(per_theta_feasible))
    i2 = int(np.argmin(per_theta_bilevel))

    def at_inference(theta):
        # predict, then solve the lower-level problem for each sample
        yh = theta * toy.x
        return float(np.abs(toy.loss(toy.lower(yh), yh) - target).sum())

    scale = max(1.0, float(np.abs(target).sum()))
    return MisformulationResult(
        m_feasible=float(per_theta_feasible[i1]),
        m_bilevel=float(per_theta_bilevel[i2]),
        m_infer_bilevel=at_inference(theta_grid[i2]),
        m_infer_feasible=at_inference(theta_grid[i1]),
        theta_feasible=float(theta_grid[i1]),
        theta_bilevel=float(theta_grid[i2]),
        tol=1e-12 * scale,
    )

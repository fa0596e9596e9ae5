"""PGD adversaries on input features and line susceptances.

All attacks work on a batch (rows of ``X``/``Y``) and accept a single sample
as 1-D arrays. The susceptance attack moves the redispatch-stage ``b`` only;
the dispatch stage always sees the nominal grid.

Perturbation conventions:

* inputs: ``|delta_x| <= eps_x`` on attackable columns, zero elsewhere, and
  ``x + delta_x`` clamped to ``[0, 1]`` after every step;
* susceptance: ``|delta_b_l| <= eps_phi * nominal_b_l``. Internally the
  attack runs on the relative offset ``r = delta_b / nominal_b``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import forecaster
from .forecaster import MlpParams
from .grid import GridSpec
from .pipeline import UnpredictableParams, get_pipeline

BOUND_TOL = 1e-12


@dataclass(frozen=True)
class AttackBudget:
    eps_x: float = 0.0
    eps_phi: float = 0.0
    steps: int = 7
    restarts: int = 3
    step_size_x: Optional[float] = None
    step_size_phi: Optional[float] = None

    def __post_init__(self):
        if self.eps_x < 0 or self.eps_phi < 0:
            raise ValueError("budgets must be nonnegative")
        if self.eps_phi >= 1:
            raise ValueError("eps_phi must be < 1 so susceptances stay positive")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")

    @property
    def alpha_x(self) -> float:
        return self.step_size_x if self.step_size_x is not None else 2.0 * self.eps_x / self.steps

    @property
    def alpha_phi(self) -> float:
        return self.step_size_phi if self.step_size_phi is not None else 2.0 * self.eps_phi / self.steps


@dataclass
class AttackResult:
    delta_x: np.ndarray  # (B, n_features)
    delta_b: np.ndarray  # (B, n_line), absolute susceptance offsets
    cost: np.ndarray  # attacked task cost per row (NaN where every solve failed)
    clean_cost: np.ndarray
    skipped: int = 0  # per-row steps skipped after a failed solve
    trace: list = field(default_factory=list)  # (step, mean cost)

    def squeeze(self) -> "AttackResult":
        """Drop the batch axis of a single-sample result."""
        if self.delta_x.shape[0] != 1:
            return self
        return AttackResult(self.delta_x[0], self.delta_b[0], self.cost[0], self.clean_cost[0],
                            self.skipped, self.trace)


def _batch(x, y):
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    return np.atleast_2d(X), np.atleast_2d(np.asarray(y, dtype=float)), single


def _phi_or_nominal(phi, grid) -> UnpredictableParams:
    return UnpredictableParams.nominal(grid) if phi is None else phi


def _mask(mask, n_features) -> np.ndarray:
    if mask is None:
        return np.ones(n_features, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n_features,):
        raise ValueError(f"attack mask has shape {mask.shape}, expected ({n_features},)")
    return mask


def project_x(X, delta, eps, mask) -> np.ndarray:
    """Project onto the masked eps-box, then clamp ``X + delta`` into [0, 1]."""
    delta = np.clip(delta, -eps, eps)
    return np.where(mask, np.clip(X + delta, 0.0, 1.0) - X, 0.0)


def _check_budget(X, dx, r, budget, mask):
    tol = BOUND_TOL * (1.0 + budget.eps_x)
    assert np.all(np.abs(dx) <= budget.eps_x + tol), "input perturbation left its budget"
    assert np.all(dx[:, ~mask] == 0.0), "masked features were perturbed"
    moved = (X + dx)[:, mask]
    assert np.all(moved >= -tol) and np.all(moved <= 1.0 + tol), "attacked input left [0, 1]"
    assert np.all(np.abs(r) <= budget.eps_phi + BOUND_TOL), "susceptance perturbation left its budget"


def _pgd(theta, X, Y, phi, grid, budget, mask, on_x, on_phi, start_x=None, start_r=None,
         record_trace=False) -> AttackResult:
    pipe = get_pipeline(grid)
    B = X.shape[0]
    nominal = phi.nominal_b
    center = phi.b
    dx = np.zeros_like(X) if start_x is None else project_x(X, np.asarray(start_x, dtype=float),
                                                            budget.eps_x, mask)
    r = np.zeros((B, nominal.size)) if start_r is None else np.clip(
        np.asarray(start_r, dtype=float), -budget.eps_phi, budget.eps_phi)
    if not on_x:
        dx[:] = 0.0
    if not on_phi:
        r[:] = 0.0
    _check_budget(X, dx, r, budget, mask)

    clean = pipe.infer_batch(theta, X, Y, np.broadcast_to(center, (B, nominal.size))).cost
    best_cost = np.full(B, -np.inf)
    best_dx, best_r = dx.copy(), r.copy()
    skipped = 0
    trace = []

    for step in range(budget.steps + 1):
        out = pipe.infer_batch(theta, X + dx, Y, center + r * nominal)
        cost = np.where(out.ok, out.cost, -np.inf)
        better = cost > best_cost
        best_cost[better] = cost[better]
        best_dx[better], best_r[better] = dx[better], r[better]
        if record_trace:
            trace.append((step, float(np.nanmean(np.where(out.ok, out.cost, np.nan)))))
        if step == budget.steps:
            break
        _, g_x, g_b = pipe.grads_batch(theta, out, need_b=on_phi)
        live = out.ok[:, None]
        skipped += int((~out.ok).sum())
        if on_x and budget.eps_x > 0:
            dx = np.where(live, project_x(X, dx + budget.alpha_x * np.sign(g_x) * mask,
                                          budget.eps_x, mask), dx)
        if on_phi and budget.eps_phi > 0:
            g = g_b * nominal
            scale = np.abs(g).max(axis=1, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                unit = np.where(scale > 0, g / scale, 0.0)
            r = np.where(live, np.clip(r + budget.alpha_phi * unit, -budget.eps_phi, budget.eps_phi), r)
        _check_budget(X, dx, r, budget, mask)

    best_cost[~np.isfinite(best_cost)] = np.nan
    return AttackResult(best_dx, best_r * nominal, best_cost, clean, skipped, trace)


def pgd_input(theta: MlpParams, x, y, phi: Optional[UnpredictableParams], grid: GridSpec,
              budget: AttackBudget, mask=None, start=None, trace: bool = False) -> AttackResult:
    """Sign-gradient ascent of the task cost on the attackable input features.

    Returns the best iterate seen (the start included), so the attacked cost
    never falls below the cost at the start point.
    """
    X, Y, single = _batch(x, y)
    start_x = None if start is None else np.atleast_2d(start[0])
    res = _pgd(theta, X, Y, _phi_or_nominal(phi, grid), grid, budget, _mask(mask, X.shape[1]),
               True, False, start_x, None, trace)
    return res.squeeze() if single else res


def pgd_phi(theta: MlpParams, x, y, phi: Optional[UnpredictableParams], grid: GridSpec,
            budget: AttackBudget, mask=None, start=None, trace: bool = False) -> AttackResult:
    """Ascent on the redispatch susceptances.

    Each step moves the relative offset by ``alpha_phi`` times the gradient
    divided by its max-norm, then clips to ``[-eps_phi, eps_phi]`` per line.
    """
    X, Y, single = _batch(x, y)
    phi = _phi_or_nominal(phi, grid)
    start_r = None if start is None else np.atleast_2d(start[1]) / phi.nominal_b
    res = _pgd(theta, X, Y, phi, grid, budget, _mask(mask, X.shape[1]), False, True, None, start_r, trace)
    return res.squeeze() if single else res


def pgd_joint(theta: MlpParams, x, y, phi: Optional[UnpredictableParams], grid: GridSpec,
              budget: AttackBudget, mask=None, start=None, trace: bool = False) -> AttackResult:
    """Both blocks ascend from the same gradient evaluation at every step."""
    X, Y, single = _batch(x, y)
    phi = _phi_or_nominal(phi, grid)
    start_x = start_r = None
    if start is not None:
        start_x = np.atleast_2d(start[0])
        start_r = np.atleast_2d(start[1]) / phi.nominal_b
    res = _pgd(theta, X, Y, phi, grid, budget, _mask(mask, X.shape[1]), True, True, start_x, start_r, trace)
    return res.squeeze() if single else res


_BLOCKS = {pgd_input: (True, False), pgd_phi: (False, True), pgd_joint: (True, True)}


def random_phi(phi: UnpredictableParams, budget: AttackBudget, seed: int = 0,
               n: Optional[int] = None) -> np.ndarray:
    """Uniform offsets in ``[-eps_phi * b_l, eps_phi * b_l]``; shape ``(n, n_line)`` or ``(n_line,)``."""
    rng = np.random.default_rng(seed)
    size = phi.nominal_b.shape if n is None else (n,) + phi.nominal_b.shape
    return rng.uniform(-1.0, 1.0, size=size) * budget.eps_phi * phi.nominal_b


def random_starts(X, nominal_b, budget: AttackBudget, mask, seed: int, restart: int,
                  sample_ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Uniform starts inside the budget; one RNG stream per (seed, restart, sample)."""
    B = X.shape[0]
    ids = np.arange(B) if sample_ids is None else np.asarray(sample_ids)
    sx = np.empty_like(X)
    sb = np.empty((B, nominal_b.size))
    for i, sid in enumerate(ids):
        rng = np.random.default_rng([seed, restart, int(sid)])
        sx[i] = rng.uniform(-budget.eps_x, budget.eps_x, size=X.shape[1])
        sb[i] = rng.uniform(-budget.eps_phi, budget.eps_phi, size=nominal_b.size) * nominal_b
    return project_x(X, sx, budget.eps_x, mask), sb


def multistart_worst(attack: Callable, theta: MlpParams, x, y, phi: Optional[UnpredictableParams],
                     grid: GridSpec, budget: AttackBudget, restarts: Optional[int] = None,
                     seed: int = 0, mask=None, sample_ids=None) -> AttackResult:
    """Run ``attack`` from several starts and keep the per-row worst case.

    Restart 0 starts at zero (so one restart is exactly the plain attack);
    restart ``k >= 1`` starts uniformly inside the budget. Starts depend only on
    (seed, k, sample id), so adding restarts never lowers the result.
    """
    if attack not in _BLOCKS:
        raise ValueError("attack must be pgd_input, pgd_phi or pgd_joint")
    restarts = budget.restarts if restarts is None else int(restarts)
    X, Y, single = _batch(x, y)
    phi = _phi_or_nominal(phi, grid)
    m = _mask(mask, X.shape[1])
    best = None
    for k in range(restarts):
        start = None
        if k > 0:
            start = random_starts(X, phi.nominal_b, budget, m, seed, k, sample_ids)
        res = attack(theta, X, Y, phi, grid, budget, mask=m, start=start)
        if best is None:
            best = res
            continue
        better = np.nan_to_num(res.cost, nan=-np.inf) > np.nan_to_num(best.cost, nan=-np.inf)
        best.delta_x[better] = res.delta_x[better]
        best.delta_b[better] = res.delta_b[better]
        best.cost[better] = res.cost[better]
        best.skipped += res.skipped
    return best.squeeze() if single else best


def write_trace(path: Union[str, Path], trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "cost"])
        w.writerows(trace)


# -- MSE adversary (baseline training) -----------------------------------------

def pgd_input_mse(theta: MlpParams, X, Y, budget: AttackBudget, mask=None) -> np.ndarray:
    """Sign-gradient ascent of the squared forecast error on the inputs."""
    X, Y, _ = _batch(X, Y)
    m = _mask(mask, X.shape[1])
    dx = np.zeros_like(X)
    if budget.eps_x == 0:
        return dx
    for _ in range(budget.steps):
        y_hat, tape = forecaster.forward(theta, X + dx)
        _, g_x = forecaster.backward(theta, tape, 2.0 * (y_hat - Y))
        dx = project_x(X, dx + budget.alpha_x * np.sign(g_x) * m, budget.eps_x, m)
    return dx


# -- gradient diagnostics ------------------------------------------------------

def gradient_cosine(g1: MlpParams, g2: MlpParams) -> float:
    a, b = g1.flat(), g2.flat()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class AlignmentResult:
    norm_x: np.ndarray  # per mini-batch 1-norm of d_theta under the input adversary
    norm_phi: np.ndarray  # ... under the susceptance adversary
    cosine: np.ndarray  # per mini-batch cosine similarity of the two

    @property
    def mean_norm_x(self) -> float:
        return float(np.mean(self.norm_x))

    @property
    def mean_norm_phi(self) -> float:
        return float(np.mean(self.norm_phi))


def gradient_alignment(theta: MlpParams, X, Y, grid: GridSpec, budget: AttackBudget,
                       batch_size: int = 32, mask=None, phi=None) -> AlignmentResult:
    """Un-clipped mean-loss parameter gradients under input-only and phi-only PGD."""
    X, Y, _ = _batch(X, Y)
    phi = _phi_or_nominal(phi, grid)
    pipe = get_pipeline(grid)
    nx, nphi, cos = [], [], []
    for start in range(0, X.shape[0], batch_size):
        xb, yb = X[start:start + batch_size], Y[start:start + batch_size]
        B = xb.shape[0]
        ax = pgd_input(theta, xb, yb, phi, grid, budget, mask=mask)
        ap = pgd_phi(theta, xb, yb, phi, grid, budget, mask=mask)
        base_b = np.broadcast_to(phi.b, (B, phi.b.size))
        out_x = pipe.infer_batch(theta, xb + ax.delta_x, yb, base_b)
        out_p = pipe.infer_batch(theta, xb, yb, base_b + ap.delta_b)
        gx, _, _ = pipe.grads_batch(theta, out_x, row_weights=np.full(B, 1.0 / B), need_b=False)
        gp, _, _ = pipe.grads_batch(theta, out_p, row_weights=np.full(B, 1.0 / B), need_b=False)
        nx.append(forecaster.grad_l1(gx))
        nphi.append(forecaster.grad_l1(gp))
        cos.append(gradient_cosine(gx, gp))
    return AlignmentResult(np.array(nx), np.array(nphi), np.array(cos))

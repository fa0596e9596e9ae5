"""Natural and adversarial end-to-end training, and robustness evaluation.

Every outer step minimizes ``alpha * clean + (1 - alpha) * adversarial`` on
the mean task cost of a mini-batch. The inner maximization (PGD on inputs,
susceptances or both) holds theta fixed; the outer step then holds the
perturbation fixed. Clean and perturbed rows go through the pipeline as one
stacked batch, so each outer step is a single forward/backward pass.

Pass accounting (one pass = one batched forward plus backward):

* standard AT: ``steps`` inner passes + 1 outer pass per mini-batch;
* free AT: ``steps`` passes per mini-batch, each updating both theta and the
  perturbation, for ``max(1, epochs // steps)`` epochs;
* NAT: one pass per mini-batch.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import forecaster
from .attacks import AttackBudget, multistart_worst, pgd_input, pgd_joint, pgd_phi, project_x, random_phi
from .data import Dataset
from .forecaster import MlpParams, OptimizerState
from .grid import GridSpec
from .pipeline import UnpredictableParams, get_pipeline


class Method(str, Enum):
    NAT = "NAT"
    AT_MSE = "AT_MSE"
    AT_INPUT = "AT_INPUT"
    AT_PARA = "AT_PARA"
    AT_BOTH = "AT_BOTH"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: Method = Method.NAT
    alpha: float = 0.5
    budget: AttackBudget = field(default_factory=lambda: AttackBudget(steps=7))
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    warm_start: Optional[str] = None
    free_at: bool = False
    seed: int = 0
    hidden: tuple = (8, 8)
    objective: str = "task"  # "task" cost or "mse" (AT_MSE always uses mse)
    clip: Optional[float] = forecaster.CLIP_L1
    max_fail_frac: float = 0.01
    random_start: bool = True  # inner PGD starts uniformly inside the budget

    def __post_init__(self):
        self.method = Method(self.method)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.objective not in ("task", "mse"):
            raise ValueError("objective must be 'task' or 'mse'")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def loss(self) -> str:
        return "mse" if self.method == Method.AT_MSE else self.objective

    @property
    def adversarial(self) -> bool:
        return self.method != Method.NAT

    @property
    def effective_epochs(self) -> int:
        if self.free_at and self.adversarial:
            return max(1, self.epochs // self.budget.steps)
        return self.epochs

    @property
    def passes_per_batch(self) -> int:
        if not self.adversarial:
            return 1
        return self.budget.steps if self.free_at else self.budget.steps + 1


@dataclass
class EpochLog:
    epoch: int
    clean_loss: float
    adv_loss: float
    grad_norm_pre: float
    grad_norm_post: float
    lr: float
    passes: int
    skipped: int


@dataclass
class TrainResult:
    theta: MlpParams
    opt: OptimizerState
    log: list[EpochLog]
    passes: int
    skipped: int

    def write_log(self, path: Union[str, Path]) -> None:
        names = list(EpochLog.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for row in self.log:
                w.writerow([getattr(row, n) for n in names])


# -- loss plumbing -------------------------------------------------------------

class _Objective:
    """Batched loss, per-row values and parameter gradient for one method."""

    def __init__(self, cfg: TrainConfig, grid: GridSpec, nominal_b):
        self.cfg = cfg
        self.grid = grid
        self.pipe = get_pipeline(grid)
        self.nominal_b = nominal_b
        # own stream, so shuffling (and hence the alpha = 1 trajectory) is unaffected
        self.start_rng = np.random.default_rng([cfg.seed, 2])

    def start(self, X, Bn, mask):
        """Initial (input offset, relative susceptance offset) for the inner maximization."""
        cfg, bud = self.cfg, self.cfg.budget
        dx = np.zeros_like(X)
        r = np.zeros_like(Bn)
        if not cfg.random_start:
            return dx, r
        if cfg.method in (Method.AT_INPUT, Method.AT_BOTH, Method.AT_MSE) and bud.eps_x > 0:
            dx = project_x(X, self.start_rng.uniform(-bud.eps_x, bud.eps_x, X.shape), bud.eps_x, mask)
        if cfg.method in (Method.AT_PARA, Method.AT_BOTH) and bud.eps_phi > 0:
            r = self.start_rng.uniform(-bud.eps_phi, bud.eps_phi, Bn.shape)
        return dx, r

    def evaluate(self, theta, X, Y, B_rows, weights):
        """Return (per-row loss, weighted theta gradient, input grads, b grads, ok mask)."""
        if self.cfg.loss == "mse":
            y_hat, tape = forecaster.forward(theta, X)
            err = y_hat - Y
            loss = (err ** 2).sum(axis=1)
            g = 2.0 * err
            d_theta, _ = forecaster.backward(theta, tape, g * weights[:, None])
            _, d_x = forecaster.backward(theta, tape, g)
            return loss, d_theta, d_x, np.zeros_like(B_rows), np.ones(len(X), dtype=bool)
        out = self.pipe.infer_batch(theta, X, Y, B_rows)
        w = np.where(out.ok, weights, 0.0)
        d_theta, d_x, d_b = self.pipe.grads_batch(theta, out, row_weights=w,
                                                  need_b=self.cfg.method in (Method.AT_PARA, Method.AT_BOTH))
        if d_b is None:
            d_b = np.zeros_like(B_rows)
        return out.cost, d_theta, d_x, d_b, out.ok


def _blend_rows(cfg, X, Y, Bn, Xa, Ba):
    """Stack clean and adversarial rows with their loss weights; zero-weight blocks are dropped."""
    n = X.shape[0]
    blocks = []
    if cfg.alpha > 0 or not cfg.adversarial:
        w = 1.0 if not cfg.adversarial else cfg.alpha
        blocks.append((X, Y, Bn, np.full(n, w / n), "clean"))
    if cfg.adversarial and cfg.alpha < 1:
        blocks.append((Xa, Y, Ba, np.full(n, (1.0 - cfg.alpha) / n), "adv"))
    X_all = np.vstack([b[0] for b in blocks])
    Y_all = np.vstack([b[1] for b in blocks])
    B_all = np.vstack([b[2] for b in blocks])
    w_all = np.concatenate([b[3] for b in blocks])
    names = [b[4] for b in blocks]
    return X_all, Y_all, B_all, w_all, names


def _inner_step(cfg, obj, theta, X, Y, Bn, dx, r, mask, g_x, g_b):
    """One ascent update of the perturbation from already computed gradients."""
    bud = cfg.budget
    nominal = obj.nominal_b
    if cfg.method in (Method.AT_INPUT, Method.AT_BOTH, Method.AT_MSE) and bud.eps_x > 0:
        dx = project_x(X, dx + bud.alpha_x * np.sign(g_x) * mask, bud.eps_x, mask)
    if cfg.method in (Method.AT_PARA, Method.AT_BOTH) and bud.eps_phi > 0:
        g = g_b * nominal
        scale = np.abs(g).max(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(scale > 0, g / scale, 0.0)
        r = np.clip(r + bud.alpha_phi * unit, -bud.eps_phi, bud.eps_phi)
    return dx, r


def _check_batch(cfg, loss, ok, batch_id):
    fails = int((~ok).sum())
    if fails / len(ok) > cfg.max_fail_frac:
        raise TrainingError(f"batch {batch_id}: {fails}/{len(ok)} solves failed")
    if not np.all(np.isfinite(loss[ok])):
        raise TrainingError(f"batch {batch_id}: non-finite loss")
    return fails


# -- training loop ---------------------------------------------------------------

def initial_params(cfg: TrainConfig, n_in: int, n_out: int) -> tuple[MlpParams, Optional[OptimizerState]]:
    if cfg.warm_start:
        theta, _ = forecaster.load_checkpoint(cfg.warm_start)
        if theta.n_in != n_in or theta.n_out != n_out:
            raise TrainingError(f"warm-start network maps {theta.n_in}->{theta.n_out}, "
                                f"data needs {n_in}->{n_out}")
        return theta, None
    return forecaster.init_mlp([n_in, *cfg.hidden, n_out], seed=cfg.seed), None


def train(cfg: TrainConfig, dataset: Dataset, grid: GridSpec, theta: Optional[MlpParams] = None) -> TrainResult:
    if dataset.n_samples == 0:
        raise TrainingError("empty training set")
    if dataset.n_load != grid.n_load:
        raise TrainingError(f"dataset has {dataset.n_load} loads, grid has {grid.n_load}")
    if theta is None:
        theta, _ = initial_params(cfg, dataset.n_features, dataset.n_load)
    X_all, Y_all = dataset.features, dataset.loads
    mask = dataset.attack_mask
    nominal = UnpredictableParams.nominal(grid).nominal_b
    obj = _Objective(cfg, grid, nominal)
    n = dataset.n_samples
    n_batches = math.ceil(n / cfg.batch_size)
    epochs = cfg.effective_epochs
    inner = cfg.budget.steps if (cfg.free_at and cfg.adversarial) else 1
    opt = OptimizerState.for_params(theta, cfg.lr, n_batches * epochs * inner)
    shuffle_rng = np.random.default_rng([cfg.seed, 0])

    log: list[EpochLog] = []
    passes = 0
    skipped = 0
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        sums = {"clean": [], "adv": [], "pre": [], "post": []}
        ep_passes, ep_skipped = 0, 0
        lr_seen = opt.lr
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            X, Y = X_all[idx], Y_all[idx]
            Bn = np.broadcast_to(nominal, (len(idx), nominal.size)).copy()
            if cfg.free_at and cfg.adversarial:
                theta, k, fails = _free_batch(cfg, obj, theta, opt, X, Y, Bn, mask, b, sums)
            else:
                theta, k, fails = _standard_batch(cfg, obj, theta, opt, X, Y, Bn, mask, b, sums)
            ep_passes += k
            ep_skipped += fails
        passes += ep_passes
        skipped += ep_skipped
        log.append(EpochLog(epoch, _mean(sums["clean"]), _mean(sums["adv"]), _mean(sums["pre"]),
                            _mean(sums["post"]), lr_seen, ep_passes, ep_skipped))
    expected = n_batches * epochs * cfg.passes_per_batch
    if passes != expected:
        raise AssertionError(f"pass count {passes} != {expected}")
    return TrainResult(theta, opt, log, passes, skipped)


def _mean(vals):
    return float(np.mean(vals)) if vals else float("nan")


def _outer_step(cfg, obj, theta, opt, X, Y, Bn, Xa, Ba, batch_id, sums):
    Xs, Ys, Bs, w, names = _blend_rows(cfg, X, Y, Bn, Xa, Ba)
    loss, d_theta, d_x, d_b, ok = obj.evaluate(theta, Xs, Ys, Bs, w)
    fails = _check_batch(cfg, loss, ok, batch_id)
    n = X.shape[0]
    for j, name in enumerate(names):
        part = loss[j * n:(j + 1) * n]
        sums[name].append(float(np.mean(part[ok[j * n:(j + 1) * n]])))
    pre = forecaster.grad_l1(d_theta)
    theta = forecaster.clip_and_step(opt, theta, d_theta, cfg.clip)
    post = min(pre, cfg.clip) if cfg.clip is not None else pre
    sums["pre"].append(pre)
    sums["post"].append(post)
    return theta, fails, d_x, d_b, names


def _standard_batch(cfg, obj, theta, opt, X, Y, Bn, mask, batch_id, sums):
    dx = np.zeros_like(X)
    r = np.zeros_like(Bn)
    passes = 0
    fails = 0
    if cfg.adversarial:
        dx, r = obj.start(X, Bn, mask)
        for _ in range(cfg.budget.steps):
            Xa, Ba = X + dx, Bn + r * obj.nominal_b
            if cfg.loss == "mse":
                y_hat, tape = forecaster.forward(theta, Xa)
                _, g_x = forecaster.backward(theta, tape, 2.0 * (y_hat - Y))
                g_b = np.zeros_like(Bn)
            else:
                out = obj.pipe.infer_batch(theta, Xa, Y, Ba)
                _, g_x, g_b = obj.pipe.grads_batch(
                    theta, out, need_b=cfg.method in (Method.AT_PARA, Method.AT_BOTH))
                if g_b is None:
                    g_b = np.zeros_like(Bn)
                live = out.ok[:, None]
                g_x, g_b = np.where(live, g_x, 0.0), np.where(live, g_b, 0.0)
            dx, r = _inner_step(cfg, obj, theta, X, Y, Bn, dx, r, mask, g_x, g_b)
            passes += 1
    theta, f, _, _, _ = _outer_step(cfg, obj, theta, opt, X, Y, Bn, X + dx, Bn + r * obj.nominal_b,
                                    batch_id, sums)
    return theta, passes + 1, fails + f


def _free_batch(cfg, obj, theta, opt, X, Y, Bn, mask, batch_id, sums):
    """Replay the batch ``steps`` times; each pass updates theta and the perturbation."""
    dx, r = obj.start(X, Bn, mask)
    n = X.shape[0]
    fails = 0
    for _ in range(cfg.budget.steps):
        theta_before = theta
        theta, f, d_x, d_b, names = _outer_step(cfg, obj, theta, opt, X, Y, Bn, X + dx,
                                                Bn + r * obj.nominal_b, batch_id, sums)
        fails += f
        # the input/susceptance gradients come from the adversarial block of the same pass
        j = names.index("adv") if "adv" in names else None
        if j is None:
            continue
        g_x = d_x[j * n:(j + 1) * n]
        g_b = d_b[j * n:(j + 1) * n]
        dx, r = _inner_step(cfg, obj, theta_before, X, Y, Bn, dx, r, mask, g_x, g_b)
    return theta, cfg.budget.steps, fails


# -- evaluation ----------------------------------------------------------------

@dataclass
class ResultTable:
    """Mean task cost per attack column, one row per model."""
    columns: list[str]
    rows: list[tuple[str, list[float]]] = field(default_factory=list)
    failed: dict = field(default_factory=dict)

    def add(self, name: str, values: Sequence[float], failed: int = 0) -> None:
        if len(values) != len(self.columns):
            raise ValueError("row length does not match the columns")
        self.rows.append((name, [float(v) for v in values]))
        self.failed[name] = failed

    def value(self, name: str, column: str) -> float:
        for row_name, vals in self.rows:
            if row_name == name:
                return vals[self.columns.index(column)]
        raise KeyError(name)

    def to_csv(self, path: Union[str, Path], header_comment: Optional[str] = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["model"] + self.columns)
            for name, vals in self.rows:
                w.writerow([name] + [f"{v:.6g}" for v in vals])

    def to_markdown(self) -> str:
        head = ["model"] + self.columns
        body = [[name] + [f"{v:.2f}" for v in vals] for name, vals in self.rows]
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]

        def line(cells):
            return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

        sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
        return "\n".join([line(head), sep] + [line(r) for r in body]) + "\n"


def column_names(input_eps=(), phi_eps=(), pairs=()) -> list[str]:
    cols = ["Clean"]
    cols += [f"Input({e:g})" for e in input_eps]
    cols += [f"CO({e:g})" for e in phi_eps]
    cols += [f"Integrated({a:g},{b:g})" for a, b in pairs]
    return cols


def evaluate(theta: MlpParams, dataset: Dataset, grid: GridSpec, input_eps: Sequence[float] = (),
             phi_eps: Sequence[float] = (), pairs: Sequence[tuple[float, float]] = (),
             steps: int = 7, restarts: int = 3, seed: int = 0, name: str = "model",
             table: Optional[ResultTable] = None) -> ResultTable:
    """Mean clean and worst-case (multistart PGD) task cost per attack column."""
    cols = column_names(input_eps, phi_eps, pairs)
    if table is None:
        table = ResultTable(cols)
    elif table.columns != cols:
        raise ValueError("table columns do not match the attack grid")
    X, Y, mask = dataset.features, dataset.loads, dataset.attack_mask
    pipe = get_pipeline(grid)
    clean = pipe.infer_batch(theta, X, Y)
    failed = int((~clean.ok).sum())
    values = [float(np.nanmean(clean.cost))]
    runs = ([(pgd_input, AttackBudget(e, 0.0, steps, restarts)) for e in input_eps]
            + [(pgd_phi, AttackBudget(0.0, e, steps, restarts)) for e in phi_eps]
            + [(pgd_joint, AttackBudget(a, b, steps, restarts)) for a, b in pairs])
    for attack, bud in runs:
        res = multistart_worst(attack, theta, X, Y, None, grid, bud, seed=seed, mask=mask)
        failed += int(np.isnan(res.cost).sum())
        values.append(float(np.nanmean(res.cost)))
    table.add(name, values, failed)
    return table


def random_phi_cost(theta: MlpParams, dataset: Dataset, grid: GridSpec, eps_phi: float,
                    seed: int = 0) -> float:
    """Mean task cost under uniformly sampled susceptance perturbations."""
    phi = UnpredictableParams.nominal(grid)
    delta = random_phi(phi, AttackBudget(0.0, eps_phi), seed=seed, n=dataset.n_samples)
    out = get_pipeline(grid).infer_batch(theta, dataset.features, dataset.loads, phi.b + delta)
    return float(np.nanmean(out.cost))

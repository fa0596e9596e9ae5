"""ReLU forecaster with hand-written reverse mode, Adam, and checkpoints."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

CHECKPOINT_VERSION = 1
CLIP_L1 = 2.0


class ForecasterError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    terminal_relu: bool = True

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.terminal_relu)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def digest(self) -> str:
        return hashlib.sha256(self.flat().tobytes()).hexdigest()


def init_mlp(layer_sizes: Sequence[int], seed: int = 0) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights, biases)


@dataclass
class Tape:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activations of each layer


def forward(mlp: MlpParams, x) -> tuple[np.ndarray, Tape]:
    """Forecast for one sample (1-D ``x``) or a batch (2-D, one row per sample)."""
    h = np.asarray(x, dtype=float)
    if h.shape[-1] != mlp.n_in:
        raise ForecasterError(f"input has {h.shape[-1]} features, network expects {mlp.n_in}")
    inputs, pre = [], []
    last = len(mlp.weights) - 1
    for i, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(h)
        a = h @ W.T + b
        pre.append(a)
        h = np.maximum(a, 0.0) if (i < last or mlp.terminal_relu) else a
    return h, Tape(inputs, pre)


def backward(mlp: MlpParams, tape: Tape, dL_dy) -> tuple[MlpParams, np.ndarray]:
    """Return (parameter gradients shaped like ``mlp``, input cotangent).

    For batched tapes the parameter gradients are summed over the batch.
    """
    g = np.asarray(dL_dy, dtype=float)
    last = len(mlp.weights) - 1
    dWs, dbs = [None] * len(mlp.weights), [None] * len(mlp.weights)
    for i in range(last, -1, -1):
        if i < last or mlp.terminal_relu:
            g = g * (tape.pre[i] > 0)
        h = tape.inputs[i]
        if g.ndim == 1:
            dWs[i] = np.outer(g, h)
            dbs[i] = g.copy()
        else:
            dWs[i] = g.T @ h
            dbs[i] = g.sum(axis=0)
        g = g @ mlp.weights[i]
    return MlpParams(dWs, dbs, mlp.terminal_relu), g


# -- optimizer -----------------------------------------------------------------

def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class OptimizerState:
    base_lr: float
    total_steps: int
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, mlp: MlpParams, base_lr: float, total_steps: int) -> "OptimizerState":
        shapes = [a for pair in zip(mlp.weights, mlp.biases) for a in pair]
        return cls(base_lr, total_steps, [np.zeros_like(a) for a in shapes],
                   [np.zeros_like(a) for a in shapes])

    @property
    def lr(self) -> float:
        return cosine_lr(self.base_lr, self.step, self.total_steps)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.base_lr, self.total_steps, [a.copy() for a in self.m],
                              [a.copy() for a in self.v], self.step, self.beta1, self.beta2, self.eps)


def grad_l1(grads: MlpParams) -> float:
    return float(sum(np.abs(a).sum() for a in grads.weights + grads.biases))


def clip_grads(grads: MlpParams, max_l1: float = CLIP_L1) -> tuple[MlpParams, float]:
    """Rescale so the total 1-norm is at most ``max_l1``; returns (clipped, pre-clip norm)."""
    norm = grad_l1(grads)
    if not math.isfinite(norm):
        raise NonFiniteGradient("non-finite gradient")
    if norm <= max_l1:
        return grads, norm
    scale = max_l1 / norm
    return MlpParams([W * scale for W in grads.weights], [b * scale for b in grads.biases],
                     grads.terminal_relu), norm


def clip_and_step(opt: OptimizerState, mlp: MlpParams, grads: MlpParams,
                  max_l1: Optional[float] = CLIP_L1) -> MlpParams:
    """One clipped Adam step at the scheduled learning rate. Mutates ``opt``."""
    if max_l1 is not None:
        grads, _ = clip_grads(grads, max_l1)
    elif not math.isfinite(grad_l1(grads)):
        raise NonFiniteGradient("non-finite gradient")
    lr = opt.lr
    opt.step += 1
    t = opt.step
    params = [a for pair in zip(mlp.weights, mlp.biases) for a in pair]
    gs = [a for pair in zip(grads.weights, grads.biases) for a in pair]
    new = []
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for i, (p, g) in enumerate(zip(params, gs)):
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g
        new.append(p - lr * (opt.m[i] / c1) / (np.sqrt(opt.v[i] / c2) + opt.eps))
    return MlpParams(new[0::2], new[1::2], mlp.terminal_relu)


# -- checkpoints ---------------------------------------------------------------
#
# A checkpoint is an .npz archive with keys:
#   version         int scalar (CHECKPOINT_VERSION)
#   layer_sizes     int vector [n_in, h1, ..., n_out]
#   terminal_relu   bool scalar
#   W{i}, b{i}      row-major float64 weight (out x in) and bias arrays
# and, when an optimizer state is stored:
#   opt_meta        float vector [base_lr, total_steps, step, beta1, beta2, eps]
#   m{j}, v{j}      Adam moments, j running over (W0, b0, W1, b1, ...)

def save_checkpoint(path: Union[str, Path], mlp: MlpParams, opt: Optional[OptimizerState] = None,
                    extra: Optional[dict] = None) -> None:
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "layer_sizes": np.array(mlp.layer_sizes, dtype=np.int64),
        "terminal_relu": np.array(mlp.terminal_relu),
    }
    for i, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        arrays[f"W{i}"] = W
        arrays[f"b{i}"] = b
    if opt is not None:
        arrays["opt_meta"] = np.array([opt.base_lr, opt.total_steps, opt.step,
                                       opt.beta1, opt.beta2, opt.eps])
        for j, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"m{j}"] = m
            arrays[f"v{j}"] = v
    for key, val in (extra or {}).items():
        arrays[f"extra_{key}"] = np.asarray(val)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: Union[str, Path]) -> tuple[MlpParams, Optional[OptimizerState]]:
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ForecasterError(f"unsupported checkpoint version {version}")
        sizes = [int(s) for s in data["layer_sizes"]]
        n_layers = len(sizes) - 1
        weights = [data[f"W{i}"].astype(float) for i in range(n_layers)]
        biases = [data[f"b{i}"].astype(float) for i in range(n_layers)]
        mlp = MlpParams(weights, biases, bool(data["terminal_relu"]))
        if mlp.layer_sizes != sizes:
            raise ForecasterError("checkpoint arrays do not match layer_sizes")
        opt = None
        if "opt_meta" in data:
            base_lr, total, step, b1, b2, eps = data["opt_meta"]
            n = 2 * n_layers
            opt = OptimizerState(float(base_lr), int(total),
                                 [data[f"m{j}"].astype(float) for j in range(n)],
                                 [data[f"v{j}"].astype(float) for j in range(n)],
                                 int(step), float(b1), float(b2), float(eps))
    return mlp, opt

"""Interval bound propagation through the ReLU forecaster."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..forecaster import MlpParams

ROUND_PAD = 1e-13  # relative outward padding of every bound


@dataclass
class LayerBounds:
    """Pre-activation bounds ``lower[k] <= W_k h_k + b_k <= upper[k]`` per layer.

    ``input_lo``/``input_hi`` is the input box the bounds were computed for.
    """
    lower: list[np.ndarray]
    upper: list[np.ndarray]
    input_lo: np.ndarray
    input_hi: np.ndarray

    def __post_init__(self):
        for k, (l, u) in enumerate(zip(self.lower, self.upper)):
            if np.any(l > u + 1e-12):
                raise ValueError(f"layer {k}: lower bound exceeds upper bound")

    def unstable(self) -> list[np.ndarray]:
        """Per layer, a mask of units whose sign is not fixed over the box."""
        return [(l < 0) & (u > 0) for l, u in zip(self.lower, self.upper)]


def input_box(x, eps: float, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """``[x - eps, x + eps]`` on attackable coordinates, clamped to [0, 1]; a point elsewhere."""
    x = np.asarray(x, dtype=float)
    mask = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    lo = np.where(mask, np.clip(x - eps, 0.0, 1.0), x)
    hi = np.where(mask, np.clip(x + eps, 0.0, 1.0), x)
    return lo, hi


def ibp_bounds(mlp: MlpParams, x, eps: float, mask=None,
               box: Optional[tuple[np.ndarray, np.ndarray]] = None) -> LayerBounds:
    """Propagate the input box layer by layer with positive/negative weight splits."""
    lo, hi = box if box is not None else input_box(x, eps, mask)
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    lower, upper = [], []
    h_lo, h_hi = lo, hi
    for W, b in zip(mlp.weights, mlp.biases):
        Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
        l = Wp @ h_lo + Wn @ h_hi + b
        u = Wp @ h_hi + Wn @ h_lo + b
        # round outward so a different summation order in the forward pass cannot escape
        pad = ROUND_PAD * ((np.abs(W) @ np.maximum(np.abs(h_lo), np.abs(h_hi))) + np.abs(b))
        l, u = l - pad, u + pad
        lower.append(l)
        upper.append(u)
        h_lo, h_hi = np.maximum(l, 0.0), np.maximum(u, 0.0)
    return LayerBounds(lower, upper, lo, hi)


def output_bounds(mlp: MlpParams, bounds: LayerBounds) -> tuple[np.ndarray, np.ndarray]:
    l, u = bounds.lower[-1], bounds.upper[-1]
    if mlp.terminal_relu:
        return np.maximum(l, 0.0), np.maximum(u, 0.0)
    return l, u

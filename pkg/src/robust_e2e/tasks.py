"""Dispatch / redispatch problems as affine-parametric QPs, and the task cost.

Stage one (dispatch) decides ``z = (P_g, theta, s)`` from the forecast load
``y_hat``; stage two (redispatch) decides ``z = (P_ls, P_gs, theta)`` from the
realized load and the stage-one generation, with line susceptances ``b``.
Both objectives are linear; ``gamma`` adds ``gamma/2 |z|^2`` so the solutions
are unique and the KKT Jacobian is invertible.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .grid import GridSpec, incidence
from .qp import AffineQp

GAMMA_REG = 1e-4


@dataclass
class DispatchDecision:
    p_g: np.ndarray
    theta: np.ndarray
    slack: np.ndarray


@dataclass
class RedispatchDecision:
    p_ls: np.ndarray
    p_gs: np.ndarray
    theta: np.ndarray


def _flow_rows(grid: GridSpec, b: np.ndarray) -> np.ndarray:
    A, _, _ = incidence(grid)
    return b[:, None] * A


def _laplacian(grid: GridSpec, b: np.ndarray) -> np.ndarray:
    A, _, _ = incidence(grid)
    return A.T @ (b[:, None] * A)


def build_dispatch(grid: GridSpec, gamma: float = GAMMA_REG, b: Optional[np.ndarray] = None) -> AffineQp:
    """Stage-one generator dispatch; the parameter slot is the forecast load."""
    b = grid.susceptance if b is None else np.asarray(b, dtype=float)
    ng, nb, nl, nd = grid.n_gen, grid.n_bus, grid.n_line, grid.n_load
    n = ng + nb + nd
    _, Cg, Cl = incidence(grid)
    F = _flow_rows(grid, b)
    fmax = grid.flow_limit

    A_in = np.zeros((2 * ng + 2 * nl + nd, n))
    b_in = np.zeros(A_in.shape[0])
    r = 0
    A_in[r:r + ng, :ng] = np.eye(ng)
    b_in[r:r + ng] = grid.p_max
    r += ng
    A_in[r:r + ng, :ng] = -np.eye(ng)
    b_in[r:r + ng] = -grid.p_min
    r += ng
    A_in[r:r + nl, ng:ng + nb] = F
    b_in[r:r + nl] = fmax
    r += nl
    A_in[r:r + nl, ng:ng + nb] = -F
    b_in[r:r + nl] = fmax
    r += nl
    A_in[r:r + nd, ng + nb:] = -np.eye(nd)

    # balance: L theta - Cg P_g - Cl s + Cl y_hat = 0 ; theta_ref = 0
    C_eq = np.zeros((nb + 1, n))
    C_eq[:nb, :ng] = -Cg
    C_eq[:nb, ng:ng + nb] = _laplacian(grid, b)
    C_eq[:nb, ng + nb:] = -Cl
    C_eq[nb, ng + grid.ref_bus] = 1.0
    H_eq = np.zeros((nb + 1, nd))
    H_eq[:nb] = Cl

    q = np.concatenate([grid.gen_cost, np.zeros(nb), np.full(nd, grid.c_slack)])
    return AffineQp(gamma * np.eye(n), q, A_in, np.zeros((A_in.shape[0], nd)), b_in,
                    C_eq, H_eq, np.zeros(nb + 1))


def build_redispatch(grid: GridSpec, b: Optional[np.ndarray] = None, gamma: float = GAMMA_REG) -> AffineQp:
    """Stage-two redispatch; the parameter slot is ``(y, P_g)``.

    The susceptances live in the constraint matrices, so the returned QP is
    marked as depending on ``"susceptance"`` outside its affine slot.
    """
    b = grid.susceptance if b is None else np.asarray(b, dtype=float)
    if np.any(b <= 0):
        raise ValueError("susceptances must be positive")
    ng, nb, nl, nd = grid.n_gen, grid.n_bus, grid.n_line, grid.n_load
    n = nd + ng + nb
    _, Cg, Cl = incidence(grid)
    F = _flow_rows(grid, b)
    th = slice(nd + ng, n)

    A_in = np.zeros((2 * nl + nd + ng, n))
    b_in = np.zeros(A_in.shape[0])
    A_in[:nl, th] = F
    A_in[nl:2 * nl, th] = -F
    b_in[:2 * nl] = np.tile(grid.flow_limit, 2)
    A_in[2 * nl:2 * nl + nd, :nd] = -np.eye(nd)
    A_in[2 * nl + nd:, nd:nd + ng] = -np.eye(ng)

    # balance: L theta - Cl P_ls + Cg P_gs + Cl y - Cg P_g = 0 ; theta_ref = 0
    C_eq = np.zeros((nb + 1, n))
    C_eq[:nb, :nd] = -Cl
    C_eq[:nb, nd:nd + ng] = Cg
    C_eq[:nb, th] = _laplacian(grid, b)
    C_eq[nb, nd + ng + grid.ref_bus] = 1.0
    H_eq = np.zeros((nb + 1, nd + ng))
    H_eq[:nb, :nd] = Cl
    H_eq[:nb, nd:] = -Cg

    q = np.concatenate([np.full(nd, grid.c_ls), np.full(ng, grid.c_gs), np.zeros(nb)])
    return AffineQp(gamma * np.eye(n), q, A_in, np.zeros((A_in.shape[0], nd + ng)), b_in,
                    C_eq, H_eq, np.zeros(nb + 1), matrix_params=frozenset({"susceptance"}))


def split_dispatch(grid: GridSpec, z) -> DispatchDecision:
    ng, nb = grid.n_gen, grid.n_bus
    return DispatchDecision(z[:ng].copy(), z[ng:ng + nb].copy(), z[ng + nb:].copy())


def split_redispatch(grid: GridSpec, z) -> RedispatchDecision:
    nd, ng = grid.n_load, grid.n_gen
    return RedispatchDecision(z[:nd].copy(), z[nd:nd + ng].copy(), z[nd + ng:].copy())


def redispatch_param(y, p_g) -> np.ndarray:
    return np.concatenate([np.asarray(y, dtype=float).ravel(), np.asarray(p_g, dtype=float).ravel()])


def task_cost(p_g, p_ls, p_gs, grid: GridSpec) -> float:
    """Generation cost plus shedding and storage penalties."""
    return float(grid.gen_cost @ np.asarray(p_g, dtype=float)
                 + grid.c_ls * np.sum(p_ls) + grid.c_gs * np.sum(p_gs))


def redispatch_cost_gradient(grid: GridSpec) -> np.ndarray:
    """d(task cost)/d(redispatch decision)."""
    return np.concatenate([np.full(grid.n_load, grid.c_ls), np.full(grid.n_gen, grid.c_gs),
                           np.zeros(grid.n_bus)])


def redispatch_matrices(grid: GridSpec, b_rows) -> tuple[np.ndarray, np.ndarray]:
    """Redispatch ``A_in`` and ``C_eq`` stacked for each row of susceptances."""
    b_rows = np.atleast_2d(np.asarray(b_rows, dtype=float))
    if np.any(b_rows <= 0):
        raise ValueError("susceptances must be positive")
    base = _redispatch_template(grid)
    Inc, _, _ = incidence(grid)
    nl, nb = grid.n_line, grid.n_bus
    th = slice(grid.n_load + grid.n_gen, grid.n_load + grid.n_gen + nb)
    B = b_rows.shape[0]
    A = np.repeat(base.A_in[None], B, axis=0)
    C = np.repeat(base.C_eq[None], B, axis=0)
    F = b_rows[:, :, None] * Inc
    A[:, :nl, th] = F
    A[:, nl:2 * nl, th] = -F
    C[:, :nb, th] = np.swapaxes(F, 1, 2) @ Inc
    return A, C


@lru_cache(maxsize=32)
def _redispatch_template(grid: GridSpec) -> AffineQp:
    return build_redispatch(grid, grid.susceptance, 0.0)


def susceptance_grad(grid: GridSpec, grads) -> np.ndarray:
    """Contract redispatch matrix gradients against the susceptance placement.

    ``grads`` carries ``d_A``/``d_C`` for one problem or stacked along a
    leading batch axis.
    """
    A, _, _ = incidence(grid)
    nl, nb = grid.n_line, grid.n_bus
    th = slice(grid.n_load + grid.n_gen, grid.n_load + grid.n_gen + nb)
    dA_flow = grads.d_A[..., :nl, th] - grads.d_A[..., nl:2 * nl, th]
    dL = grads.d_C[..., :nb, th]
    return np.einsum("...lj,lj->...l", dA_flow, A) + np.einsum("li,...ij,lj->...l", A, dL, A)

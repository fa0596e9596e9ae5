"""Reverse-mode differentiation of a solved QP through its KKT equalities.

With ``w = (z, lam, nu)`` and the KKT map::

    g1 = Q z + q + A' lam + C' nu
    g2 = diag(lam) (A z + G p - b)
    g3 = C z + H p - d

the implicit function theorem gives ``dw/dtheta = -K^{-1} dg/dtheta`` with
``K = dg/dw``. One transposed solve ``v = -K^{-T} [dL/dz; 0; 0]`` then turns
every data gradient into an outer product.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .qp import AffineQp, QpSolution

MARGIN_MIN = 1e-9
JAC_REG = 1e-10


class SingularJacobian(RuntimeError):
    """The KKT Jacobian could not be inverted, even after regularization."""


@dataclass
class QpGradients:
    d_param: np.ndarray
    d_q: np.ndarray
    d_b: np.ndarray
    d_d: np.ndarray
    d_Q: np.ndarray
    d_A: np.ndarray
    d_C: np.ndarray
    d_G: np.ndarray
    d_H: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def kkt_matrix(qp: AffineQp, param, sol: QpSolution) -> np.ndarray:
    bp, _ = qp.rhs(param)
    n, m, p = qp.n, qp.m, qp.p
    lam = sol.lambda_star
    viol = qp.A_in @ sol.z_star - bp
    K = np.zeros((n + m + p, n + m + p))
    K[:n, :n] = qp.Q
    K[:n, n:n + m] = qp.A_in.T
    K[:n, n + m:] = qp.C_eq.T
    K[n:n + m, :n] = lam[:, None] * qp.A_in
    K[n:n + m, n:n + m] = np.diag(viol)
    K[n + m:, :n] = qp.C_eq
    return K


def complementarity_margin(qp: AffineQp, param, sol: QpSolution) -> float:
    """min_j max(lam_j, slack_j); small values mean a weakly active constraint."""
    if qp.m == 0:
        return np.inf
    bp, _ = qp.rhs(param)
    slack = bp - qp.A_in @ sol.z_star
    return float(np.min(np.maximum(sol.lambda_star, slack)))


def adjoint(qp: AffineQp, param, sol: QpSolution, dL_dz) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Solve the transposed KKT system; returns (v_z, v_lam, v_nu, diagnostics)."""
    n, m = qp.n, qp.m
    K = kkt_matrix(qp, param, sol)
    rhs = np.zeros(K.shape[0])
    rhs[:n] = -np.asarray(dL_dz, dtype=float)
    margin = complementarity_margin(qp, param, sol)
    diag = {"margin": margin, "degenerate": bool(margin < MARGIN_MIN), "regularized": False}
    if diag["degenerate"]:
        K = K + JAC_REG * np.eye(K.shape[0])
        diag["regularized"] = True
    try:
        v = np.linalg.solve(K.T, rhs)
    except np.linalg.LinAlgError:
        v = None
    if v is None or not np.all(np.isfinite(v)):
        if diag["regularized"]:
            raise SingularJacobian("KKT Jacobian is singular after regularization")
        try:
            v = np.linalg.solve(K.T + JAC_REG * np.eye(K.shape[0]), rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from exc
        diag["regularized"] = True
        if not np.all(np.isfinite(v)):
            raise SingularJacobian("non-finite adjoint")
    return v[:n], v[n:n + m], v[n + m:], diag


def backward(qp: AffineQp, param, sol: QpSolution, dL_dz) -> QpGradients:
    """Gradients of a scalar loss L(z*) with respect to every QP datum."""
    if not sol.optimal:
        raise ValueError(f"backward needs an optimal solution, got {sol.status}")
    param = np.asarray(param, dtype=float).ravel()
    z, lam, nu = sol.z_star, sol.lambda_star, sol.nu_star
    v_z, v_lam, v_nu, diag = adjoint(qp, param, sol, dL_dz)
    w = lam * v_lam
    dQ = np.outer(v_z, z)
    grads = QpGradients(
        d_param=qp.G_in.T @ w + qp.H_eq.T @ v_nu,
        d_q=v_z,
        d_b=-w,
        d_d=-v_nu,
        d_Q=0.5 * (dQ + dQ.T),
        d_A=np.outer(lam, v_z) + np.outer(w, z),
        d_C=np.outer(nu, v_z) + np.outer(v_nu, z),
        d_G=np.outer(w, param),
        d_H=np.outer(v_nu, param),
        diagnostics=diag,
    )
    return grads


def degeneracy(qp: AffineQp, param, sol: QpSolution, act_tol: float = 1e-6) -> dict:
    """Check strict complementarity and linear independence of active constraints.

    When either fails the solution map has a kink: one-sided derivatives differ
    and the adjoint returns only one element of the generalized Jacobian.
    """
    bp, _ = qp.rhs(param)
    slack = bp - qp.A_in @ sol.z_star
    scale = 1.0 + np.abs(bp)
    active = slack <= act_tol * scale
    weak = active & (sol.lambda_star <= act_tol)
    rows = np.vstack([qp.A_in[active], qp.C_eq])
    rank = np.linalg.matrix_rank(rows, tol=1e-9 * max(1.0, np.abs(rows).max(initial=0.0))) if rows.size else 0
    licq = rank == rows.shape[0]
    return {
        "n_active": int(active.sum()),
        "weakly_active": int(weak.sum()),
        "licq": bool(licq),
        "degenerate": bool(weak.any() or not licq),
    }

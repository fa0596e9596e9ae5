"""Vectorized interior point and adjoint over a batch of same-shape QPs.

Training and attacks solve thousands of tiny QPs that share their sparsity
and often their matrices. Stacking them turns per-iteration Python overhead
into one batched ``numpy.linalg.solve``. Problems that do not converge here
are handed to the scalar :func:`qp.solve`, so statuses match it exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .diffqp import JAC_REG, MARGIN_MIN
from .qp import COMP_POLISH, MAX_ITER, MAX_POLISH, STALL_ITERS, TOL_KKT, AffineQp, QpSolution, Status, solve


@dataclass
class QpStack:
    """Batch data; every array carries a leading batch axis of size B."""
    Q: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray  # b - G p, already evaluated at each parameter
    C: np.ndarray
    d: np.ndarray  # d - H p
    G: np.ndarray
    H: np.ndarray

    @property
    def size(self) -> int:
        return self.q.shape[0]

    @classmethod
    def build(cls, qps, params, A=None, C=None) -> "QpStack":
        """Stack ``qps`` (one shared QP or one per row); ``A``/``C`` override per row."""
        params = np.atleast_2d(np.asarray(params, dtype=float))
        B = params.shape[0]
        qps = _as_list(qps, B)
        first = qps[0]
        if all(qp is first for qp in qps):
            def stack(name):
                a = getattr(first, name)
                return np.broadcast_to(a, (B,) + a.shape)
        else:
            def stack(name):
                return np.stack([getattr(qp, name) for qp in qps])
        G, H = stack("G_in"), stack("H_eq")
        b = stack("b_in") - _mv(G, params)
        d = stack("d_eq") - _mv(H, params)
        A = stack("A_in") if A is None else np.asarray(A, dtype=float)
        C = stack("C_eq") if C is None else np.asarray(C, dtype=float)
        if A.shape != (B,) + first.A_in.shape or C.shape != (B,) + first.C_eq.shape:
            raise ValueError("matrix overrides must be stacked per row")
        return cls(stack("Q"), stack("q"), A, b, C, d, G, H)


def _as_list(qps, B) -> list[AffineQp]:
    if isinstance(qps, AffineQp):
        return [qps] * B
    qps = list(qps)
    if len(qps) == 1:
        return qps * B
    if len(qps) != B:
        raise ValueError(f"{len(qps)} QPs for {B} parameter rows")
    return qps


def _row_qp(qps, A, C, i) -> AffineQp:
    qp = qps[i]
    if A is None and C is None:
        return qp
    return replace(qp, A_in=qp.A_in if A is None else A[i], C_eq=qp.C_eq if C is None else C[i])


def _mv(M, v):
    return (M @ v[..., None])[..., 0]


def _mtv(M, v):
    return (np.swapaxes(M, -1, -2) @ v[..., None])[..., 0]


def _max_step(v, dv):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    return np.minimum(1.0, ratio.min(axis=1, initial=np.inf))


def _solve_stack(K, rhs):
    try:
        return np.linalg.solve(K, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(rhs)
        eye = np.eye(K.shape[-1])
        for i in range(K.shape[0]):
            try:
                out[i] = np.linalg.solve(K[i], rhs[i])
            except np.linalg.LinAlgError:
                scale = max(1.0, float(np.abs(K[i]).max()))
                out[i] = np.linalg.lstsq(K[i] + 1e-12 * scale * eye, rhs[i], rcond=None)[0]
        return out


def _newton_stack(Q, A, C):
    B, n = Q.shape[0], Q.shape[1]
    m, p = A.shape[1], C.shape[1]
    K = np.zeros((B, n + m + p, n + m + p))
    K[:, :n, :n] = Q
    K[:, :n, n:n + m] = np.swapaxes(A, 1, 2)
    K[:, :n, n + m:] = np.swapaxes(C, 1, 2)
    K[:, n:n + m, :n] = A
    K[:, n + m:, :n] = C
    return K


def _direction(K, n, m, s, lam, r_d, r_p, r_e, r_c):
    sol = _solve_stack(K, np.concatenate([-r_d, -r_p + r_c / lam, -r_e], axis=1))
    dz, dlam, dnu = sol[:, :n], sol[:, n:n + m], sol[:, n + m:]
    ds = (-r_c - s * dlam) / lam
    return dz, ds, dlam, dnu


def solve_batch(qps, params, A=None, C=None, tol: float = TOL_KKT,
                max_iter: int = MAX_ITER) -> list[QpSolution]:
    """Solve ``qps[i]`` at ``params[i]``; a single QP is shared across all rows.

    ``A`` and ``C`` (shape ``(B, m, n)`` / ``(B, p, n)``) replace the
    inequality / equality matrices row by row.

    The iteration mirrors :func:`qp.solve` (same start, Mehrotra steps and
    complementarity polish) run in lockstep; converged rows are frozen.
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    S = QpStack.build(qps, params, A, C)
    qps = _as_list(qps, params.shape[0])
    A_rows, C_rows = A, C
    B, n = S.q.shape
    m, p = S.b.shape[1], S.d.shape[1]
    if m == 0:
        return [solve(_row_qp(qps, A_rows, C_rows, i), params[i], tol, max_iter) for i in range(B)]
    Q, q, A, C, bp, dp = S.Q, S.q, S.A, S.C, S.b, S.d
    N = n + p
    H0 = Q + np.swapaxes(A, 1, 2) @ A + 1e-8 * np.eye(n)
    K0 = np.zeros((B, N, N))
    K0[:, :n, :n] = H0
    K0[:, :n, n:] = np.swapaxes(C, 1, 2)
    K0[:, n:, :n] = C
    w0 = _solve_stack(K0, np.concatenate([-q + _mtv(A, bp), dp], axis=1))
    z, nu = w0[:, :n].copy(), w0[:, n:].copy()
    s = np.maximum(bp - _mv(A, z), 1.0)
    lam = np.ones((B, m))
    K = _newton_stack(Q, A, C)
    diag = n + np.arange(m)
    K[:, diag, diag] = -s / lam
    r_c = s * lam
    dz, ds, dlam, dnu = _direction(K, n, m, s, lam, _mv(Q, z) + q + _mtv(A, lam) + _mtv(C, nu),
                                   _mv(A, z) + s - bp, _mv(C, z) - dp, r_c)
    fine = (np.isfinite(dz).all(axis=1) & np.isfinite(dlam).all(axis=1))[:, None]
    z = np.where(fine, z + dz, z)
    nu = np.where(fine, nu + dnu, nu)
    s = np.where(fine, np.maximum(1.0, np.abs(s + ds)), s)
    lam = np.where(fine, np.maximum(1.0, np.abs(lam + dlam)), lam)

    def residual(z, lam, nu):
        stat = _mv(Q, z) + q + _mtv(A, lam) + _mtv(C, nu)
        viol = _mv(A, z) - bp
        res = np.maximum.reduce([
            np.abs(stat).max(axis=1),
            viol.max(axis=1, initial=0.0),
            np.abs(_mv(C, z) - dp).max(axis=1, initial=0.0),
            (-lam).max(axis=1, initial=0.0),
            np.abs(lam * viol).max(axis=1),
        ])
        return res, np.abs(lam * viol).max(axis=1)

    best_res = np.full(B, np.inf)
    best = [z.copy(), lam.copy(), nu.copy()]
    iters = np.zeros(B, dtype=int)
    polish = np.zeros(B, dtype=int)
    last_gain = np.zeros(B, dtype=int)
    active = np.ones(B, dtype=bool)
    for it in range(1, max_iter + 1):
        res, comp = residual(z, lam, nu)
        improved = active & (res <= best_res)
        last_gain[improved & (res < 0.5 * best_res)] = it
        best_res[improved] = res[improved]
        for arr, cur in zip(best, (z, lam, nu)):
            arr[improved] = cur[improved]
        iters[active] = it
        done = active & (res <= tol)
        # mirror the scalar polish: a few more steps until complementarity separates
        finished = done & ((comp <= COMP_POLISH * tol) | (polish >= MAX_POLISH))
        polish[done & ~finished] += 1
        active &= ~finished & (it - last_gain <= STALL_ITERS)
        if not active.any():
            break
        ix = np.flatnonzero(active)
        Qa, qa, Aa, Ca, ba, da = Q[ix], q[ix], A[ix], C[ix], bp[ix], dp[ix]
        za, sa, la, na = z[ix], s[ix], lam[ix], nu[ix]
        r_d = _mv(Qa, za) + qa + _mtv(Aa, la) + _mtv(Ca, na)
        r_p = _mv(Aa, za) + sa - ba
        r_e = _mv(Ca, za) - da
        mu = (sa * la).sum(axis=1) / m
        Ka = K[ix]
        Ka[:, diag, diag] = -sa / la

        def direction(r_c):
            return _direction(Ka, n, m, sa, la, r_d, r_p, r_e, r_c)

        dz_a, ds_a, dl_a, _ = direction(sa * la)
        a_aff = np.minimum(_max_step(sa, ds_a), _max_step(la, dl_a))[:, None]
        mu_aff = ((sa + a_aff * ds_a) * (la + a_aff * dl_a)).sum(axis=1) / m
        with np.errstate(divide="ignore", invalid="ignore"):
            sigma = np.where(mu > 0, (mu_aff / mu) ** 3, 0.0)[:, None]
        dz, ds, dlam, dnu = direction(sa * la + ds_a * dl_a - sigma * mu[:, None])
        alpha = np.minimum(1.0, 0.995 * np.minimum(_max_step(sa, ds), _max_step(la, dlam)))[:, None]
        z[ix] = za + alpha * dz
        s[ix] = np.maximum(sa + alpha * ds, 1e-300)
        lam[ix] = np.maximum(la + alpha * dlam, 1e-300)
        nu[ix] = na + alpha * dnu
        bad = active & ~(np.isfinite(z).all(axis=1) & np.isfinite(lam).all(axis=1))
        if bad.any():
            active &= ~bad
            z[bad], lam[bad], nu[bad] = best[0][bad], best[1][bad], best[2][bad]
            s[bad] = 1.0
    else:
        res, _ = residual(z, lam, nu)
        improved = active & (res < best_res)
        best_res[improved] = res[improved]
        for arr, cur in zip(best, (z, lam, nu)):
            arr[improved] = cur[improved]

    out = []
    for i in range(B):
        if best_res[i] <= tol:
            out.append(QpSolution(best[0][i].copy(), best[1][i].copy(), best[2][i].copy(),
                                  Status.OPTIMAL, int(iters[i]), float(best_res[i])))
        else:
            out.append(solve(_row_qp(qps, A_rows, C_rows, i), params[i], tol, max_iter))
    return out


@dataclass
class BatchGradients:
    """Per-row gradients; the matrix blocks are only formed when requested."""
    d_param: np.ndarray
    d_A: Optional[np.ndarray]
    d_C: Optional[np.ndarray]
    regularized: np.ndarray  # rows where the KKT Jacobian needed regularization


def backward_batch(qps, params, sols: Sequence[QpSolution], dL_dz, A=None, C=None,
                   with_matrices: bool = False) -> BatchGradients:
    """Batched counterpart of :func:`diffqp.backward` (parameter and matrix blocks)."""
    params = np.atleast_2d(np.asarray(params, dtype=float))
    S = QpStack.build(qps, params, A, C)
    B, n = S.q.shape
    m, p = S.b.shape[1], S.d.shape[1]
    z = np.stack([s.z_star for s in sols])
    lam = np.stack([s.lambda_star for s in sols]) if m else np.zeros((B, 0))
    nu = np.stack([s.nu_star for s in sols]) if p else np.zeros((B, 0))
    viol = _mv(S.A, z) - S.b
    N = n + m + p
    K = np.zeros((B, N, N))
    K[:, :n, :n] = S.Q
    K[:, :n, n:n + m] = np.swapaxes(S.A, 1, 2)
    K[:, :n, n + m:] = np.swapaxes(S.C, 1, 2)
    K[:, n:n + m, :n] = lam[:, :, None] * S.A
    idx = np.arange(m)
    K[:, n + idx, n + idx] = viol
    K[:, n + m:, :n] = S.C
    margin = np.maximum(lam, -viol).min(axis=1, initial=np.inf)
    reg = margin < MARGIN_MIN
    if reg.any():
        K[reg] += JAC_REG * np.eye(N)
    rhs = np.zeros((B, N))
    rhs[:, :n] = -np.asarray(dL_dz, dtype=float)
    Kt = np.swapaxes(K, 1, 2)
    try:
        v = np.linalg.solve(Kt, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        v = np.empty_like(rhs)
        for i in range(B):
            try:
                v[i] = np.linalg.solve(Kt[i], rhs[i])
            except np.linalg.LinAlgError:
                v[i] = np.linalg.solve(Kt[i] + JAC_REG * np.eye(N), rhs[i])
                reg[i] = True
    v_z, v_lam, v_nu = v[:, :n], v[:, n:n + m], v[:, n + m:]
    w = lam * v_lam
    d_param = _mtv(S.G, w) + _mtv(S.H, v_nu)
    d_A = d_C = None
    if with_matrices:
        d_A = lam[:, :, None] * v_z[:, None, :] + w[:, :, None] * z[:, None, :]
        d_C = nu[:, :, None] * v_z[:, None, :] + v_nu[:, :, None] * z[:, None, :]
    return BatchGradients(d_param, d_A, d_C, reg)

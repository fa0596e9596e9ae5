"""Affine-parametric QPs and a dense primal-dual interior-point solver.

The problem family is::

    minimize    1/2 z'Qz + q'z
    subject to  A z + G p <= b
                C z + H p  = d

where ``p`` is the parameter slot (a forecast, or an upstream decision).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Union

import numpy as np
import scipy.linalg as sla

TOL_KKT = 1e-8
MAX_ITER = 100
PHASE1_TOL = 1e-6
COMP_POLISH = 1e-4
MAX_POLISH = 6
STALL_ITERS = 25  # iterations without halving the best residual


class QpError(ValueError):
    pass


class Status(str, Enum):
    OPTIMAL = "Optimal"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"


def _as2d(a, rows, cols):
    a = np.zeros(0) if a is None else np.asarray(a, dtype=float)
    if a.size == 0:
        return np.zeros((rows, cols))
    return a.reshape(rows, cols)


@dataclass(frozen=True, eq=False)
class AffineQp:
    Q: np.ndarray
    q: np.ndarray
    A_in: np.ndarray
    G_in: np.ndarray
    b_in: np.ndarray
    C_eq: np.ndarray
    H_eq: np.ndarray
    d_eq: np.ndarray
    # names of quantities baked into the constraint matrices (not affine in the slot)
    matrix_params: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        empty = lambda a: np.zeros(0) if a is None else np.asarray(a, dtype=float)  # noqa: E731
        q = empty(self.q).ravel()
        n = q.size
        b = empty(self.b_in).ravel()
        d = empty(self.d_eq).ravel()
        m, p = b.size, d.size
        G = empty(self.G_in)
        H = empty(self.H_eq)
        if G.ndim == 2:
            k = G.shape[1]
        elif H.ndim == 2:
            k = H.shape[1]
        else:
            k = 0
        try:
            Q = _as2d(self.Q, n, n)
            A = _as2d(self.A_in, m, n)
            C = _as2d(self.C_eq, p, n)
            G = _as2d(G, m, k)
            H = _as2d(H, p, k)
        except ValueError as exc:
            raise QpError(f"inconsistent QP dimensions: {exc}") from exc
        if not np.allclose(Q, Q.T, atol=1e-12, rtol=1e-10):
            raise QpError("Q must be symmetric")
        for name, val in (("Q", Q), ("q", q), ("A", A), ("b", b), ("C", C), ("d", d), ("G", G), ("H", H)):
            if not np.all(np.isfinite(val)):
                raise QpError(f"non-finite entries in {name}")
        if p and np.linalg.matrix_rank(C) < p:
            raise QpError("equality matrix C does not have full row rank")
        set_ = object.__setattr__
        set_(self, "Q", Q)
        set_(self, "q", q)
        set_(self, "A_in", A)
        set_(self, "G_in", G)
        set_(self, "b_in", b)
        set_(self, "C_eq", C)
        set_(self, "H_eq", H)
        set_(self, "d_eq", d)
        set_(self, "matrix_params", frozenset(self.matrix_params))

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.b_in.size

    @property
    def p(self) -> int:
        return self.d_eq.size

    @property
    def k(self) -> int:
        return self.G_in.shape[1]

    def rhs(self, param) -> tuple[np.ndarray, np.ndarray]:
        """Right-hand sides ``b - G p`` and ``d - H p`` for a parameter value."""
        param = np.asarray(param, dtype=float).ravel()
        if param.size != self.k:
            raise QpError(f"parameter has size {param.size}, expected {self.k}")
        return self.b_in - self.G_in @ param, self.d_eq - self.H_eq @ param

    def objective(self, z) -> float:
        return float(0.5 * z @ self.Q @ z + self.q @ z)

    def is_psd(self, tol: float = 1e-10) -> bool:
        return bool(np.linalg.eigvalsh(self.Q).min() >= -tol) if self.n else True


@dataclass
class QpSolution:
    z_star: np.ndarray
    lambda_star: np.ndarray
    nu_star: np.ndarray
    status: Status
    iterations: int
    kkt_residual: float

    @property
    def optimal(self) -> bool:
        return self.status == Status.OPTIMAL


def kkt_residual(qp: AffineQp, param, sol: QpSolution) -> tuple[float, float, float, float]:
    """Max-norm residuals (stationarity, primal, dual, complementarity)."""
    bp, dp = qp.rhs(param)
    z, lam, nu = sol.z_star, sol.lambda_star, sol.nu_star
    stat = qp.Q @ z + qp.q + qp.A_in.T @ lam + qp.C_eq.T @ nu
    viol = qp.A_in @ z - bp
    r_stat = float(np.max(np.abs(stat), initial=0.0))
    r_pri = float(max(np.max(viol, initial=0.0), np.max(np.abs(qp.C_eq @ z - dp), initial=0.0), 0.0))
    r_dual = float(max(np.max(-lam, initial=0.0), 0.0))
    r_comp = float(np.max(np.abs(lam * viol), initial=0.0))
    return r_stat, r_pri, r_dual, r_comp


def _kkt_max(qp, z, lam, nu, bp, dp):
    stat = qp.Q @ z + qp.q + qp.A_in.T @ lam + qp.C_eq.T @ nu
    viol = qp.A_in @ z - bp
    return max(
        np.max(np.abs(stat), initial=0.0),
        np.max(viol, initial=0.0),
        np.max(np.abs(qp.C_eq @ z - dp), initial=0.0),
        np.max(-lam, initial=0.0),
        np.max(np.abs(lam * viol), initial=0.0),
    )


def _factor(K):
    with warnings.catch_warnings():
        warnings.simplefilter("error", sla.LinAlgWarning)
        try:
            lu = sla.lu_factor(K, check_finite=False)
        except (sla.LinAlgWarning, np.linalg.LinAlgError, ValueError):
            return None
    if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0.0:
        return None
    return lu


def _newton_matrix(Q, A, C, s, lam, reg=0.0):
    """Augmented Newton matrix in (dz, dlam, dnu).

    Keeping ``s/lam`` on the diagonal avoids forming ``A' diag(lam/s) A``,
    whose conditioning collapses once some ratios pass 1e10.
    """
    n, m, p = Q.shape[0], A.shape[0], C.shape[0]
    K = np.zeros((n + m + p, n + m + p))
    K[:n, :n] = Q + reg * np.eye(n) if reg else Q
    K[:n, n:n + m] = A.T
    K[:n, n + m:] = C.T
    K[n:n + m, :n] = A
    K[n + m:, :n] = C
    K[n + np.arange(m), n + np.arange(m)] = -s / lam
    return K


def _direction(lu, n, m, s, lam, r_d, r_p, r_e, r_c):
    """Newton step for residuals (dual, primal ineq, primal eq, complementarity)."""
    rhs = np.concatenate([-r_d, -r_p + r_c / lam, -r_e])
    sol = sla.lu_solve(lu, rhs, check_finite=False)
    dz, dlam, dnu = sol[:n], sol[n:n + m], sol[n + m:]
    ds = (-r_c - s * dlam) / lam
    return dz, ds, dlam, dnu


def _solve_equality_only(qp, bp, dp):
    n, p = qp.n, qp.p
    K = np.block([[qp.Q, qp.C_eq.T], [qp.C_eq, np.zeros((p, p))]])
    rhs = np.concatenate([-qp.q, dp])
    try:
        w = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        w = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return w[:n], w[n:]


def solve(qp: AffineQp, param, tol: float = TOL_KKT, max_iter: int = MAX_ITER,
          check_feasibility: bool = False) -> QpSolution:
    """Mehrotra predictor-corrector interior point.

    ``check_feasibility`` additionally runs the phase-1 problem and warns when
    the feasible set has no strictly interior point. Phase-1 is always run when
    the main iteration fails, to separate ``Infeasible`` from ``MaxIter``.
    """
    bp, dp = qp.rhs(param)
    m = qp.m

    if check_feasibility and m:
        t = _phase1(qp, bp, dp)
        if t > PHASE1_TOL:
            return _infeasible(qp)
        if t > -PHASE1_TOL:
            warnings.warn("QP feasible set has no strictly interior point (Slater condition fails)",
                          RuntimeWarning, stacklevel=2)

    if m == 0:
        z, nu = _solve_equality_only(qp, bp, dp)
        lam = np.zeros(0)
        res = _kkt_max(qp, z, lam, nu, bp, dp)
        status = Status.OPTIMAL if res <= tol else Status.MAX_ITER
        return QpSolution(z, lam, nu, status, 1, float(res))

    res, z, lam, nu, it = _ipm(qp, bp, dp, tol, max_iter, split_steps=False)
    if res > tol:
        res, z, lam, nu = _polish(qp, bp, dp, res, z, lam, nu)
    if res > tol:
        # near-interchangeable variables can make the common step cycle; one
        # retry with separate primal and dual step lengths usually breaks it
        res2, z2, lam2, nu2, it2 = _ipm(qp, bp, dp, tol, max_iter, split_steps=True)
        it += it2
        if res2 < res:
            res, z, lam, nu = _polish(qp, bp, dp, res2, z2, lam2, nu2)
    if res <= tol:
        return QpSolution(z.copy(), lam.copy(), nu.copy(), Status.OPTIMAL, it, float(res))
    if _phase1(qp, bp, dp) > PHASE1_TOL:
        return _infeasible(qp, it)
    return QpSolution(z.copy(), lam.copy(), nu.copy(), Status.MAX_ITER, it, float(res))


def _ipm(qp: AffineQp, bp, dp, tol, max_iter, split_steps):
    """Main iteration; returns (residual, z, lam, nu, iterations) of the best iterate."""
    n, m, p = qp.n, qp.m, qp.p
    Q, q, A, C = qp.Q, qp.q, qp.A_in, qp.C_eq

    # start: least-squares fit with unit slacks and multipliers, then one
    # affine-scaling step whose slacks and multipliers are pushed back to >= 1
    H0 = Q + A.T @ A + 1e-8 * np.eye(n)
    K0 = np.block([[H0, C.T], [C, np.zeros((p, p))]])
    w0 = np.linalg.lstsq(K0, np.concatenate([-q + A.T @ bp, dp]), rcond=None)[0]
    z = w0[:n]
    nu = w0[n:].copy()
    s = np.maximum(bp - A @ z, 1.0)
    lam = np.ones(m)
    lu = _factor(_newton_matrix(Q, A, C, s, lam))
    if lu is not None:
        r_c = s * lam
        dz, ds, dlam, dnu = _direction(lu, n, m, s, lam, Q @ z + q + A.T @ lam + C.T @ nu,
                                       A @ z + s - bp, C @ z - dp, r_c)
        if np.all(np.isfinite(dz)) and np.all(np.isfinite(dlam)):
            z, nu = z + dz, nu + dnu
            s = np.maximum(1.0, np.abs(s + ds))
            lam = np.maximum(1.0, np.abs(lam + dlam))

    best = (np.inf, z, lam, nu)
    it = 0
    last_gain = 0
    reg = 0.0
    polish = 0
    for it in range(1, max_iter + 1):
        res = _kkt_max(qp, z, lam, nu, bp, dp)
        if res <= best[0]:
            if res < 0.5 * best[0]:
                last_gain = it
            best = (res, z, lam, nu)
        if it - last_gain > STALL_ITERS:
            break
        if res <= tol:
            # a small complementarity product does not pin down a nearly-active
            # constraint; keep going a few steps to separate it
            comp = np.max(np.abs(lam * (A @ z - bp)), initial=0.0)
            if comp <= COMP_POLISH * tol or polish >= MAX_POLISH:
                break
            polish += 1
        r_d = Q @ z + q + A.T @ lam + C.T @ nu
        r_p = A @ z + s - bp
        r_e = C @ z - dp
        mu = s @ lam / m

        K = _newton_matrix(Q, A, C, s, lam, reg)
        lu = _factor(K)
        if lu is None:
            reg = max(10 * reg, 1e-12 * max(1.0, np.abs(Q).max()))
            lu = _factor(_newton_matrix(Q, A, C, s, lam, reg))
            if lu is None:
                break

        def direction(r_c):
            return _direction(lu, n, m, s, lam, r_d, r_p, r_e, r_c)

        def max_step(v, dv):
            neg = dv < 0
            if not np.any(neg):
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        # predictor
        dz_a, ds_a, dl_a, _ = direction(s * lam)
        a_aff = min(max_step(s, ds_a), max_step(lam, dl_a))
        mu_aff = (s + a_aff * ds_a) @ (lam + a_aff * dl_a) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        dz, ds, dlam, dnu = direction(s * lam + ds_a * dl_a - sigma * mu)
        if not all(np.all(np.isfinite(v)) for v in (dz, ds, dlam, dnu)):
            break  # diverging (typically an infeasible problem); keep the best iterate
        a_p = min(1.0, 0.995 * max_step(s, ds))
        a_d = min(1.0, 0.995 * max_step(lam, dlam))
        if not split_steps:
            a_p = a_d = min(a_p, a_d)
        z = z + a_p * dz
        s = s + a_p * ds
        lam = lam + a_d * dlam
        nu = nu + a_d * dnu
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(lam))):
            break
        s = np.maximum(s, 1e-300)
        lam = np.maximum(lam, 1e-300)
    else:
        res = _kkt_max(qp, z, lam, nu, bp, dp)
        if res < best[0]:
            best = (res, z, lam, nu)

    res, z, lam, nu = best
    return float(res), z, lam, nu, it


def _polish(qp: AffineQp, bp, dp, res, z, lam, nu):
    """Guess the active set from a near-optimal iterate and solve its KKT system exactly.

    Returns the polished point when its residual beats ``res``, else the input.
    """
    n, p = qp.n, qp.p
    slack = bp - qp.A_in @ z
    act = lam > slack
    A = qp.A_in[act]
    k = A.shape[0]
    K = np.block([[qp.Q, A.T, qp.C_eq.T],
                  [A, np.zeros((k, k + p))],
                  [qp.C_eq, np.zeros((p, k + p))]])
    rhs = np.concatenate([-qp.q, bp[act], dp])
    w = np.linalg.lstsq(K, rhs, rcond=None)[0]
    for _ in range(2):  # iterative refinement; active duals can be large
        w = w + np.linalg.lstsq(K, rhs - K @ w, rcond=None)[0]
    if not np.all(np.isfinite(w)):
        return res, z, lam, nu
    z2 = w[:n]
    lam2 = np.zeros_like(lam)
    lam2[act] = np.maximum(w[n:n + k], 0.0)
    nu2 = w[n + k:]
    res2 = _kkt_max(qp, z2, lam2, nu2, bp, dp)
    if res2 < res:
        return float(res2), z2, lam2, nu2
    return res, z, lam, nu


def _infeasible(qp, it=0):
    return QpSolution(np.full(qp.n, np.nan), np.full(qp.m, np.nan), np.full(qp.p, np.nan),
                      Status.INFEASIBLE, it, float("inf"))


def _phase1(qp: AffineQp, bp, dp) -> float:
    """Smallest uniform violation t with A z - t <= b', C z = d' (t >= -1)."""
    n, m, p = qp.n, qp.m, qp.p
    A1 = np.block([[qp.A_in, -np.ones((m, 1))], [np.zeros((1, n)), -np.ones((1, 1))]])
    b1 = np.concatenate([bp, [1.0]])
    C1 = np.hstack([qp.C_eq, np.zeros((p, 1))])
    Q1 = np.zeros((n + 1, n + 1))
    Q1[:n, :n] = 1e-9 * np.eye(n)
    q1 = np.zeros(n + 1)
    q1[-1] = 1.0
    try:
        aux = AffineQp(Q1, q1, A1, np.zeros((m + 1, 0)), b1, C1, np.zeros((p, 0)), dp)
    except QpError:
        return np.inf  # inconsistent equalities
    sol = solve(aux, np.zeros(0), tol=1e-9, max_iter=MAX_ITER)
    if sol.status == Status.INFEASIBLE or not np.all(np.isfinite(sol.z_star)):
        return np.inf
    return float(sol.z_star[-1])


# -- debug dump ----------------------------------------------------------------

_BLOCKS = ("Q", "q", "A_in", "G_in", "b_in", "C_eq", "H_eq", "d_eq")


def dump_text(qp: AffineQp, path: Union[str, Path]) -> None:
    """Write the QP as row-major text blocks, each preceded by ``name rows cols``."""
    lines = [f"# affine-qp n={qp.n} m={qp.m} p={qp.p} k={qp.k}"]
    for name in _BLOCKS:
        arr = np.atleast_2d(getattr(qp, name))
        if name in ("q", "b_in", "d_eq"):
            arr = arr.reshape(1, -1)
        lines.append(f"{name} {arr.shape[0]} {arr.shape[1]}")
        if arr.shape[1]:
            lines.extend(" ".join(repr(float(v)) for v in row) for row in arr)
    Path(path).write_text("\n".join(lines) + "\n")


def load_text(path: Union[str, Path]) -> AffineQp:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    out = {}
    i = 0
    while i < len(rows):
        name, r, c = rows[i].split()
        r, c = int(r), int(c)
        data = [[float(v) for v in rows[i + 1 + j].split()] for j in range(r)] if c else [[]] * r
        out[name] = np.array(data, dtype=float).reshape(r, c)
        i += 1 + (r if c else 0)
    for name in ("q", "b_in", "d_eq"):
        out[name] = out[name].ravel()
    return AffineQp(**out)

import numpy as np
from hypothesis import given, strategies as st

from oracles import random_qp
from robust_e2e import diffqp, qp as Q


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _setup(seed):
    rng = np.random.default_rng(seed)
    Qm, q, A, G, b, C, H, d, p0 = random_qp(rng, 3, 4, 1, 2)
    prob = Q.AffineQp(Qm, q, A, G, b, C, H, d)
    sol = Q.solve(prob, p0)
    w = rng.normal(size=3)
    return prob, p0, sol, w


def _loss(Qm, q, A, G, b, C, H, d, p, w):
    s = Q.solve(Q.AffineQp(0.5 * (Qm + Qm.T), q, A, G, b, C, H, d), p)
    return w @ s.z_star


@given(st.integers(0, 2**32 - 1))
def test_param_and_vector_blocks_match_fd(seed):
    prob, p0, sol, w = _setup(seed)
    if not sol.optimal or diffqp.degeneracy(prob, p0, sol)["degenerate"]:
        return
    if diffqp.complementarity_margin(prob, p0, sol) < 1e-4:
        return
    g = diffqp.backward(prob, p0, sol, w)
    args = dict(Qm=prob.Q, q=prob.q, A=prob.A_in, G=prob.G_in, b=prob.b_in, C=prob.C_eq, H=prob.H_eq,
                d=prob.d_eq, p=p0, w=w)

    def check(name, got):
        def f(v):
            return _loss(**{**args, name: v})
        fd = _fd(f, args[name])
        assert np.allclose(got, fd, rtol=1e-3, atol=1e-5), name

    check("p", g.d_param)
    check("q", g.d_q)
    check("b", g.d_b)
    check("d", g.d_d)
    check("A", g.d_A)
    check("Qm", g.d_Q)


def test_unconstrained_gradient_closed_form(rng):
    M = rng.normal(size=(3, 3))
    Qm = M @ M.T + np.eye(3)
    prob = Q.AffineQp(Qm, rng.normal(size=3), np.zeros((0, 3)), None, [], None, None, [])
    sol = Q.solve(prob, [])
    w = rng.normal(size=3)
    g = diffqp.backward(prob, [], sol, w)
    # z = -Q^{-1} q  =>  dL/dq = -Q^{-1} w
    assert np.allclose(g.d_q, -np.linalg.solve(Qm, w))


def test_degenerate_point_is_flagged():
    # min (z-1)^2 s.t. z <= 1: active with zero multiplier
    prob = Q.AffineQp([[2.0]], [-2.0], [[1.0]], None, [1.0], None, None, [])
    sol = Q.solve(prob, [])
    info = diffqp.degeneracy(prob, [], sol)
    assert info["degenerate"]
    g = diffqp.backward(prob, [], sol, [1.0])
    assert np.all(np.isfinite(g.d_q))

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import active_set_qp, random_qp
from robust_e2e import qp as Q


def _make(rng, n, m, p=0, k=0):
    Qm, q, A, G, b, C, H, d, p0 = random_qp(rng, n, m, p, k)
    return Q.AffineQp(Qm, q, A, G, b, C, H, d), p0


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(0, 6))
def test_matches_active_set_oracle(seed, n, m):
    rng = np.random.default_rng(seed)
    prob, p0 = _make(rng, n, m)
    sol = Q.solve(prob, p0)
    assert sol.optimal
    bp, _ = prob.rhs(p0)
    z, lam, _, obj = active_set_qp(prob.Q, prob.q, prob.A_in, bp)
    assert np.allclose(sol.z_star, z, atol=1e-6)
    assert abs(prob.objective(sol.z_star) - obj) <= 1e-6 * (1 + abs(obj))
    assert max(Q.kkt_residual(prob, p0, sol)) <= 1e-8


@given(st.integers(0, 2**32 - 1))
def test_equality_constraints(seed):
    rng = np.random.default_rng(seed)
    prob, p0 = _make(rng, 4, 3, p=2, k=2)
    sol = Q.solve(prob, p0)
    assert sol.optimal
    bp, dp = prob.rhs(p0)
    z, _, nu, _ = active_set_qp(prob.Q, prob.q, prob.A_in, bp, prob.C_eq, dp)
    assert np.allclose(sol.z_star, z, atol=1e-6)
    assert np.allclose(prob.C_eq @ sol.z_star, dp, atol=1e-8)


def test_unconstrained_closed_form():
    prob = Q.AffineQp(np.diag([2.0, 4.0]), [-2.0, 4.0], np.zeros((0, 2)), None, [], None, None, [])
    sol = Q.solve(prob, [])
    assert sol.optimal
    assert np.allclose(sol.z_star, [1.0, -1.0])


def test_infeasible_detected():
    # z <= -1 and -z <= -1 (z >= 1)
    prob = Q.AffineQp([[1.0]], [0.0], [[1.0], [-1.0]], None, [-1.0, -1.0], None, None, [])
    sol = Q.solve(prob, [])
    assert sol.status == Q.Status.INFEASIBLE


def test_bad_inputs_rejected():
    with pytest.raises(Q.QpError):
        Q.AffineQp([[1.0, 2.0], [0.0, 1.0]], [0, 0], np.zeros((0, 2)), None, [], None, None, [])
    with pytest.raises(Q.QpError):
        Q.AffineQp([[np.nan]], [0.0], np.zeros((0, 1)), None, [], None, None, [])
    with pytest.raises(Q.QpError):
        Q.AffineQp(np.eye(2), [0, 0], np.zeros((0, 2)), None, [], [[1, 1], [2, 2]], None, [0, 0])
    prob = Q.AffineQp([[1.0]], [0.0], [[1.0]], [[1.0]], [1.0], None, None, [])
    with pytest.raises(Q.QpError):
        prob.rhs([1.0, 2.0])


def test_text_roundtrip(tmp_path, rng):
    prob, p0 = _make(rng, 3, 4, p=1, k=2)
    path = tmp_path / "qp.txt"
    Q.dump_text(prob, path)
    back = Q.load_text(path)
    for name in ("Q", "q", "A_in", "G_in", "b_in", "C_eq", "H_eq", "d_eq"):
        assert np.array_equal(getattr(prob, name), getattr(back, name))
    assert np.array_equal(Q.solve(prob, p0).z_star, Q.solve(back, p0).z_star)


def test_parametric_shift_moves_solution(rng):
    prob, p0 = _make(rng, 3, 4, k=2)
    s1 = Q.solve(prob, p0)
    s2 = Q.solve(prob, p0 + 0.1)
    assert s1.optimal and s2.optimal
    assert max(Q.kkt_residual(prob, p0 + 0.1, s2)) <= 1e-8

import numpy as np
import pytest

from robust_e2e import diffqp, forecaster as F, pipeline as P


def _nondegenerate(out):
    chain = out.tapes["chain"]
    return not any(diffqp.degeneracy(st.qp, p, s)["degenerate"]
                   for st, p, s in zip(out.tapes["stages"], chain.params, chain.solutions))


def test_gradients_match_fd(loop3, small_data):
    theta = F.init_mlp([small_data.n_features, 8, 8, loop3.n_load], seed=1)
    phi = P.UnpredictableParams.nominal(loop3)
    checked = 0
    for i in range(small_data.n_samples):
        x, y = small_data.features[i], small_data.loads[i]
        out = P.infer(theta, x, y, phi, loop3)
        if not _nondegenerate(out):
            continue
        _, d_x, d_b = P.grads(theta, x, y, phi, loop3, out=out)
        h = 1e-6
        fx = np.array([(P.infer(theta, x + e, y, phi, loop3).cost - P.infer(theta, x - e, y, phi, loop3).cost)
                       / (2 * h) for e in h * np.eye(x.size)])
        fb = np.array([(P.infer(theta, x, y, phi.perturbed(e), loop3).cost
                        - P.infer(theta, x, y, phi.perturbed(-e), loop3).cost) / (2 * h)
                       for e in h * np.eye(loop3.n_line)])
        assert np.allclose(d_x, fx, rtol=1e-2, atol=1e-3 * (1 + np.abs(fx).max()))
        assert np.allclose(d_b, fb, rtol=1e-2, atol=1e-3 * (1 + np.abs(fb).max()))
        checked += 1
        if checked == 5:
            break
    assert checked >= 3


def test_batch_matches_scalar(loop3, small_data):
    theta = F.init_mlp([small_data.n_features, 8, loop3.n_load], seed=2)
    pipe = P.get_pipeline(loop3)
    X, Y = small_data.features[:10], small_data.loads[:10]
    b_rows = loop3.susceptance * np.linspace(0.9, 1.1, 10)[:, None]
    out = pipe.infer_batch(theta, X, Y, b_rows)
    _, d_x, d_b = pipe.grads_batch(theta, out)
    phi = P.UnpredictableParams.nominal(loop3)
    for i in range(10):
        ref = pipe.infer(theta, X[i], Y[i], phi.perturbed(b_rows[i] - loop3.susceptance))
        assert out.cost[i] == pytest.approx(ref.cost, rel=1e-8, abs=1e-8)
        _, rx, rb = pipe.grads(theta, ref)
        assert np.allclose(d_x[i], rx, rtol=1e-5, atol=1e-6)
        assert np.allclose(d_b[i], rb, rtol=1e-5, atol=1e-6)


def test_regret_nonnegative(loop3, small_data):
    theta = F.init_mlp([small_data.n_features, 8, loop3.n_load], seed=3)
    phi = P.UnpredictableParams.nominal(loop3)
    for i in range(5):
        assert P.regret(theta, small_data.features[i], small_data.loads[i], phi, loop3) >= -1e-6


def test_perfect_forecast_has_no_shedding(loop3, small_data):
    pipe = P.get_pipeline(loop3)
    y = small_data.loads[0]
    res, _ = pipe.decide(y, y, loop3.susceptance)
    ls = res.solutions[1].z_star[:loop3.n_load]
    assert ls.sum() < 1e-4


def test_susceptance_must_stay_positive(loop3):
    with pytest.raises(ValueError):
        P.UnpredictableParams(-loop3.susceptance, loop3.susceptance)


def test_misformulation_chain():
    rng = np.random.default_rng(0)
    results = [P.demo_misformulation(P.random_toy(rng)) for _ in range(10)]
    assert all(r.chain_holds for r in results)
    assert any(r.strict for r in results)

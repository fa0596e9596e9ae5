import numpy as np
import pytest
from hypothesis import given, strategies as st

from robust_e2e import attacks as atk, forecaster as F
from robust_e2e.pipeline import UnpredictableParams, get_pipeline


@pytest.fixture(scope="module")
def setup(loop3, small_data):
    theta = F.init_mlp([small_data.n_features, 8, 8, loop3.n_load], seed=5)
    return theta, small_data.head(12)


@given(st.floats(0.0, 0.3), st.integers(0, 1000))
def test_project_x_stays_in_box(eps, seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, size=(4, 6))
    mask = np.array([False, True, True, True, False, True])
    d = atk.project_x(X, rng.normal(size=X.shape), eps, mask)
    assert np.all(np.abs(d) <= eps + 1e-15)
    assert np.all(d[:, ~mask] == 0)
    assert np.all((X + d)[:, mask] >= 0) and np.all((X + d)[:, mask] <= 1)


def test_input_attack_respects_budget_and_raises_cost(loop3, setup):
    theta, ds = setup
    budget = atk.AttackBudget(eps_x=0.05, steps=5)
    res = atk.pgd_input(theta, ds.features, ds.loads, None, loop3, budget, mask=ds.attack_mask)
    assert np.all(np.abs(res.delta_x) <= 0.05 + 1e-12)
    assert np.all(res.delta_x[:, ~ds.attack_mask] == 0)
    assert np.all(res.delta_b == 0)
    assert np.all(res.cost >= res.clean_cost - 1e-9)
    # reported cost is the cost at the returned perturbation
    pipe = get_pipeline(loop3)
    again = pipe.infer_batch(theta, ds.features + res.delta_x, ds.loads).cost
    assert np.allclose(again, res.cost)


def test_phi_attack_budget(loop3, setup):
    theta, ds = setup
    budget = atk.AttackBudget(eps_phi=0.15, steps=5)
    res = atk.pgd_phi(theta, ds.features, ds.loads, None, loop3, budget, mask=ds.attack_mask)
    assert np.all(np.abs(res.delta_b) <= 0.15 * loop3.susceptance + 1e-12)
    assert np.all(res.delta_x == 0)
    assert np.all(res.cost >= res.clean_cost - 1e-9)


def test_zero_budget_is_clean(loop3, setup):
    theta, ds = setup
    res = atk.pgd_joint(theta, ds.features, ds.loads, None, loop3, atk.AttackBudget(steps=3),
                        mask=ds.attack_mask)
    assert np.allclose(res.cost, res.clean_cost)


def test_multistart_never_below_single(loop3, setup):
    theta, ds = setup
    budget = atk.AttackBudget(eps_x=0.05, steps=3)
    one = atk.multistart_worst(atk.pgd_input, theta, ds.features, ds.loads, None, loop3, budget,
                               restarts=1, mask=ds.attack_mask)
    plain = atk.pgd_input(theta, ds.features, ds.loads, None, loop3, budget, mask=ds.attack_mask)
    assert np.array_equal(one.cost, plain.cost)
    three = atk.multistart_worst(atk.pgd_input, theta, ds.features, ds.loads, None, loop3, budget,
                                 restarts=3, mask=ds.attack_mask)
    assert np.all(three.cost >= one.cost)


def test_multistart_independent_of_batching(loop3, setup):
    theta, ds = setup
    budget = atk.AttackBudget(eps_x=0.05, steps=2)
    full = atk.multistart_worst(atk.pgd_input, theta, ds.features, ds.loads, None, loop3, budget,
                                restarts=2, mask=ds.attack_mask)
    part = atk.multistart_worst(atk.pgd_input, theta, ds.features[4:8], ds.loads[4:8], None, loop3, budget,
                                restarts=2, mask=ds.attack_mask, sample_ids=np.arange(4, 8))
    assert np.allclose(full.cost[4:8], part.cost)


def test_random_phi_in_budget(loop3):
    phi = UnpredictableParams.nominal(loop3)
    d = atk.random_phi(phi, atk.AttackBudget(eps_phi=0.1), seed=1, n=50)
    assert d.shape == (50, loop3.n_line)
    assert np.all(np.abs(d) <= 0.1 * loop3.susceptance)


def test_budget_validation():
    with pytest.raises(ValueError):
        atk.AttackBudget(eps_x=-1)
    with pytest.raises(ValueError):
        atk.AttackBudget(eps_phi=1.0)
    with pytest.raises(ValueError):
        atk.AttackBudget(steps=0)


def test_gradient_alignment_shapes(loop3, setup):
    theta, ds = setup
    al = atk.gradient_alignment(theta, ds.features, ds.loads, loop3,
                                atk.AttackBudget(0.05, 0.15, 2), batch_size=4, mask=ds.attack_mask)
    assert al.norm_x.shape == al.cosine.shape == (3,)
    assert np.all(np.abs(al.cosine) <= 1)
    assert al.mean_norm_x >= 0 and al.mean_norm_phi >= 0


def test_mse_adversary_increases_error(setup):
    theta, ds = setup
    dx = atk.pgd_input_mse(theta, ds.features, ds.loads, atk.AttackBudget(eps_x=0.05, steps=5),
                           mask=ds.attack_mask)
    err = lambda X: ((F.forward(theta, X)[0] - ds.loads) ** 2).sum()  # noqa: E731
    assert err(ds.features + dx) >= err(ds.features)

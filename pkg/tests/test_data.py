import numpy as np
import pytest

from robust_e2e import data as D


def test_generation_is_seeded(loop3):
    a = D.generate_synthetic(loop3, 30, seed=7)
    b = D.generate_synthetic(loop3, 30, seed=7)
    c = D.generate_synthetic(loop3, 30, seed=8)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()


def test_layout_and_mask(loop3):
    ds = D.generate_synthetic(loop3, 20, seed=0)
    assert ds.n_features == D.N_CALENDRIC + D.N_MET_PER_BUS * loop3.n_bus
    assert not ds.attack_mask[:D.N_CALENDRIC].any()
    assert ds.attack_mask[D.N_CALENDRIC:].all()
    assert np.all(ds.loads >= 0)


def test_every_sample_dispatchable(loop3):
    ds = D.generate_synthetic(loop3, 40, seed=1)
    assert D.slack_fraction(loop3, ds.loads) == 0.0


def test_split_partitions(loop3):
    ds = D.split(D.generate_synthetic(loop3, 50, seed=0), (0.6, 0.2, 0.2), seed=0)
    sizes = {t: ds.subset(t).n_samples for t in ("train", "val", "test")}
    assert sizes == {"train": 30, "val": 10, "test": 10}
    with pytest.raises(D.DataError):
        D.split(ds, (0.5, 0.6))


def test_normalization_uses_train_only(loop3):
    ds = D.split(D.generate_synthetic(loop3, 60, seed=2), seed=2)
    stats = D.fit_normalization(ds)
    tr = ds.subset("train").features
    assert np.allclose(stats["feature_min"], tr.min(axis=0))
    norm = D.apply_normalization(ds, stats)
    m = ds.attack_mask
    assert np.all(norm.features[:, m] >= 0) and np.all(norm.features[:, m] <= 1)
    assert np.array_equal(norm.features[:, ~m], ds.features[:, ~m])


def test_csv_roundtrip_with_sidecar(tmp_path, loop3):
    ds = D.split(D.generate_synthetic(loop3, 25, seed=4), seed=4)
    stats = D.fit_normalization(ds)
    p = tmp_path / "d.csv"
    D.write_csv(ds, p, stats=stats)
    assert D.sidecar_path(p).exists()
    raw = D.load_csv(p, normalize=False)
    assert np.array_equal(raw.features, ds.features)
    assert np.array_equal(raw.loads, ds.loads)
    assert list(raw.split_tags) == list(ds.split_tags)
    normed = D.load_csv(p)
    assert np.allclose(normed.features, D.apply_normalization(ds, stats).features)


@pytest.mark.parametrize("text", [
    "",
    "foo,load_0\n1,2\n",
    "feature_met_0,load_0\n1\n",
    "feature_met_0,load_0\nx,2\n",
])
def test_bad_csv(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(D.DataError):
        D.load_csv(p)

import csv
import json

import numpy as np
import pytest

from robust_e2e import cli, forecaster

SMALL = {
    "name": "t",
    "data": {"n_samples": 60},
    "train": {"batch_size": 16, "hidden": [6],
              "phases": [{"name": "nat", "method": "NAT", "epochs": 2, "lr": 3e-3},
                         {"name": "at", "from": "nat", "method": "AT_PARA", "eps_phi": 0.15, "epochs": 1,
                          "lr": 3e-3, "steps": 2}]},
    "attacks": {"input_eps": [0.05], "phi_eps": [0.15], "pairs": [], "steps": 2, "restarts": 1},
    "certify": {"model": "nat", "n_samples": 2, "eps": 0.02, "pgd_steps": 5, "pgd_restarts": 1},
    "diagnose": {"model": "nat", "n_samples": 16, "batch_size": 8},
}


def _read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_digest=")
    return list(csv.DictReader(lines[1:]))


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    out = root / "out"
    base = ["--config", str(cfg), "--output-dir", str(out), "--workers", "1"]
    for cmd in ("gen-data", "train", "evaluate", "certify", "diagnose"):
        assert cli.main([cmd] + base) == 0, cmd
    return out, base


def test_artifacts_written(run_dir):
    out, _ = run_dir
    for name in ("data/dataset.csv", "data/dataset.norm.json", "data/summary.md", "checkpoints/nat.npz",
                 "checkpoints/at.npz", "logs/nat.csv", "train_summary.csv", "training.png", "results.csv",
                 "results.md", "results.png", "random_vs_pgd.csv", "certify.csv", "certify.md", "certify.png",
                 "diagnose.csv", "diagnose.md", "diagnose.png", "config.json"):
        assert (out / name).exists(), name
    digest = json.loads((out / "config.json").read_text())["config_digest"]
    for name in ("results.csv", "certify.csv", "diagnose.csv", "train_summary.csv"):
        assert digest in (out / name).read_text().splitlines()[0]
    assert digest in (out / "results.md").read_text()


def test_results_table_structure(run_dir):
    out, _ = run_dir
    rows = _read_csv(out / "results.csv")
    assert [r["model"] for r in rows] == ["nat", "at"]
    assert list(rows[0]) == ["model", "Clean", "Input(0.05)", "CO(0.15)"]
    for r in rows:
        assert float(r["CO(0.15)"]) >= float(r["Clean"]) - 1e-6


def test_certify_rows(run_dir):
    out, _ = run_dir
    rows = _read_csv(out / "certify.csv")
    assert len(rows) == 2
    for r in rows:
        for k in ("clean", "pgd30", "exact", "verify"):
            assert k in r
        exact = float(r["exact"])
        assert exact >= float(r["pgd30"]) - 1e-4 * (1 + exact)
        assert abs(exact - float(r["verify"])) <= 1e-4 * (1 + exact)


def test_no_overwrite_without_force(run_dir):
    out, base = run_dir
    before = (out / "results.csv").read_text()
    assert cli.main(["evaluate"] + base) == cli.EXIT_CONFIG
    assert (out / "results.csv").read_text() == before
    assert cli.main(["evaluate", "--force", "--model", "nat"] + base) == 0


def test_training_reproducible(run_dir, tmp_path):
    out, base = run_dir
    other = tmp_path / "again"
    args = [a if a != str(out) else str(other) for a in base]
    assert cli.main(["gen-data"] + args) == 0
    assert cli.main(["train", "--phase", "nat"] + args) == 0
    a, _ = forecaster.load_checkpoint(out / "checkpoints/nat.npz")
    b, _ = forecaster.load_checkpoint(other / "checkpoints/nat.npz")
    assert a.digest() == b.digest()


def test_empty_attack_grid_gives_clean_only(run_dir, tmp_path):
    out, base = run_dir
    rc = cli.main(["evaluate", "--force", "--model", "nat", "--set", "attacks.input_eps=[]",
                   "--set", "attacks.phi_eps=[]", "--set", "attacks.pairs=[]"] + base)
    assert rc == 0
    rows = _read_csv(out / "results.csv")
    assert list(rows[0]) == ["model", "Clean"]


def test_error_categories(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert cli.main(["train", "--output-dir", out, "--set", "train.nope=1"]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert cli.main(["evaluate", "--output-dir", out]) == cli.EXIT_DATA
    assert cli.main(["gen-data", "--output-dir", out, "--set", 'data.path="/missing.csv"']) == cli.EXIT_DATA
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["gen-data", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["gen-data", "--output-dir", out, "--set", "grid=nowhere.json"]) == cli.EXIT_CONFIG


def test_overrides():
    cfg = cli.load_config(None, ["train.batch_size=8", "attacks.phi_eps=[0.1,0.2]", "name=abc"])
    assert cfg["train"]["batch_size"] == 8
    assert cfg["attacks"]["phi_eps"] == [0.1, 0.2]
    assert cfg["name"] == "abc"
    assert cli.config_digest(cfg) != cli.config_digest(cli.load_config(None))
    with pytest.raises(cli.ConfigError):
        cli.load_config(None, ["novalue"])


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path))
    cfg = cli.load_config(None, ["name=x"])
    assert cli.output_dir(cfg) == tmp_path / "x"


def test_demo_prop1(tmp_path, capsys):
    assert cli.main(["demo-prop1", "--toys", "10", "--output-dir", str(tmp_path)]) == 0
    assert "chain holds on 10/10" in capsys.readouterr().out
    rows = _read_csv(tmp_path / "demo_prop1.csv")
    assert all(r["chain"] == "True" for r in rows)
    vals = np.array([[float(r[k]) for k in ("M_feasible", "M_optimal", "M_infer_optimal", "M_infer_feasible")]
                     for r in rows])
    assert np.all(vals[:, 0] <= vals[:, 3] + 1e-9)


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    text = capsys.readouterr().out
    for cmd in ("gen-data", "train", "evaluate", "certify", "diagnose", "demo-prop1"):
        assert cmd in text

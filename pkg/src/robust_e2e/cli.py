"""Command-line entry point: data generation, training, evaluation, certification, diagnostics.

Every subcommand reads one JSON experiment config (``--config``), applies
``--set key.sub=value`` overrides, and writes CSV + markdown + PNG artifacts
into the run's output directory. Each artifact carries the config digest and
seed. Existing artifacts are only replaced with ``--force``.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as datamod, forecaster, plotting, training
from .attacks import AttackBudget, gradient_alignment, multistart_worst, pgd_input
from .certify import CertifyError, MilpError, certify_sample
from .data import DataError
from .grid import GridError, load_grid
from .pipeline import StageError, demo_misformulation, random_toy
from .qp import QpError
from .training import TrainingError

OUTPUT_ENV = "ROBUST_E2E_OUTPUT_ROOT"

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3, 4

DEFAULT_CONFIG = {
    "name": "desk",
    "seed": 0,
    "grid": "case3_loop",
    "output_dir": None,
    "workers": None,
    "data": {"path": None, "n_samples": 500, "fractions": [0.8, 0.2]},
    "train": {
        "batch_size": 32,
        "hidden": [8, 8],
        "steps": 7,
        "free_at": False,
        "phases": [
            {"name": "mse", "method": "NAT", "objective": "mse", "epochs": 30, "lr": 1e-2},
            {"name": "nat", "from": "mse", "method": "NAT", "epochs": 10, "lr": 3e-3},
            {"name": "at_para", "from": "nat", "method": "AT_PARA", "alpha": 0.5, "eps_phi": 0.15,
             "epochs": 10, "lr": 3e-3},
            {"name": "at_input", "from": "nat", "method": "AT_INPUT", "alpha": 0.5, "eps_x": 0.05,
             "epochs": 10, "lr": 3e-3},
        ],
    },
    "attacks": {"input_eps": [0.05], "phi_eps": [0.05, 0.15], "pairs": [[0.05, 0.15]],
                "steps": 7, "restarts": 3, "random_phi": True},
    "certify": {"model": "nat", "n_samples": 10, "eps": 0.05, "big_m": 1e5, "node_limit": 20000,
                "time_limit": 120.0, "pgd_steps": 30, "pgd_restarts": 3},
    "diagnose": {"model": "nat", "eps_x": 0.05, "eps_phi": 0.15, "batch_size": 32, "n_samples": 128},
    "demo": {"n_toys": 50, "seed": 0},
}


class ConfigError(ValueError):
    pass


class ArtifactExists(ConfigError):
    pass


# -- configuration -------------------------------------------------------------

def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(value)


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be an object")
        cfg = _merge(cfg, doc)
    for o in overrides:
        apply_override(cfg, o)
    return cfg


def config_digest(cfg: dict) -> str:
    canon = {k: v for k, v in cfg.items() if k not in ("output_dir", "workers")}
    return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()[:12]


def output_dir(cfg: dict) -> Path:
    if cfg["output_dir"]:
        return Path(cfg["output_dir"])
    root = Path(os.environ.get(OUTPUT_ENV, "runs"))
    return root / cfg["name"]


class Run:
    """Resolved config plus the output directory and artifact bookkeeping."""

    def __init__(self, cfg: dict, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.digest = config_digest(cfg)
        self.seed = int(cfg["seed"])
        self.out = output_dir(cfg)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {self.out} is not writable: {exc}") from exc
        self.grid = load_grid(cfg["grid"])
        workers = cfg.get("workers")
        self.workers = int(workers) if workers else (os.cpu_count() or 1)

    @property
    def stamp(self) -> str:
        return f"config_digest={self.digest} seed={self.seed}"

    def path(self, name: str) -> Path:
        p = self.out / name
        if p.exists() and not self.force:
            raise ArtifactExists(f"{p} exists; rerun with --force to replace it")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return p

    def write_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
        lines = [f"# {self.stamp}", ",".join(header)]
        for r in rows:
            lines.append(",".join(_cell(v) for v in r))
        return self.write_text(name, "\n".join(lines) + "\n")

    def markdown(self, title: str, body: str) -> str:
        return f"# {title}\n\n{body}\n_{self.stamp}_\n"

    def save_config(self) -> None:
        p = self.out / "config.json"
        p.write_text(json.dumps({**self.cfg, "config_digest": self.digest}, indent=2) + "\n")

    # shared inputs

    def dataset(self) -> datamod.Dataset:
        p = self.out / "data" / "dataset.csv"
        if not p.exists():
            raise DataError(f"{p} not found; run gen-data first")
        return datamod.load_csv(p)

    def checkpoint(self, name: str) -> forecaster.MlpParams:
        p = self.out / "checkpoints" / f"{name}.npz"
        if not p.exists():
            raise ConfigError(f"checkpoint {p} not found; run train first")
        theta, _ = forecaster.load_checkpoint(p)
        return theta

    def phase_names(self) -> list[str]:
        return [ph["name"] for ph in self.cfg["train"]["phases"]]


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _md_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(map(str, header))] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    fmt = lambda r: "| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |"  # noqa: E731
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([fmt(cells[0]), sep] + [fmt(r) for r in cells[1:]]) + "\n"


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(run: Run) -> int:
    dcfg = run.cfg["data"]
    if dcfg["path"]:
        ds = datamod.load_csv(dcfg["path"], normalize=False)
    else:
        ds = datamod.generate_synthetic(run.grid, int(dcfg["n_samples"]), seed=run.seed)
    if ds.n_load != run.grid.n_load:
        raise DataError(f"dataset has {ds.n_load} load columns, grid has {run.grid.n_load} loads")
    ds = datamod.split(ds, tuple(dcfg["fractions"]), seed=run.seed)
    stats = datamod.fit_normalization(ds)
    target = run.path("data/dataset.csv")
    datamod.write_csv(ds, target, stats=stats)
    tags, counts = np.unique(ds.split_tags, return_counts=True)
    rows = [[t, int(c)] for t, c in zip(tags, counts)]
    body = (f"grid `{run.grid.name}`, {ds.n_samples} samples, {ds.n_features} features, "
            f"{ds.n_load} loads, load scale {ds.meta.get('load_scale', float('nan')):.4g}, "
            f"digest `{ds.digest()[:12]}`\n\n" + _md_table(["split", "samples"], rows))
    run.write_text("data/summary.md", run.markdown("Dataset", body))
    run.save_config()
    print(f"wrote {target} ({ds.n_samples} samples)")
    return EXIT_OK


def _train_config(run: Run, phase: dict) -> training.TrainConfig:
    tcfg = run.cfg["train"]
    known = {"name", "from", "method", "objective", "alpha", "eps_x", "eps_phi", "epochs", "lr",
             "free_at", "steps", "batch_size", "random_start"}
    extra = set(phase) - known
    if extra:
        raise ConfigError(f"phase {phase.get('name')!r}: unknown keys {sorted(extra)}")
    steps = int(phase.get("steps", tcfg["steps"]))
    try:
        budget = AttackBudget(float(phase.get("eps_x", 0.0)), float(phase.get("eps_phi", 0.0)), steps)
        return training.TrainConfig(
            method=phase.get("method", "NAT"), alpha=float(phase.get("alpha", 0.5)), budget=budget,
            epochs=int(phase["epochs"]), batch_size=int(phase.get("batch_size", tcfg["batch_size"])),
            lr=float(phase["lr"]), free_at=bool(phase.get("free_at", tcfg["free_at"])), seed=run.seed,
            hidden=tuple(tcfg["hidden"]), objective=phase.get("objective", "task"),
            random_start=bool(phase.get("random_start", True)))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"phase {phase.get('name')!r}: {exc}") from exc


def cmd_train(run: Run, only: Sequence[str] = ()) -> int:
    ds = run.dataset()
    train_ds = ds.subset("train")
    phases = run.cfg["train"]["phases"]
    names = [p["name"] for p in phases]
    if len(set(names)) != len(names):
        raise ConfigError("phase names must be unique")
    trained: dict = {}
    logs = {}
    summary = []
    for ph in phases:
        if only and ph["name"] not in only:
            continue
        cfg = _train_config(run, ph)
        src = ph.get("from")
        theta = None
        if src:
            theta = trained.get(src)
            if theta is None:
                theta = run.checkpoint(src)
        t0 = time.perf_counter()
        res = training.train(cfg, train_ds, run.grid, theta=theta)
        secs = time.perf_counter() - t0
        trained[ph["name"]] = res.theta
        ck = run.path(f"checkpoints/{ph['name']}.npz")
        forecaster.save_checkpoint(ck, res.theta, res.opt)
        res.write_log(run.path(f"logs/{ph['name']}.csv"))
        logs[ph["name"]] = res.log
        last = res.log[-1]
        summary.append([ph["name"], cfg.method.value, cfg.effective_epochs, res.passes, res.skipped,
                        last.clean_loss, last.adv_loss, round(secs, 1), res.theta.digest()[:12]])
        print(f"[{ph['name']}] {cfg.method.value}: {res.passes} passes, last clean loss "
              f"{last.clean_loss:.4g}, {secs:.1f}s")
    header = ["phase", "method", "epochs", "passes", "skipped", "clean_loss", "adv_loss", "seconds", "digest"]
    run.write_csv("train_summary.csv", header, summary)
    run.write_text("train_summary.md", run.markdown("Training", _md_table(header, summary)))
    plotting.plot_training(logs, run.path("training.png"), caption=run.stamp)
    run.save_config()
    return EXIT_OK


def cmd_evaluate(run: Run, models: Sequence[str] = ()) -> int:
    ds = run.dataset().subset("test")
    acfg = run.cfg["attacks"]
    pairs = [tuple(p) for p in acfg["pairs"]]
    names = list(models) or run.phase_names()
    table = None
    random_rows = []
    for name in names:
        theta = run.checkpoint(name)
        table = training.evaluate(theta, ds, run.grid, acfg["input_eps"], acfg["phi_eps"], pairs,
                                  steps=int(acfg["steps"]), restarts=int(acfg["restarts"]),
                                  seed=run.seed, name=name, table=table)
        if acfg.get("random_phi") and acfg["phi_eps"]:
            row = [name]
            for e in acfg["phi_eps"]:
                row += [training.random_phi_cost(theta, ds, run.grid, e, seed=run.seed),
                        table.value(name, f"CO({e:g})")]
            random_rows.append(row)
        print(f"[{name}] " + ", ".join(f"{c}={v:.4g}" for c, v in zip(table.columns, table.rows[-1][1])))
    table.to_csv(run.path("results.csv"), header_comment=run.stamp)
    fails = "".join(f"- {n}: {k} failed solves\n" for n, k in table.failed.items() if k)
    run.write_text("results.md", run.markdown(
        f"Mean task cost on {ds.n_samples} test samples (PGD-{acfg['steps']}, {acfg['restarts']} restarts)",
        table.to_markdown() + ("\n" + fails if fails else "")))
    plotting.plot_results(table, run.path("results.png"), caption=run.stamp)
    if random_rows:
        header = ["model"] + [f"{kind}({e:g})" for e in acfg["phi_eps"] for kind in ("Random", "PGD")]
        run.write_csv("random_vs_pgd.csv", header, random_rows)
        run.write_text("random_vs_pgd.md", run.markdown("Random vs PGD susceptance perturbations",
                                                         _md_table(header, random_rows)))
    return EXIT_OK


def _certify_one(args):
    theta, grid, x, y, mask, c = args
    pgd = multistart_worst(pgd_input, theta, x, y, None, grid,
                           AttackBudget(c["eps"], 0.0, int(c["pgd_steps"]), int(c["pgd_restarts"])),
                           mask=mask)
    res = certify_sample(theta, grid, x, y, c["eps"], mask=mask, big_m=float(c["big_m"]),
                         node_limit=int(c["node_limit"]), time_limit=c["time_limit"])
    return float(pgd.cost), res


def cmd_certify(run: Run) -> int:
    c = run.cfg["certify"]
    ds = run.dataset().subset("test").head(int(c["n_samples"]))
    theta = run.checkpoint(c["model"])
    jobs = [(theta, run.grid, ds.features[i], ds.loads[i], ds.attack_mask, c) for i in range(ds.n_samples)]
    if run.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=run.workers) as pool:
            results = list(pool.map(_certify_one, jobs))
    else:
        results = [_certify_one(j) for j in jobs]
    rows, plot_rows = [], []
    for i, (pgd, res) in enumerate(results):
        rows.append([i, res.clean_cost, pgd, res.objective, res.verify_cost, res.status.value, res.nodes,
                     res.gap, res.n_binaries, res.regularized_cost, round(res.seconds, 2)])
        plot_rows.append({"clean": res.clean_cost, "pgd30": pgd, "exact": res.objective, "verify": res.verify_cost})
        print(f"sample {i}: clean {res.clean_cost:.4g} pgd30 {pgd:.4g} exact {res.objective:.4g} "
              f"verify {res.verify_cost:.4g} ({res.status.value}, {res.nodes} nodes)")
    header = ["sample", "clean", "pgd30", "exact", "verify", "status", "nodes", "gap", "binaries",
              "regularized", "seconds"]
    run.write_csv("certify.csv", header, rows)
    run.write_text("certify.md", run.markdown(
        f"Exact input attack, eps={c['eps']:g}, model `{c['model']}`", _md_table(header, rows)))
    plotting.plot_certification(plot_rows, run.path("certify.png"), caption=run.stamp)
    return EXIT_OK


def cmd_diagnose(run: Run) -> int:
    c = run.cfg["diagnose"]
    ds = run.dataset().subset("test").head(int(c["n_samples"]))
    theta = run.checkpoint(c["model"])
    budget = AttackBudget(float(c["eps_x"]), float(c["eps_phi"]), int(run.cfg["attacks"]["steps"]))
    al = gradient_alignment(theta, ds.features, ds.loads, run.grid, budget,
                            batch_size=int(c["batch_size"]), mask=ds.attack_mask)
    rows = [[i, nx, nphi, cs] for i, (nx, nphi, cs) in enumerate(zip(al.norm_x, al.norm_phi, al.cosine))]
    header = ["batch", "grad_norm_input", "grad_norm_phi", "cosine"]
    run.write_csv("diagnose.csv", header, rows)
    summary = [["input", al.mean_norm_x], ["susceptance", al.mean_norm_phi],
               ["cosine (mean)", float(np.mean(al.cosine))]]
    run.write_text("diagnose.md", run.markdown(
        f"Parameter-gradient alignment, model `{c['model']}`",
        _md_table(["quantity", "value"], summary) + "\n" + _md_table(header, rows)))
    plotting.plot_diagnostics(al.norm_x, al.norm_phi, al.cosine, run.path("diagnose.png"), caption=run.stamp)
    print(f"mean grad norm input {al.mean_norm_x:.4g}, susceptance {al.mean_norm_phi:.4g}, "
          f"mean cosine {np.mean(al.cosine):.3f}")
    return EXIT_OK


def cmd_demo_prop1(n_toys: int = 50, seed: int = 0, run: Optional[Run] = None) -> int:
    """Decision-matching toy: feasible-only vs optimal lower level, trained and at inference."""
    rng = np.random.default_rng(seed)
    rows = []
    all_hold, any_strict = True, False
    for i in range(n_toys):
        res = demo_misformulation(random_toy(rng))
        a, b, c, d = res.quadruple
        all_hold &= res.chain_holds
        any_strict |= res.strict
        rows.append([i, a, b, c, d, res.chain_holds, res.strict])
    header = ["toy", "M_feasible", "M_optimal", "M_infer_optimal", "M_infer_feasible", "chain", "strict"]
    print(_md_table(header, rows))
    print(f"chain holds on {sum(r[5] for r in rows)}/{n_toys} toys; strict on {sum(r[6] for r in rows)}")
    if run is not None:
        run.write_csv("demo_prop1.csv", header, rows)
        run.write_text("demo_prop1.md", run.markdown("Feasible-only vs optimal decision matching",
                                                     _md_table(header, rows)))
        means = [float(np.mean([r[k] for r in rows])) for k in range(1, 5)]
        plotting.plot_chain(means, ["feasible", "optimal", "infer optimal", "infer feasible"],
                            run.path("demo_prop1.png"), caption=run.stamp)
    return EXIT_OK if all_hold and any_strict else EXIT_INTERNAL


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults are used for missing keys)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.batch_size=16 (value parsed as JSON)")
    common.add_argument("--output-dir", help=f"output directory (default ${OUTPUT_ENV}/<name> or runs/<name>)")
    common.add_argument("--seed", type=int, help="experiment seed")
    common.add_argument("--workers", type=int, help="worker processes (default: all cores; 1 is bit-reproducible)")
    common.add_argument("--force", action="store_true", help="replace existing artifacts")

    p = argparse.ArgumentParser(prog="robust-e2e", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate (or ingest) and split the dataset")
    t = sub.add_parser("train", parents=[common], help="run the configured training phases")
    t.add_argument("--phase", action="append", default=[], help="only run the named phase(s)")
    e = sub.add_parser("evaluate", parents=[common], help="clean and attacked cost table")
    e.add_argument("--model", action="append", default=[], help="checkpoint name(s); default all phases")
    sub.add_parser("certify", parents=[common], help="exact MILP input attack vs PGD-30")
    sub.add_parser("diagnose", parents=[common], help="gradient norms and input/susceptance alignment")
    d = sub.add_parser("demo-prop1", parents=[common], help="decision-matching toy chain check")
    d.add_argument("--toys", type=int, help="number of random toys")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.output_dir:
            cfg["output_dir"] = args.output_dir
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.workers is not None:
            cfg["workers"] = args.workers
        if args.command == "demo-prop1":
            n = args.toys or int(cfg["demo"]["n_toys"])
            run = Run(cfg, args.force) if (args.output_dir or args.config) else None
            return cmd_demo_prop1(n, int(cfg["demo"]["seed"]), run)
        run = Run(cfg, args.force)
        if args.command == "gen-data":
            return cmd_gen_data(run)
        if args.command == "train":
            return cmd_train(run, args.phase)
        if args.command == "evaluate":
            return cmd_evaluate(run, args.model)
        if args.command == "certify":
            return cmd_certify(run)
        if args.command == "diagnose":
            return cmd_diagnose(run)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (QpError, MilpError, CertifyError, StageError, TrainingError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except Exception:  # noqa: BLE001
        print("internal error:", file=sys.stderr)
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

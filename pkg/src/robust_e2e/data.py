"""Datasets: synthetic generation, CSV ingestion, normalization and splits.

Feature layout per sample: four calendric columns (sin/cos of day-of-year
and hour-of-day, named ``feature_cal_*``) followed by six meteorological
columns per bus (``feature_met_*``, in [0, 1]). Only the meteorological
columns are attackable. Loads are one column per load bus (``load_*``).
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .batched import solve_batch
from .grid import GridSpec
from .tasks import GAMMA_REG, build_dispatch

N_CALENDRIC = 4
N_MET_PER_BUS = 6
SLACK_TOL = 1e-6
SLACK_FRACTION = 0.05  # scale search stops once more samples than this need slack


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    loads: np.ndarray
    attack_mask: np.ndarray
    split_tags: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float).reshape(len(self.features), -1)
        self.loads = np.asarray(self.loads, dtype=float).reshape(len(self.loads), -1)
        self.attack_mask = np.asarray(self.attack_mask, dtype=bool)
        validate(self)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_load(self) -> int:
        return self.loads.shape[1]

    def subset(self, tag: str) -> "Dataset":
        if self.split_tags is None:
            raise DataError("dataset has no split tags")
        keep = self.split_tags == tag
        return Dataset(self.features[keep], self.loads[keep], self.attack_mask,
                       self.split_tags[keep], dict(self.meta))

    def head(self, n: int) -> "Dataset":
        tags = None if self.split_tags is None else self.split_tags[:n]
        return Dataset(self.features[:n], self.loads[:n], self.attack_mask, tags, dict(self.meta))

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features, self.loads, self.attack_mask.astype(np.uint8)):
            h.update(np.ascontiguousarray(arr).tobytes())
        if self.split_tags is not None:
            h.update("|".join(self.split_tags).encode())
        return h.hexdigest()


def validate(ds: Dataset) -> None:
    if ds.features.shape[0] != ds.loads.shape[0]:
        raise DataError("features and loads have different sample counts")
    if ds.attack_mask.shape != (ds.features.shape[1],):
        raise DataError("attack mask does not match the feature count")
    if not (np.all(np.isfinite(ds.features)) and np.all(np.isfinite(ds.loads))):
        raise DataError("dataset contains NaN or infinite cells")
    if np.any(ds.loads < 0):
        raise DataError("loads must be nonnegative")
    met = ds.features[:, ds.attack_mask]
    if met.size and (met.min() < -1e-12 or met.max() > 1 + 1e-12):
        raise DataError("attackable feature columns must lie in [0, 1]")
    if ds.split_tags is not None and len(ds.split_tags) != ds.n_samples:
        raise DataError("split tags do not match the sample count")


def feature_names(n_bus: int) -> list[str]:
    return ([f"feature_cal_{i}" for i in range(N_CALENDRIC)]
            + [f"feature_met_{i}" for i in range(N_MET_PER_BUS * n_bus)])


def attack_mask_for(names: Sequence[str]) -> np.ndarray:
    return np.array([not n.startswith("feature_cal_") for n in names], dtype=bool)


# -- synthetic generation ------------------------------------------------------

def _features(rng, n_bus, n):
    """Seasonal and diurnal weather-like signals plus calendric encodings."""
    day = rng.uniform(0.0, 365.0, size=n)
    hour = rng.integers(0, 24, size=n).astype(float)
    cal = np.column_stack([np.sin(2 * np.pi * day / 365), np.cos(2 * np.pi * day / 365),
                           np.sin(2 * np.pi * hour / 24), np.cos(2 * np.pi * hour / 24)])
    n_met = N_MET_PER_BUS * n_bus
    season_amp = rng.uniform(0.15, 0.3, size=n_met)
    season_ph = rng.uniform(0, 2 * np.pi, size=n_met)
    day_amp = rng.uniform(0.05, 0.2, size=n_met)
    day_ph = rng.uniform(0, 2 * np.pi, size=n_met)
    met = (0.5 + season_amp * np.sin(2 * np.pi * day[:, None] / 365 + season_ph)
           + day_amp * np.sin(2 * np.pi * hour[:, None] / 24 + day_ph)
           + rng.normal(scale=0.04, size=(n, n_met)))
    return np.hstack([cal, np.clip(met, 0.0, 1.0)]), hour


def _raw_loads(rng, grid: GridSpec, feats, hour):
    """Unscaled loads: affine map of the bus's weather plus a daily profile and noise."""
    n = feats.shape[0]
    out = np.empty((n, grid.n_load))
    for j, bus in enumerate(grid.loads):
        cols = N_CALENDRIC + N_MET_PER_BUS * bus + np.arange(N_MET_PER_BUS)
        w = rng.normal(scale=0.25, size=N_MET_PER_BUS)
        phase = rng.uniform(0, 2 * np.pi)
        base = 1.0 + (feats[:, cols] - 0.5) @ w + 0.2 * np.sin(2 * np.pi * hour / 24 + phase)
        out[:, j] = np.maximum(base + rng.normal(scale=0.03, size=n), 0.0)
    return out


def slack_fraction(grid: GridSpec, loads, gamma: float = GAMMA_REG) -> float:
    """Share of samples whose perfect-forecast dispatch needs slack."""
    if len(loads) == 0:
        return 0.0
    qp = build_dispatch(grid, gamma)
    sols = solve_batch(qp, loads)
    nb, ng = grid.n_bus, grid.n_gen
    used = [not s.optimal or s.z_star[ng + nb:].max() > SLACK_TOL for s in sols]
    return float(np.mean(used))


def find_load_scale(grid: GridSpec, raw_loads, hi: float = 64.0, iters: int = 30,
                    backoff: float = 0.98) -> float:
    """Bisect the largest scale with slack usage on at most 5% of samples, then
    shrink until no sample needs slack."""
    lo = 0.0
    if slack_fraction(grid, hi * raw_loads) <= SLACK_FRACTION:
        lo = hi
    else:
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if slack_fraction(grid, mid * raw_loads) > SLACK_FRACTION:
                hi = mid
            else:
                lo = mid
    scale = lo
    while scale > 0 and slack_fraction(grid, scale * raw_loads) > 0:
        scale *= backoff
    return scale


def generate_synthetic(grid: GridSpec, n_samples: int, seed: int = 0,
                       load_scale: Optional[float] = None) -> Dataset:
    """Seeded synthetic dataset whose every sample is dispatchable without slack.

    The load scale is searched on the generated samples unless given.
    """
    names = feature_names(grid.n_bus)
    mask = attack_mask_for(names)
    if n_samples == 0:
        return Dataset(np.zeros((0, len(names))), np.zeros((0, grid.n_load)), mask,
                       meta={"grid": grid.name, "seed": seed, "load_scale": load_scale})
    rng = np.random.default_rng(seed)
    feats, hour = _features(rng, grid.n_bus, n_samples)
    raw = _raw_loads(rng, grid, feats, hour)
    scale = find_load_scale(grid, raw) if load_scale is None else float(load_scale)
    return Dataset(feats, scale * raw, mask,
                   meta={"grid": grid.name, "seed": seed, "load_scale": scale})


# -- splits ----------------------------------------------------------------------

SPLIT_NAMES = {1: ("train",), 2: ("train", "test"), 3: ("train", "val", "test")}


def split(ds: Dataset, fractions: Sequence[float] = (0.8, 0.2), seed: int = 0) -> Dataset:
    fractions = np.asarray(fractions, dtype=float)
    if len(fractions) not in SPLIT_NAMES or np.any(fractions < 0) or abs(fractions.sum() - 1) > 1e-9:
        raise DataError("fractions must be 1-3 nonnegative numbers summing to 1")
    n = ds.n_samples
    bounds = np.round(np.cumsum(fractions) * n).astype(int)
    bounds[-1] = n
    order = np.random.default_rng(seed).permutation(n)
    tags = np.empty(n, dtype=object)
    start = 0
    for name, stop in zip(SPLIT_NAMES[len(fractions)], bounds):
        tags[order[start:stop]] = name
        start = stop
    return Dataset(ds.features, ds.loads, ds.attack_mask, tags.astype(str), dict(ds.meta))


# -- normalization -------------------------------------------------------------

def fit_normalization(ds: Dataset, tag: Optional[str] = "train") -> dict:
    """Min/max of the attackable columns over the given split (all rows if None)."""
    rows = ds.features if tag is None or ds.split_tags is None else ds.features[ds.split_tags == tag]
    if len(rows) == 0:
        raise DataError("cannot fit normalization on an empty split")
    lo = rows.min(axis=0)
    hi = rows.max(axis=0)
    return {"fit_on": tag, "feature_min": lo.tolist(), "feature_max": hi.tolist(),
            "attack_mask": ds.attack_mask.tolist()}


def apply_normalization(ds: Dataset, stats: dict) -> Dataset:
    lo = np.asarray(stats["feature_min"], dtype=float)
    hi = np.asarray(stats["feature_max"], dtype=float)
    if lo.shape != (ds.n_features,):
        raise DataError("normalization stats do not match the feature count")
    span = np.where(hi > lo, hi - lo, 1.0)
    feats = ds.features.copy()
    m = ds.attack_mask
    feats[:, m] = np.clip((feats[:, m] - lo[m]) / span[m], 0.0, 1.0)
    return Dataset(feats, ds.loads, ds.attack_mask, ds.split_tags, dict(ds.meta, normalized=True))


# -- CSV -----------------------------------------------------------------------

def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".norm.json")


def write_csv(ds: Dataset, path: Union[str, Path], names: Optional[Sequence[str]] = None,
              stats: Optional[dict] = None) -> None:
    """Write the dataset; ``stats`` (if given) goes to the sidecar file."""
    if names is None:
        names = _default_names(ds)
    header = list(names) + [f"load_{j}" for j in range(ds.n_load)]
    if ds.split_tags is not None:
        header.append("split")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(ds.n_samples):
            row = [repr(float(v)) for v in ds.features[i]] + [repr(float(v)) for v in ds.loads[i]]
            if ds.split_tags is not None:
                row.append(ds.split_tags[i])
            w.writerow(row)
    if stats is not None:
        sidecar_path(path).write_text(json.dumps(stats, indent=2))


def _default_names(ds: Dataset) -> list[str]:
    n_cal = int((~ds.attack_mask).sum())
    if np.all(~ds.attack_mask[:n_cal]) and np.all(ds.attack_mask[n_cal:]):
        return ([f"feature_cal_{i}" for i in range(n_cal)]
                + [f"feature_met_{i}" for i in range(ds.n_features - n_cal)])
    raise DataError("calendric columns must come first to use the default column names")


def load_csv(path: Union[str, Path], normalize: bool = True) -> Dataset:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError("empty CSV file")
    header = rows[0]
    f_idx = [i for i, h in enumerate(header) if h.startswith("feature_")]
    l_idx = [i for i, h in enumerate(header) if h.startswith("load_")]
    s_idx = header.index("split") if "split" in header else None
    known = set(f_idx) | set(l_idx) | ({s_idx} if s_idx is not None else set())
    if not f_idx or not l_idx or len(known) != len(header):
        raise DataError("header must consist of feature_*, load_* and an optional split column")
    feats, loads, tags = [], [], []
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"line {k}: expected {len(header)} cells, got {len(row)}")
        try:
            feats.append([float(row[i]) for i in f_idx])
            loads.append([float(row[i]) for i in l_idx])
        except ValueError as exc:
            raise DataError(f"line {k}: {exc}") from exc
        if s_idx is not None:
            tags.append(row[s_idx])
    names = [header[i] for i in f_idx]
    ds = Dataset(np.array(feats).reshape(-1, len(f_idx)), np.array(loads).reshape(-1, len(l_idx)),
                 attack_mask_for(names), np.array(tags, dtype=str) if s_idx is not None else None,
                 {"source": str(path)})
    side = sidecar_path(path)
    if normalize and side.exists():
        ds = apply_normalization(ds, json.loads(side.read_text()))
    return ds

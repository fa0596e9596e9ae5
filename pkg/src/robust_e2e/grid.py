"""DC power-network description and incidence structures.

Grid files are JSON documents::

    {
      "name": "case3",                      # optional
      "base_mva": 100.0,                    # optional, metadata only
      "n_bus": 3,
      "ref_bus": 0,
      "lines": [{"from": 0, "to": 1, "susceptance": 10.0, "flow_limit": 1.0}, ...],
      "generators": [{"bus": 0, "cost": 1.0, "p_min": 0.0, "p_max": 2.0}, ...],
      "loads": [2],
      "penalties": {"c_ls": 100.0, "c_gs": 10.0, "c_slack": 100.0}
    }

Everything is per-unit. Unknown keys are rejected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Union

import numpy as np


class GridError(ValueError):
    """Malformed or invalid grid description."""


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    susceptance: float
    flow_limit: float


@dataclass(frozen=True)
class Generator:
    bus: int
    cost: float
    p_min: float
    p_max: float


@dataclass(frozen=True)
class GridSpec:
    n_bus: int
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    loads: tuple[int, ...]
    ref_bus: int
    c_ls: float
    c_gs: float
    c_slack: float
    name: str = "grid"
    base_mva: float = 100.0

    def __post_init__(self):
        validate(self)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_load(self) -> int:
        return len(self.loads)

    @property
    def susceptance(self) -> np.ndarray:
        return np.array([ln.susceptance for ln in self.lines], dtype=float)

    @property
    def flow_limit(self) -> np.ndarray:
        return np.array([ln.flow_limit for ln in self.lines], dtype=float)

    @property
    def gen_cost(self) -> np.ndarray:
        return np.array([g.cost for g in self.generators], dtype=float)

    @property
    def p_min(self) -> np.ndarray:
        return np.array([g.p_min for g in self.generators], dtype=float)

    @property
    def p_max(self) -> np.ndarray:
        return np.array([g.p_max for g in self.generators], dtype=float)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "n_bus": self.n_bus,
            "ref_bus": self.ref_bus,
            "lines": [
                {"from": ln.from_bus, "to": ln.to_bus,
                 "susceptance": ln.susceptance, "flow_limit": ln.flow_limit}
                for ln in self.lines
            ],
            "generators": [
                {"bus": g.bus, "cost": g.cost, "p_min": g.p_min, "p_max": g.p_max}
                for g in self.generators
            ],
            "loads": list(self.loads),
            "penalties": {"c_ls": self.c_ls, "c_gs": self.c_gs, "c_slack": self.c_slack},
        }


def _connected(n_bus: int, lines) -> bool:
    adj = [[] for _ in range(n_bus)]
    for ln in lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    seen = {0}
    stack = [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == n_bus


def validate(grid: GridSpec) -> None:
    """Raise GridError naming the first violated invariant."""
    if grid.n_bus < 1:
        raise GridError("n_bus must be positive")
    if not 0 <= grid.ref_bus < grid.n_bus:
        raise GridError(f"ref_bus {grid.ref_bus} is not a valid bus index")
    for k, ln in enumerate(grid.lines):
        for b in (ln.from_bus, ln.to_bus):
            if not 0 <= b < grid.n_bus:
                raise GridError(f"line {k}: bus {b} out of range")
        if ln.from_bus == ln.to_bus:
            raise GridError(f"line {k}: self loop at bus {ln.from_bus}")
        if not ln.susceptance > 0:
            raise GridError(f"line {k}: susceptance must be > 0")
        if not ln.flow_limit > 0:
            raise GridError(f"line {k}: flow_limit must be > 0")
    for k, g in enumerate(grid.generators):
        if not 0 <= g.bus < grid.n_bus:
            raise GridError(f"generator {k}: bus {g.bus} out of range")
        if g.cost < 0:
            raise GridError(f"generator {k}: cost must be >= 0")
        if g.p_min > g.p_max:
            raise GridError(f"generator {k}: p_min > p_max")
    for b in grid.loads:
        if not 0 <= b < grid.n_bus:
            raise GridError(f"load bus {b} out of range")
    if not grid.generators:
        raise GridError("grid needs at least one generator")
    if not grid.loads:
        raise GridError("grid needs at least one load")
    if not _connected(grid.n_bus, grid.lines):
        raise GridError("line graph is disconnected")
    max_cost = max(g.cost for g in grid.generators)
    if not grid.c_gs > max_cost:
        raise GridError(f"penalty ordering violated: c_gs={grid.c_gs} <= max generator cost {max_cost}")
    if not grid.c_ls > grid.c_gs:
        raise GridError(f"penalty ordering violated: c_ls={grid.c_ls} <= c_gs={grid.c_gs}")
    if grid.c_slack < 0:
        raise GridError("c_slack must be >= 0")


_TOP_KEYS = {"name", "base_mva", "n_bus", "ref_bus", "lines", "generators", "loads", "penalties"}
_REQUIRED = {"n_bus", "ref_bus", "lines", "generators", "loads", "penalties"}
_LINE_KEYS = {"from", "to", "susceptance", "flow_limit"}
_GEN_KEYS = {"bus", "cost", "p_min", "p_max"}
_PEN_KEYS = {"c_ls", "c_gs", "c_slack"}


def _check_keys(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise GridError(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise GridError(f"{where}: unknown field(s) {sorted(extra)}")
    missing = required - set(obj)
    if missing:
        raise GridError(f"{where}: missing field(s) {sorted(missing)}")


def grid_from_dict(doc: dict) -> GridSpec:
    _check_keys(doc, _TOP_KEYS, _REQUIRED, "grid")
    lines = []
    for k, ln in enumerate(doc["lines"]):
        _check_keys(ln, _LINE_KEYS, _LINE_KEYS, f"lines[{k}]")
        lines.append(Line(int(ln["from"]), int(ln["to"]),
                          float(ln["susceptance"]), float(ln["flow_limit"])))
    gens = []
    for k, g in enumerate(doc["generators"]):
        _check_keys(g, _GEN_KEYS, _GEN_KEYS, f"generators[{k}]")
        gens.append(Generator(int(g["bus"]), float(g["cost"]), float(g["p_min"]), float(g["p_max"])))
    pen = doc["penalties"]
    _check_keys(pen, _PEN_KEYS, {"c_ls", "c_gs"}, "penalties")
    c_ls = float(pen["c_ls"])
    return GridSpec(
        n_bus=int(doc["n_bus"]),
        lines=tuple(lines),
        generators=tuple(gens),
        loads=tuple(int(b) for b in doc["loads"]),
        ref_bus=int(doc["ref_bus"]),
        c_ls=c_ls,
        c_gs=float(pen["c_gs"]),
        # stage-one slack defaults to the shedding penalty
        c_slack=float(pen.get("c_slack", c_ls)),
        name=str(doc.get("name", "grid")),
        base_mva=float(doc.get("base_mva", 100.0)),
    )


def load_grid(path: Union[str, Path]) -> GridSpec:
    """Read and validate a grid file.

    ``path`` may also be the name of a bundled case (``case3``, ``case3_loop``,
    ``case14``).
    """
    p = Path(path)
    if not p.exists() and p.suffix == "" and str(path) in bundled_cases():
        text = resources.files("robust_e2e.cases").joinpath(f"{path}.json").read_text()
    else:
        try:
            text = p.read_text()
        except OSError as exc:
            raise GridError(f"cannot read grid file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GridError(f"parse error in {path}: {exc}") from exc
    return grid_from_dict(doc)


def save_grid(grid: GridSpec, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(grid.to_dict(), indent=2) + "\n")


def bundled_cases() -> list[str]:
    root = resources.files("robust_e2e.cases")
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".json"))


def incidence(grid: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (A, Cg, Cl): line-by-bus, bus-by-generator, bus-by-load."""
    A = np.zeros((grid.n_line, grid.n_bus))
    for k, ln in enumerate(grid.lines):
        A[k, ln.from_bus] = 1.0
        A[k, ln.to_bus] = -1.0
    Cg = np.zeros((grid.n_bus, grid.n_gen))
    for j, g in enumerate(grid.generators):
        Cg[g.bus, j] = 1.0
    Cl = np.zeros((grid.n_bus, grid.n_load))
    for j, b in enumerate(grid.loads):
        Cl[b, j] = 1.0
    return A, Cg, Cl

"""Run configuration, atomic artifact writing, config hashing and CSV schemas.

Every artifact carries the hash of the run configuration: JSON files hold a
``config_hash`` key, CSV files start with a ``# config_hash: <hex>`` comment
line followed by their fixed header.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
import tempfile
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError
from .forecasting import SeriesPanel

RUN_CONFIG_SCHEMA = "evdro-run-config/1"
MANIFEST_SCHEMA = "evdro-manifest/1"
HASH_PREFIX = "# config_hash: "
EVENT_HEADER = ("time", "region", "count")
REGION_HEADER = ("region_id", "index")
POLICY_NAMES = {"robust": "Robust", "nonrobust": "NonRobust", "noop": "NoOp"}


@dataclass
class CityConfig:
    N: int = 6
    station_fraction: float = 0.5
    grid_extent: float = 10.0
    tau: int = 2
    K: int = 48
    history_days: int = 7
    demand_cv: float = 0.25
    supply_cv: float = 0.3
    shift: bool = True
    theta: float = 1.0
    beta: float = 1.0
    a: float = 0.5


@dataclass
class RunConfig:
    """Everything a pipeline run depends on.  The output directory is not part of the hash."""

    seed: int = 0
    city: CityConfig = field(default_factory=CityConfig)
    NB: int = 1000
    alpha: float = 0.25
    policies: tuple = ("Robust", "NonRobust")
    n_seeds: int = 20
    steps: int | None = None
    backend: str = "clarabel"
    solver_tol: float | None = None
    mode: str = "full"  # or "nonrobust-only"
    workers: int = 1
    version: str = __version__

    def __post_init__(self):
        if isinstance(self.city, dict):
            self.city = _build(CityConfig, self.city, "city")
        self.policies = tuple(POLICY_NAMES.get(str(p).lower(), p) for p in self.policies)
        bad = [p for p in self.policies if p not in POLICY_NAMES.values()]
        if bad:
            raise ConfigError(f"unknown policies {bad}; choose from {sorted(POLICY_NAMES)}")
        if self.mode not in ("full", "nonrobust-only"):
            raise ConfigError(f"mode must be 'full' or 'nonrobust-only', got {self.mode!r}")
        if self.mode == "nonrobust-only":
            self.policies = tuple(p for p in self.policies if p != "Robust") or ("NonRobust",)
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        if self.NB < 10 or not 0 < self.alpha < 1:
            raise ConfigError("need NB >= 10 and alpha in (0, 1)")
        if self.backend not in ("clarabel", "cvxopt"):
            raise ConfigError(f"backend must be clarabel or cvxopt, got {self.backend!r}")
        if self.solver_tol is not None and not self.solver_tol > 0:
            raise ConfigError("solver_tol must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["policies"] = list(self.policies)
        d["schema"] = RUN_CONFIG_SCHEMA
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        schema = d.pop("schema", RUN_CONFIG_SCHEMA)
        if schema != RUN_CONFIG_SCHEMA:
            raise ConfigError(f"unsupported config schema {schema!r}")
        return _build(cls, d, "run config")

    def hash(self):
        return config_hash(self.to_dict())


def _build(cls, d, what):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {unknown}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {what}: {exc}") from exc


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(d):
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return RunConfig.from_dict(raw.get("config", raw))


# -- atomic writes ---------------------------------------------------------

def write_atomic(path, data: str | bytes):
    """Write via a temp file in the same directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, payload: dict, chash=None):
    body = dict(payload)
    if chash is not None:
        body["config_hash"] = chash
    return write_atomic(path, json.dumps(body, indent=1, sort_keys=True, allow_nan=False) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"missing artifact {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows, chash=None):
    buf = io.StringIO()
    if chash is not None:
        buf.write(f"{HASH_PREFIX}{chash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return write_atomic(path, buf.getvalue())


def read_csv(path):
    """(config_hash or None, header, rows as lists of strings)."""
    try:
        lines = Path(path).read_text().splitlines()
    except FileNotFoundError as exc:
        raise DataError(f"missing CSV {path}") from exc
    chash = None
    if lines and lines[0].startswith(HASH_PREFIX):
        chash = lines[0][len(HASH_PREFIX):].strip()
        lines = lines[1:]
    rows = list(csv.reader(lines))
    if not rows:
        raise DataError(f"{path}: no header row")
    return chash, tuple(rows[0]), rows[1:]


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- panels and events -----------------------------------------------------

def panel_header(N):
    return ("step", "start_time", "filled") + tuple(f"region_{i}" for i in range(N))


def write_panel(path, panel: SeriesPanel, start: datetime, filled=None, chash=None):
    filled = np.zeros(panel.T, dtype=bool) if filled is None else np.asarray(filled, dtype=bool)
    dt = timedelta(minutes=panel.step_minutes)
    rows = ((t, (start + t * dt).isoformat(), int(filled[t]), *panel.values[t]) for t in range(panel.T))
    return write_csv(path, panel_header(panel.N), rows, chash)


def read_panel(path, kind="demand"):
    """(SeriesPanel, start time, filled flags, config hash)."""
    chash, header, rows = read_csv(path)
    if header[:3] != ("step", "start_time", "filled") or len(header) < 4:
        raise DataError(f"{path}: expected header {panel_header(1)[:3]} + region columns, got {header}")
    if not rows:
        raise DataError(f"{path}: panel has no rows")
    try:
        start = datetime.fromisoformat(rows[0][1])
        values = np.array([[float(x) for x in r[3:]] for r in rows])
        filled = np.array([int(r[2]) for r in rows], dtype=bool)
        if len(rows) > 1:
            minutes = (datetime.fromisoformat(rows[1][1]) - start).total_seconds() / 60.0
        else:
            minutes = 30.0
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed panel row ({exc})") from exc
    return SeriesPanel(values, minutes, kind), start, filled, chash


def read_region_map(path):
    """Map region id (string) -> column index."""
    _, header, rows = read_csv(path)
    if header[:2] != REGION_HEADER:
        raise DataError(f"{path}: expected header starting {','.join(REGION_HEADER)}, got {','.join(header)}")
    out = {}
    for line, r in enumerate(rows, start=2):
        try:
            out[r[0]] = int(r[1])
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}:{line}: bad region map row {r}") from exc
    if sorted(out.values()) != list(range(len(out))):
        raise DataError(f"{path}: region indices must be 0..{len(out) - 1} without gaps")
    return out


def read_events(path, region_map):
    """Parse an event CSV into (times, region indices, counts).

    Each row is one event with ``count`` units (default 1 when the column is
    absent or blank).
    """
    _, header, rows = read_csv(path)
    if header[:2] != EVENT_HEADER[:2]:
        raise DataError(f"{path}: expected header time,region[,count], got {','.join(header)}")
    has_count = len(header) > 2 and header[2] == "count"
    times, regions, counts, unknown = [], [], [], []
    for line, r in enumerate(rows, start=2):
        if not r:
            continue
        try:
            times.append(datetime.fromisoformat(r[0]))
        except ValueError as exc:
            raise DataError(f"{path}:{line}: unparseable timestamp {r[0]!r}") from exc
        if r[1] not in region_map:
            unknown.append((line, r[1]))
            continue
        regions.append(region_map[r[1]])
        try:
            c = float(r[2]) if has_count and len(r) > 2 and r[2] != "" else 1.0
        except ValueError as exc:
            raise DataError(f"{path}:{line}: bad count {r[2]!r}") from exc
        if c < 0:
            raise DataError(f"{path}:{line}: negative count")
        counts.append(c)
    if unknown:
        listing = ", ".join(f"line {ln} ({rid})" for ln, rid in unknown[:20])
        raise DataError(f"{path}: unknown region ids at {listing}")
    return times, np.array(regions, dtype=int), np.array(counts, dtype=float)


def aggregate_events(times, regions, counts, N, start, steps, step_minutes=30.0):
    """Per-step per-region counts on [start, start + steps*step).  Returns (values, filled).

    ``filled`` marks steps without any event; their zeros are gap fill rather
    than observed zeros.  Events outside the window are ignored.
    """
    values = np.zeros((steps, N))
    seen = np.zeros(steps, dtype=bool)
    width = step_minutes * 60.0
    for t, i, c in zip(times, regions, counts):
        k = int((t - start).total_seconds() // width)
        if 0 <= k < steps:
            values[k, i] += c
            seen[k] = True
    return values, ~seen


def expand_panel(panel: SeriesPanel, start: datetime, region_ids):
    """Event rows reproducing ``panel`` when aggregated (one row per nonzero cell)."""
    dt = timedelta(minutes=panel.step_minutes)
    for t in range(panel.T):
        for i in range(panel.N):
            v = panel.values[t, i]
            if v:
                yield ((start + t * dt).isoformat(), region_ids[i], v)


# -- manifest ----------------------------------------------------------------

def environment_versions():
    import clarabel
    import cvxopt
    import matplotlib
    import scipy

    return {"evdro": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "clarabel": getattr(clarabel, "__version__", "unknown"),
            "cvxopt": getattr(cvxopt, "__version__", "unknown"), "matplotlib": matplotlib.__version__}


def build_manifest(cfg: RunConfig, seeds, artifacts: dict, stages: list):
    return {
        "schema": MANIFEST_SCHEMA,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seeds": {"base": cfg.seed, "episodes": list(seeds)},
        "versions": environment_versions(),
        "stages": stages,
        "artifacts": {name: {"path": str(p), "sha256": file_sha256(p)} for name, p in artifacts.items()},
    }


def load_manifest(path):
    d = read_json(path)
    if d.get("schema") != MANIFEST_SCHEMA:
        raise ConfigError(f"{path}: not a run manifest")
    cfg = RunConfig.from_dict(d["config"])
    if cfg.hash() != d.get("config_hash"):
        raise ConfigError(f"{path}: config hash does not match the stored config")
    return cfg, d


def check_hashes(paths, expected=None):
    """Raise DataError unless every artifact in ``paths`` carries the same config hash."""
    found = {}
    for p in paths:
        p = Path(p)
        if p.suffix == ".json":
            h = read_json(p).get("config_hash")
        else:
            h = read_csv(p)[0]
        found[str(p)] = h
    hashes = set(found.values())
    if expected is not None:
        hashes.add(expected)
    if len(hashes) > 1 or None in hashes:
        detail = ", ".join(f"{k}={v}" for k, v in found.items())
        raise DataError(f"config hash mismatch across run directory: {detail}")
    return hashes.pop() if hashes else None


# -- problem instances -------------------------------------------------------

INSTANCE_SCHEMA = "evdro-instance/1"


def instance_to_dict(inst):
    return {
        "schema": INSTANCE_SCHEMA,
        "mode": inst.mode.value,
        "config": inst.config.to_dict(),
        "costs": inst.costs.to_dict(),
        "trans": inst.trans.to_dict(),
        "initial": inst.initial.to_dict(),
        "bounds": inst.bounds.to_dict(),
        "demand_set": inst.demand_set.to_dict(),
        "supply_set": inst.supply_set.to_dict(),
    }


def instance_from_dict(d):
    from .ambiguity import AmbiguitySet
    from .dro import ProblemInstance
    from .fleet import CostMatrices, FleetState, HorizonConfig, ServiceBounds, TransitionModel

    if d.get("schema") != INSTANCE_SCHEMA:
        raise DataError(f"unsupported instance schema {d.get('schema')!r}")
    try:
        return ProblemInstance(
            config=HorizonConfig.from_dict(d["config"]), costs=CostMatrices.from_dict(d["costs"]),
            trans=TransitionModel.from_dict(d["trans"]), initial=FleetState.from_dict(d["initial"]),
            bounds=ServiceBounds.from_dict(d["bounds"]), demand_set=AmbiguitySet.from_dict(d["demand_set"]),
            supply_set=AmbiguitySet.from_dict(d["supply_set"]), mode=d.get("mode", "Robust"))
    except KeyError as exc:
        raise DataError(f"instance JSON lacks field {exc}") from exc

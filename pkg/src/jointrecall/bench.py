"""Architecture x learning-rate x seed sweeps with a resumable on-disk ledger.

Every cell is one ``neural.train`` run. Finished cells are written to
``<ledger>/cells/<key>.json`` by atomic rename, so a rerun skips them and a
crash never leaves a half-written mark. The key hashes the complete cell
configuration: editing the grid invalidates exactly the affected cells.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidConfigError, JointRecallError, TrainingDivergenceError
from .neural.model import KINDS
from .neural.train import TrainConfig, model_config_for, train
from .task_gen import DatasetConfig, file_checksum, generate_dataset

# name -> HybridModelConfig overrides (on top of the grid's shared model settings)
ARCHITECTURES = {
    "base": {"kinds": ["none"]},
    "base_wide": {"kinds": ["none"], "widen": 2},
    "dilated": {"kinds": ["dilated"]},
    "sw": {"kinds": ["sliding_window"]},
    "sw_dilated": {"kinds": ["sw_plus_dilated"]},
    "a_shaped": {"kinds": ["a_shaped"]},
    "lsh": {"kinds": ["lsh"]},
    "ks": {"kinds": ["ks"]},
    "hax": {"kinds": ["hax"]},
    # interpretation of a Samba-like stack: SSM layers alternating with
    # attention-only sliding-window layers
    "samba": {"kinds": ["none", "sliding_window"], "ssm_branch": [True, False]},
}

REPORT_FORMATS = ("csv", "markdown", "json")


@dataclass
class GridSpec:
    archs: list = field(default_factory=lambda: ["base_wide", "ks", "hax"])
    lrs: list = field(default_factory=lambda: [3e-3, 1e-3, 3e-4])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    data: DatasetConfig = field(default_factory=DatasetConfig)
    steps: int = 2000
    model: dict = field(default_factory=dict)  # shared HybridModelConfig fields (d, k, lsh, ...)
    train: dict = field(default_factory=dict)  # shared TrainConfig fields (batch_size, alpha, ...)
    val_count: int = 500
    val_seed: int = 12345

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DatasetConfig(**self.data)
        if not self.archs or not self.lrs or not self.seeds:
            raise InvalidConfigError("archs, lrs and seeds must be nonempty")
        for a in self.archs:
            spec = ARCHITECTURES.get(a) if isinstance(a, str) else a
            if spec is None:
                raise InvalidConfigError(f"unknown architecture {a!r}; known: {sorted(ARCHITECTURES)}")
            if isinstance(a, dict) and "name" not in a:
                raise InvalidConfigError("inline architecture configs need a 'name'")
            for kind in spec.get("kinds", []):
                if kind not in KINDS:
                    raise InvalidConfigError(f"architecture {a!r} uses unknown kind {kind!r}")
        if any(lr <= 0 for lr in self.lrs):
            raise InvalidConfigError("learning rates must be positive")
        if self.steps < 0:
            raise InvalidConfigError("steps must be >= 0")
        for key in ("steps", "lr", "seed", "data", "val_path", "val_count", "val_seed"):
            if key in self.train:
                raise InvalidConfigError(f"set {key!r} at grid level, not in 'train'")

    def arch_names(self) -> list[str]:
        return [a if isinstance(a, str) else a["name"] for a in self.archs]

    def arch_overrides(self, name: str) -> dict:
        for a in self.archs:
            if a == name:
                return dict(ARCHITECTURES[a])
            if isinstance(a, dict) and a["name"] == name:
                return {k: v for k, v in a.items() if k != "name"}
        raise InvalidConfigError(f"architecture {name!r} not in grid")

    def cells(self) -> list[tuple[str, float, int]]:
        return [(a, float(lr), int(s)) for a in self.arch_names() for lr in self.lrs for s in self.seeds]

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["data"] = self.data.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "GridSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(obj) - known
        if extra:
            raise InvalidConfigError(f"unknown grid fields: {sorted(extra)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "GridSpec":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class Cell:
    arch: str
    lr: float
    seed: int
    accuracy: float
    status: str = "ok"
    diagnostic: str = ""
    wall_time: float = 0.0
    log: list = field(default_factory=list)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ArchSummary:
    arch: str
    best_lr: float
    mean: float
    std: float
    seeds: int


@dataclass
class BenchmarkReport:
    cells: list[Cell] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def summary(self) -> list[ArchSummary]:
        """Per architecture: the lr with the highest seed-mean (ties: smaller lr)."""
        order, by_arch = [], {}
        for c in self.cells:
            if c.arch not in by_arch:
                order.append(c.arch)
                by_arch[c.arch] = {}
            by_arch[c.arch].setdefault(c.lr, []).append(c.accuracy)
        out = []
        for arch in order:
            best = None
            for lr in sorted(by_arch[arch]):
                accs = by_arch[arch][lr]
                mean = math.fsum(accs) / len(accs)
                if best is None or mean > best[1]:
                    best = (lr, mean, accs)
            lr, mean, accs = best
            std = math.sqrt(math.fsum((a - mean) ** 2 for a in accs) / len(accs))
            out.append(ArchSummary(arch, lr, mean, std, len(accs)))
        return out

    def best(self, arch: str) -> ArchSummary:
        for s in self.summary():
            if s.arch == arch:
                return s
        raise KeyError(arch)

    def to_json(self, timing: bool = True) -> dict:
        """``timing=False`` drops run metadata (wall times, cells executed) for comparisons."""
        cells = [c.to_json() for c in self.cells]
        prov = dict(self.provenance)
        if not timing:
            for c in cells:
                c.pop("wall_time")
            prov.pop("wall_time", None)
            prov.pop("cells_run", None)
        return {
            "cells": cells,
            "summary": [dataclasses.asdict(s) for s in self.summary()],
            "provenance": prov,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BenchmarkReport":
        return cls([Cell(**c) for c in obj.get("cells", [])], obj.get("provenance", {}))


def load_report(path) -> BenchmarkReport:
    """Read a report from JSON, or from CSV (cells only)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".csv":
        return report_from_csv(text)
    return BenchmarkReport.from_json(json.loads(text))


def report_from_csv(text: str) -> BenchmarkReport:
    rows = list(csv.DictReader(io.StringIO(text)))
    return BenchmarkReport([Cell(r["arch"], float(r["lr"]), int(r["seed"]), float(r["accuracy"])) for r in rows])


def emit_report(report: BenchmarkReport, fmt: str, path=None) -> str:
    """Render as csv (one row per cell), markdown (one row per architecture) or json."""
    fmt = {"md": "markdown"}.get(fmt, fmt)
    if fmt not in REPORT_FORMATS:
        raise InvalidConfigError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arch", "lr", "seed", "accuracy"])
        for c in report.cells:
            w.writerow([c.arch, repr(c.lr), c.seed, repr(c.accuracy)])
        text = buf.getvalue()
    elif fmt == "json":
        text = json.dumps(report.to_json(), indent=2) + "\n"
    else:
        lines = ["| Architecture | best lr | accuracy (%) | std | seeds |", "|---|---|---|---|---|"]
        summary = report.summary()
        top = max((s.mean for s in summary), default=None)
        for s in summary:
            cols = [s.arch, f"{s.best_lr:g}", f"{100 * s.mean:.1f}", f"{100 * s.std:.1f}", str(s.seeds)]
            if s.mean == top:
                cols = [f"**{c}**" for c in cols]
            lines.append("| " + " | ".join(cols) + " |")
        text = "\n".join(lines) + "\n"
    if path is not None:
        _atomic_write(Path(path), text)
    return text


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def cell_job(grid: GridSpec, arch: str, lr: float, seed: int, val_path: str) -> dict:
    """Everything a worker needs to run one cell, as plain JSON."""
    model = {**grid.model, **grid.arch_overrides(arch), "seed": seed}
    tr = {**grid.train, "steps": grid.steps, "lr": lr, "seed": seed, "data": grid.data.to_json(), "val_path": val_path}
    return {"arch": arch, "lr": lr, "seed": seed, "model": model, "train": tr}


def cell_key(job: dict, val_checksum: str) -> str:
    ident = dict(job)
    ident["train"] = {k: v for k, v in job["train"].items() if k != "val_path"}
    ident["val_checksum"] = val_checksum
    return hashlib.sha256(_canonical(ident).encode()).hexdigest()[:24]


def run_cell(job: dict) -> Cell:
    t0 = time.perf_counter()
    try:
        tc = TrainConfig(**job["train"])
        mc = model_config_for(tc.data, **job["model"])
        result = train(mc, tc)
        return Cell(job["arch"], job["lr"], job["seed"], result.accuracy, log=result.log, wall_time=time.perf_counter() - t0)
    except (TrainingDivergenceError, FloatingPointError, JointRecallError, ValueError, RuntimeError) as exc:
        diag = f"{type(exc).__name__}: {exc}"
        if not isinstance(exc, JointRecallError):
            diag += " | " + traceback.format_exc(limit=3).replace("\n", " ")
        return Cell(
            job["arch"], job["lr"], job["seed"], 0.0, status="failed", diagnostic=diag,
            log=getattr(exc, "log", []), wall_time=time.perf_counter() - t0,
        )


def validation_set(grid: GridSpec, ledger: Path) -> tuple[Path, str]:
    cfg = dataclasses.replace(grid.data, seed=grid.val_seed, count=grid.val_count)
    path = ledger / f"val-{hashlib.sha256(_canonical(cfg.to_json()).encode()).hexdigest()[:16]}.jsonl"
    if not path.exists():
        generate_dataset(cfg, path)
    return path, file_checksum(path)


def run_grid(grid: GridSpec, ledger_dir, jobs: int = 1, progress=None) -> BenchmarkReport:
    """Run every missing cell, then assemble the report from the ledger.

    ``progress(cell, cached)`` is called once per cell.
    """
    ledger = Path(ledger_dir)
    (ledger / "cells").mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    val_path, checksum = validation_set(grid, ledger)
    todo, keys = [], []
    for arch, lr, seed in grid.cells():
        job = cell_job(grid, arch, lr, seed, str(val_path))
        key = cell_key(job, checksum)
        keys.append(key)
        if (ledger / "cells" / f"{key}.json").exists():
            if progress:
                progress(_read_cell(ledger, key), True)
        else:
            todo.append((key, job))

    def finish(key, cell):
        _atomic_write(ledger / "cells" / f"{key}.json", json.dumps(cell.to_json()))
        if progress:
            progress(cell, False)

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(key, pool.submit(run_cell, job)) for key, job in todo]
            for key, fut in futures:
                finish(key, fut.result())
    else:
        for key, job in todo:
            finish(key, run_cell(job))
    cells = [_read_cell(ledger, key) for key in keys]
    provenance = {
        "dataset_checksum": checksum,
        "grid": grid.to_json(),
        "cells_run": len(todo),
        "wall_time": time.perf_counter() - t0,
    }
    return BenchmarkReport(cells, provenance)


def _read_cell(ledger: Path, key: str) -> Cell:
    with open(ledger / "cells" / f"{key}.json") as fh:
        return Cell(**json.load(fh))


def aggregate_from_csv(text: str) -> list[ArchSummary]:
    """Recompute the per-architecture summary from csv cells alone."""
    return report_from_csv(text).summary()


def summary_matches(a: list[ArchSummary], b: list[ArchSummary]) -> bool:
    return [dataclasses.astuple(x) for x in a] == [dataclasses.astuple(x) for x in b]


__all__ = [
    "ARCHITECTURES",
    "ArchSummary",
    "BenchmarkReport",
    "Cell",
    "GridSpec",
    "emit_report",
    "load_report",
    "run_grid",
]

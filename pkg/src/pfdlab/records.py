"""On-disk records of a run: snapshot CSVs, the metrics table and the manifest."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

SNAPSHOT_HEADER = ["tau", "particle", "x0", "x1"]
METRICS_HEADER = ["method", "tau", "sw_dist", "kl", "occupancy", "collapsed"]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_snapshot(path, tau: int, positions) -> Path:
    """One row per particle; floats are written with ``repr`` so they round-trip exactly."""
    x = np.asarray(positions, dtype=float).reshape(-1, 2)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SNAPSHOT_HEADER)
        for i, (a, b) in enumerate(x):
            w.writerow([int(tau), i, _fmt(a), _fmt(b)])
    return path


def read_snapshot(path) -> Tuple[int, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != SNAPSHOT_HEADER:
        raise ValueError(f"{path}: expected header {','.join(SNAPSHOT_HEADER)}")
    body = rows[1:]
    if not body:
        return -1, np.zeros((0, 2))
    taus = {int(r[0]) for r in body}
    if len(taus) != 1:
        raise ValueError(f"{path}: mixes several tau values")
    idx = np.array([int(r[1]) for r in body])
    if not np.array_equal(idx, np.arange(len(body))):
        raise ValueError(f"{path}: particle indices must be 0..n-1 in order")
    return taus.pop(), np.array([[float(r[2]), float(r[3])] for r in body])


@dataclass
class MetricsRow:
    method: str
    tau: int
    sw_dist: float
    kl: float
    occupancy: float
    collapsed: bool

    def cells(self) -> List[str]:
        return [self.method, str(self.tau), _fmt(self.sw_dist), _fmt(self.kl), _fmt(self.occupancy), str(self.collapsed).lower()]


def write_metrics(path, rows: List[MetricsRow], extra_columns: Optional[Dict[str, List[str]]] = None) -> Path:
    path = Path(path)
    extra_columns = extra_columns or {}
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER + list(extra_columns))
        for i, r in enumerate(rows):
            w.writerow(r.cells() + [col[i] for col in extra_columns.values()])
    return path


def read_metrics(path) -> List[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for r in reader:
            r = dict(r)
            r["tau"] = int(r["tau"])
            for k in ("sw_dist", "kl", "occupancy"):
                r[k] = float(r[k])
            r["collapsed"] = r["collapsed"] == "true"
            out.append(r)
    return out


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class MethodRecord:
    status: str = "ok"  # or "failed"
    snapshots: List[str] = field(default_factory=list)
    plots: List[str] = field(default_factory=list)
    seconds: float = 0.0
    error: Optional[str] = None


@dataclass
class RunManifest:
    config_hash: str
    version: str
    seed: int
    methods: Dict[str, MethodRecord] = field(default_factory=dict)
    metrics_file: Optional[str] = None
    extra_files: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    status: str = "ok"
    file_hashes: Dict[str, str] = field(default_factory=dict)

    def files(self) -> List[str]:
        out = []
        for rec in self.methods.values():
            out += rec.snapshots + rec.plots
        if self.metrics_file:
            out.append(self.metrics_file)
        return out + list(self.extra_files)

    def finalize(self, root) -> None:
        """Hash every listed file (paths are relative to ``root``); raises if one is missing."""
        root = Path(root)
        self.file_hashes = {}
        for rel in self.files():
            p = root / rel
            if not p.is_file():
                raise FileNotFoundError(f"manifest lists {rel} but it does not exist")
            self.file_hashes[rel] = file_sha256(p)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        methods = {k: MethodRecord(**v) for k, v in data.pop("methods").items()}
        return cls(methods=methods, **data)

"""Circumference-path features on registered meshes."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import SpecError, TopologyMismatchError
from .fileio import atomic_write_text, read_json, write_json


@dataclass(frozen=True)
class Path:
    vertices: tuple
    closed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple(int(v) for v in self.vertices))
        need = 3 if self.closed else 2
        if len(set(self.vertices)) < need:
            kind = "closed loop" if self.closed else "open chain"
            raise SpecError(f"{kind} needs at least {need} distinct vertices, got {len(set(self.vertices))}")


@dataclass(frozen=True)
class MeasurementSpec:
    """One anthropometric target and the surface paths that feed its regressor."""

    name: str
    paths: tuple
    limit_mm: Optional[float] = None

    def __post_init__(self):
        paths = tuple(p if isinstance(p, Path) else Path(*p) if isinstance(p, tuple) else Path(p)
                      for p in self.paths)
        if not 1 <= len(paths) <= 9:
            raise SpecError(f"{self.name}: expected 1..9 paths, got {len(paths)}")
        object.__setattr__(self, "paths", paths)

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    def subset(self, indices: Sequence[int]) -> "MeasurementSpec":
        return MeasurementSpec(self.name, tuple(self.paths[i] for i in indices), self.limit_mm)


def path_length(mesh, path, closed: bool = True) -> float:
    """Polyline length through the listed vertices (plus the closing segment)."""
    idx = np.asarray(path, dtype=np.int64)
    need = 3 if closed else 2
    if len(idx) < need:
        raise SpecError(f"path needs at least {need} vertices, got {len(idx)}")
    verts = mesh.vertices if hasattr(mesh, "vertices") else np.asarray(mesh)
    if idx.min() < 0 or idx.max() >= len(verts):
        raise TopologyMismatchError(
            f"path vertex index {int(idx.max())} out of range for mesh with {len(verts)} vertices")
    p = verts[idx]
    if closed:
        p = np.vstack([p, p[:1]])
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def extract_features(mesh, spec: MeasurementSpec) -> np.ndarray:
    """Lengths of every path of ``spec`` on ``mesh``, in spec order (meters)."""
    return np.array([path_length(mesh, p.vertices, p.closed) for p in spec.paths])


def specs_to_json(specs: Sequence[MeasurementSpec]) -> list:
    return [
        {
            "name": s.name,
            "limit_mm": s.limit_mm,
            "paths": [{"closed": p.closed, "vertices": list(p.vertices)} for p in s.paths],
        }
        for s in specs
    ]


def specs_from_json(obj) -> List[MeasurementSpec]:
    out = []
    for item in obj:
        paths = tuple(Path(tuple(p["vertices"]), bool(p.get("closed", True))) for p in item["paths"])
        out.append(MeasurementSpec(item["name"], paths, item.get("limit_mm")))
    return out


def save_paths(specs, path) -> None:
    write_json(path, specs_to_json(specs))


def load_paths(path) -> List[MeasurementSpec]:
    return specs_from_json(read_json(path))


def features_csv(rows) -> str:
    """``rows``: iterable of ``(subject_id, measurement, features)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "measurement", "c_index", "length_m"])
    for sid, name, feats in rows:
        for c, val in enumerate(feats):
            w.writerow([sid, name, c, repr(float(val))])
    return buf.getvalue()


def write_features_csv(rows, path) -> None:
    atomic_write_text(path, features_csv(rows))


def read_features_csv(path) -> dict:
    """Inverse of :func:`write_features_csv`: ``{subject: {measurement: array}}``."""
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            per = out.setdefault(row["subject_id"], {}).setdefault(row["measurement"], {})
            per[int(row["c_index"])] = float(row["length_m"])
    return {sid: {m: np.array([v[k] for k in sorted(v)]) for m, v in d.items()}
            for sid, d in out.items()}

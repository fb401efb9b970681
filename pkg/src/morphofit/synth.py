"""Synthetic ground truth: bodies sampled from the template, tape measurements, degraded scans."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import OracleError, ParameterError, RecipeError
from .fileio import atomic_write_text, write_json
from .mesh import TriMesh, save_obj
from .template import (ParametricTemplate, PoseParams, ShapeParams, abduction_pose, instantiate)

DEFAULT_HOLES = (("l_sole", 0.05), ("r_sole", 0.05), ("head_top", 0.06))


@dataclass(frozen=True)
class CutPlane:
    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0:
            raise OracleError("cutting plane needs a nonzero normal")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64))


@dataclass(frozen=True)
class TapeStation:
    """Where the tape goes: a band of template rings on one body part.

    Each ring defines a cutting plane (its least-squares plane through the
    ring centroid), so the tape follows the local limb direction and moves
    rigidly with the body. ``mode`` is ``"at"`` (through the centre ring),
    ``"min"`` or ``"max"`` (extremal girth over planes swept across the band,
    blending neighbouring ring planes, the way a tailor finds the waist or the
    fullest hip).
    """

    name: str
    rings: np.ndarray          # (B, N) vertex ids, ordered along the limb
    vertex_mask: np.ndarray    # (V,) body-part filter
    mode: str = "at"
    substeps: int = 4

    def planes(self, vertices: np.ndarray):
        pts = vertices[self.rings]
        cent = pts.mean(axis=1)
        normals = []
        for c, p in zip(cent, pts):
            n = np.linalg.svd(p - c, full_matrices=False)[2][2]
            normals.append(n)
        normals = np.array(normals)
        # orient consistently along the band
        axis = cent[-1] - cent[0]
        normals *= np.where(normals @ axis < 0, -1.0, 1.0)[:, None]
        if self.mode == "at":
            mid = len(cent) // 2
            return [CutPlane(cent[mid], normals[mid])]
        s = np.linspace(0, len(cent) - 1, self.substeps * (len(cent) - 1) + 1)
        k = np.minimum(np.floor(s).astype(int), len(cent) - 2)
        f = (s - k)[:, None]
        c = (1 - f) * cent[k] + f * cent[k + 1]
        n = (1 - f) * normals[k] + f * normals[k + 1]
        return [CutPlane(ci, ni) for ci, ni in zip(c, n)]


def resolve_station(template: ParametricTemplate, name: str) -> TapeStation:
    st = template.station(name)
    ids = template.rings[st.part][st.ring - st.band: st.ring + st.band + 1]
    return TapeStation(name, np.asarray(ids), template.part_mask(st.part), st.mode)


def cross_section(mesh: TriMesh, plane: CutPlane, vertex_mask=None, tol: float = 1e-12) -> np.ndarray:
    """Points where mesh edges cross ``plane``, plus vertices lying on it."""
    v = mesh.vertices
    d = (v - plane.point) @ plane.normal
    scale = max(float(np.abs(v).max()), 1.0) if len(v) else 1.0
    on = np.abs(d) <= tol * scale
    e = mesh.edges
    sel = (d[e[:, 0]] * d[e[:, 1]] < 0) & ~on[e[:, 0]] & ~on[e[:, 1]]
    if vertex_mask is not None:
        vertex_mask = np.asarray(vertex_mask, dtype=bool)
        sel &= vertex_mask[e[:, 0]] & vertex_mask[e[:, 1]]
        on &= vertex_mask
    a, b = e[sel, 0], e[sel, 1]
    t = (d[a] / (d[a] - d[b]))[:, None]
    pts = v[a] + t * (v[b] - v[a])
    return np.vstack([pts, v[on]])


def hull_perimeter(points2d: np.ndarray) -> float:
    """Perimeter of the 2D convex hull (a taut tape around the points)."""
    p = np.asarray(points2d, dtype=np.float64)
    if len(p) < 2:
        return 0.0
    try:
        return float(ConvexHull(p).area)  # in 2D qhull's "area" is the perimeter
    except QhullError:
        # collinear: the hull is a doubled segment
        c = p - p.mean(axis=0)
        _, _, vt = np.linalg.svd(c, full_matrices=False)
        proj = c @ vt[0]
        return float(2 * np.ptp(proj))


def plane_girth(mesh: TriMesh, plane: CutPlane, vertex_mask=None) -> float:
    pts = cross_section(mesh, plane, vertex_mask)
    if len(pts) == 0:
        raise OracleError("cutting plane misses the mesh")
    n = plane.normal
    u = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    w = np.cross(n, u)
    rel = pts - plane.point
    return hull_perimeter(np.column_stack([rel @ u, rel @ w]))


def tape_oracle(mesh: TriMesh, station: Union[str, TapeStation, CutPlane],
                template: Optional[ParametricTemplate] = None, vertex_mask=None) -> float:
    """Tape-measure girth in the mesh's length unit.

    ``station`` is a template station name (requires ``template``), a resolved
    :class:`TapeStation`, or an explicit :class:`CutPlane` (with an optional
    vertex filter).
    """
    if isinstance(station, str):
        if template is None:
            raise OracleError(f"station {station!r} needs a template to resolve")
        try:
            station = resolve_station(template, station)
        except KeyError:
            raise OracleError(f"unknown station {station!r}") from None
    if isinstance(station, CutPlane):
        return plane_girth(mesh, station, vertex_mask)
    if mesh.n_vertices != len(station.vertex_mask):
        raise OracleError("mesh does not share the template topology")
    vals = [plane_girth(mesh, p, station.vertex_mask) for p in station.planes(mesh.vertices)]
    if station.mode == "min":
        return float(min(vals))
    if station.mode == "max":
        return float(max(vals))
    return float(vals[0])


# ---------------------------------------------------------------------------
# subjects


@dataclass
class SyntheticSubject:
    id: str
    shape: ShapeParams
    pose: PoseParams
    true_mesh: TriMesh
    truths: Dict[str, float]
    arm_angle: float = float("nan")  # absolute shoulder abduction, radians


def make_subject(template: ParametricTemplate, subject_id: str, shape: ShapeParams,
                 arm_delta: float = 0.0) -> SyntheticSubject:
    pose = abduction_pose(template, arm_delta)
    mesh = instantiate(template, shape, pose)
    truths = {s.name: tape_oracle(mesh, resolve_station(template, s.name)) for s in template.paths}
    return SyntheticSubject(subject_id, shape, pose, mesh, truths,
                            float(template.arm_abduction + arm_delta))


def sample_body(template: ParametricTemplate, seed: int, beta_sigma: float = 1.0,
                arm_jitter: float = 0.1, subject_id: Optional[str] = None) -> SyntheticSubject:
    """Random body: ``beta_k ~ N(0, (beta_sigma * mode_std_k)^2)``, arms jittered by up to ``arm_jitter`` rad."""
    if not beta_sigma > 0:
        raise ParameterError("beta_sigma must be > 0")
    rng = np.random.default_rng(seed)
    beta = rng.normal(size=template.n_modes) * beta_sigma * template.mode_std
    delta = rng.uniform(-arm_jitter, arm_jitter) if arm_jitter > 0 else 0.0
    return make_subject(template, subject_id or f"seed{seed}", ShapeParams(beta), delta)


# ---------------------------------------------------------------------------
# scans


@dataclass(frozen=True)
class ScanRecipe:
    """How a true body becomes a scan.

    ``holes`` pairs a centre (region name, vertex id or 3D point) with a
    radius in meters. ``yaw``/``translation`` of ``None`` draw a random rigid
    motion from the scan seed (yaw within ``max_yaw``, translation norm within
    ``max_translation``). ``unit_scale`` is applied last, e.g. 1000 for mm.
    """

    noise_sigma: float = 0.002
    holes: tuple = DEFAULT_HOLES
    subdivisions: int = 1
    yaw: Optional[float] = 0.0
    translation: Optional[tuple] = (0.0, 0.0, 0.0)
    unit_scale: float = 1.0
    max_yaw: float = np.pi
    max_translation: float = 0.5

    def __post_init__(self):
        if not self.noise_sigma >= 0:
            raise RecipeError("noise_sigma must be >= 0")
        holes = tuple((c if isinstance(c, str) else (int(c) if np.ndim(c) == 0 else tuple(map(float, c))),
                       float(r)) for c, r in self.holes)
        if any(not r > 0 for _, r in holes):
            raise RecipeError("hole radii must be > 0")
        if self.subdivisions < 0:
            raise RecipeError("subdivisions must be >= 0")
        if not self.unit_scale > 0:
            raise RecipeError("unit_scale must be > 0")
        if self.translation is not None:
            object.__setattr__(self, "translation", tuple(float(x) for x in self.translation))
        object.__setattr__(self, "holes", holes)

    @classmethod
    def identity(cls) -> "ScanRecipe":
        return cls(noise_sigma=0.0, holes=(), subdivisions=0)

    def to_json(self) -> dict:
        d = asdict(self)
        d["holes"] = [[c if not isinstance(c, tuple) else list(c), r] for c, r in self.holes]
        return d

    @classmethod
    def from_json(cls, obj) -> "ScanRecipe":
        obj = dict(obj)
        obj["holes"] = tuple((c if not isinstance(c, list) else tuple(c), r) for c, r in obj.get("holes", ()))
        if obj.get("translation") is not None:
            obj["translation"] = tuple(obj["translation"])
        return cls(**obj)


def subdivide(mesh: TriMesh) -> TriMesh:
    """One round of midpoint subdivision (every triangle into four)."""
    v, f = mesh.vertices, mesh.faces
    e = mesh.edges
    nv = len(v)
    mid = nv + np.arange(len(e))
    key = {(int(a), int(b)): int(m) for (a, b), m in zip(e, mid)}

    def m(a, b):
        return np.array([key[(min(x, y), max(x, y))] for x, y in zip(a, b)], dtype=np.int64)

    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    ab, bc, ca = m(a, b), m(b, c), m(c, a)
    faces = np.vstack([np.column_stack(t) for t in
                       ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))])
    verts = np.vstack([v, 0.5 * (v[e[:, 0]] + v[e[:, 1]])])
    return TriMesh(verts, faces)


def region_center(mesh: TriMesh, name: str, template: Optional[ParametricTemplate] = None) -> np.ndarray:
    """Named hole centres: ``l_sole``/``r_sole`` (under each foot) and ``head_top``."""
    v = mesh.vertices
    if name == "head_top":
        return v[np.argmax(v[:, 2])]
    if name in ("l_sole", "r_sole"):
        if template is not None:
            sel = v[template.part_mask(name[0] + "_foot")]
        else:
            side = -1 if name[0] == "l" else 1
            low = v[:, 2] < v[:, 2].min() + 0.05 * np.ptp(v[:, 2])
            sel = v[low & (np.sign(v[:, 0]) == side)]
        if len(sel) == 0:
            raise RecipeError(f"cannot locate region {name!r}")
        c = sel.mean(axis=0)
        c[2] = sel[:, 2].min()
        return c
    raise RecipeError(f"unknown hole region {name!r}")


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def scan_pose(recipe: ScanRecipe, seed: int) -> Tuple[float, np.ndarray]:
    """Yaw (radians) and translation (meters) that ``simulate_scan`` applies for ``seed``."""
    rng = np.random.default_rng([int(seed), 1])
    yaw = float(recipe.yaw) if recipe.yaw is not None else rng.uniform(-recipe.max_yaw, recipe.max_yaw)
    if recipe.translation is not None:
        t = np.asarray(recipe.translation, dtype=np.float64)
    else:
        d = rng.normal(size=3)
        t = d / np.linalg.norm(d) * recipe.max_translation * rng.uniform() ** (1 / 3)
    return yaw, t


def apply_scan_pose(points, recipe: ScanRecipe, seed: int) -> np.ndarray:
    """Map true-body coordinates into the scan frame: ``unit_scale * (Rz(yaw) p + t)``."""
    yaw, t = scan_pose(recipe, seed)
    p = np.asarray(points, dtype=np.float64)
    if yaw != 0.0:
        p = p @ _rot_z(yaw).T
    return (p + t) * recipe.unit_scale


def simulate_scan(subject: SyntheticSubject, recipe: ScanRecipe = ScanRecipe(), seed: int = 0,
                  template: Optional[ParametricTemplate] = None) -> TriMesh:
    """Holes, normal noise, rigid motion and unit change applied to ``subject.true_mesh``."""
    rng = np.random.default_rng(seed)
    true = subject.true_mesh
    centers = []
    for c, r in recipe.holes:
        if isinstance(c, str):
            p = region_center(true, c, template)
        elif isinstance(c, int):
            p = true.vertices[c]
        else:
            p = np.asarray(c, dtype=np.float64)
        centers.append((p, r))
    mesh = true
    for _ in range(recipe.subdivisions):
        mesh = subdivide(mesh)
    keep = np.ones(mesh.n_faces, dtype=bool)
    if centers:
        cen = mesh.vertices[mesh.faces].mean(axis=1)
        for p, r in centers:
            keep &= np.linalg.norm(cen - p, axis=1) > r
    if keep.mean() < 0.1:
        raise RecipeError(f"holes remove {100 * (1 - keep.mean()):.1f}% of faces (limit 90%)")
    v = mesh.vertices
    if recipe.noise_sigma > 0:
        v = v + rng.normal(scale=recipe.noise_sigma, size=len(v))[:, None] * mesh.vertex_normals
    v = apply_scan_pose(v, recipe, seed)
    out = TriMesh(v, mesh.faces).submesh(keep) if not keep.all() else TriMesh(v, mesh.faces)
    return out


# ---------------------------------------------------------------------------
# cohort directories


def subject_seed(seed: int, index: int, stream: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index), int(stream)])


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def cohort_subject(template: ParametricTemplate, seed: int, index: int, beta_sigma: float = 1.0,
                   arm_jitter: float = 0.1) -> SyntheticSubject:
    return sample_body(template, _int_seed(subject_seed(seed, index, 0)), beta_sigma, arm_jitter,
                       subject_id=f"S{index:04d}")


def scan_seed(seed: int, index: int) -> int:
    return _int_seed(subject_seed(seed, index, 1))


def cohort_scan(template: ParametricTemplate, subject: SyntheticSubject, seed: int, index: int,
                recipe: ScanRecipe) -> TriMesh:
    return simulate_scan(subject, recipe, scan_seed(seed, index), template)


def subjects_csv(subjects: Sequence[SyntheticSubject], names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n_modes = len(subjects[0].shape.beta) if subjects else 0
    w.writerow(["id"] + [f"beta_{k}" for k in range(n_modes)] + ["arm_angle_rad"]
               + [f"{n}_mm" for n in names])
    for s in subjects:
        w.writerow([s.id] + [repr(float(b)) for b in s.shape.beta] + [repr(s.arm_angle)]
                   + [repr(1000.0 * s.truths[n]) for n in names])
    return buf.getvalue()


def read_subjects_csv(path) -> Dict[str, Dict[str, float]]:
    """``{subject_id: {measurement: truth_mm}}``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["id"]] = {k[:-3]: float(v) for k, v in row.items() if k.endswith("_mm")}
    return out


def write_cohort(directory, template: ParametricTemplate, n_subjects: int, seed: int = 0,
                 recipe: ScanRecipe = ScanRecipe(), beta_sigma: float = 1.0, arm_jitter: float = 0.1,
                 indices: Optional[Sequence[int]] = None) -> list:
    """Write ``subjects.csv``, ``recipe.json`` and ``<id>/true.obj``, ``<id>/scan.obj``."""
    os.makedirs(directory, exist_ok=True)
    subjects = []
    for i in (range(n_subjects) if indices is None else indices):
        s = cohort_subject(template, seed, i, beta_sigma, arm_jitter)
        scan = cohort_scan(template, s, seed, i, recipe)
        d = os.path.join(directory, s.id)
        os.makedirs(d, exist_ok=True)
        save_obj(s.true_mesh, os.path.join(d, "true.obj"))
        save_obj(scan, os.path.join(d, "scan.obj"))
        subjects.append(s)
    names = [p.name for p in template.paths]
    atomic_write_text(os.path.join(directory, "subjects.csv"), subjects_csv(subjects, names))
    write_json(os.path.join(directory, "recipe.json"), {
        "seed": seed, "beta_sigma": beta_sigma, "arm_jitter": arm_jitter,
        "recipe": recipe.to_json()})
    return subjects

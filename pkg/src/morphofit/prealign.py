"""Scan normalization and template initialization before non-rigid ICP."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import AlignmentError, ParameterError
from .fileio import write_json
from .mesh import TriMesh
from .template import (ParametricTemplate, ShapeParams, abduction_pose, instantiate,
                       mesh_height)

DEFAULT_ARM_CANDIDATES = tuple(np.linspace(0.0, 0.5, 11))


@dataclass(frozen=True)
class AlignmentReport:
    """``normalized = Rz(applied_yaw) @ (applied_scale * raw) + applied_translation``."""

    applied_scale: float
    applied_yaw: float
    applied_translation: tuple
    estimated_beta1: float = float("nan")
    estimated_arm_angle: float = float("nan")

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) * self.applied_scale
        return p @ _rot_z(self.applied_yaw).T + np.asarray(self.applied_translation)

    def to_json(self) -> dict:
        d = asdict(self)
        d["applied_translation"] = [float(x) for x in self.applied_translation]
        return d

    def save(self, path) -> None:
        write_json(path, self.to_json())


@dataclass(frozen=True)
class HeightModel:
    slope: float
    intercept: float

    def estimate_beta1(self, height: float) -> float:
        return self.slope * height + self.intercept


def _rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def unit_scale(height: float) -> float:
    """Scale factor to meters from the raw bounding-box height."""
    if height > 100.0:
        return 1e-3
    if height > 3.0:
        return 1e-2
    return 1.0


def facing_yaw(points: np.ndarray) -> float:
    """Yaw that turns a standing body to face +Y.

    The widest horizontal direction (arms and shoulders) is taken as the
    left-right axis; feet protrude in front of the shins, which fixes the sign.
    """
    z = points[:, 2]
    zmin, h = z.min(), np.ptp(z)
    xy = points[:, :2] - points[:, :2].mean(axis=0)
    cov = xy.T @ xy
    w, vec = np.linalg.eigh(cov)
    lateral = vec[:, 1]
    depth = np.array([-lateral[1], lateral[0]])
    feet = (z - zmin) < 0.06 * h
    shins = ((z - zmin) > 0.12 * h) & ((z - zmin) < 0.30 * h)
    if feet.sum() == 0 or shins.sum() == 0:
        raise AlignmentError("cannot locate feet/shins to determine facing direction")
    asym = (points[feet, :2] @ depth).mean() - (points[shins, :2] @ depth).mean()
    if asym < 0:
        depth = -depth
    # rotate ``depth`` onto +Y
    return float(np.arctan2(depth[0], depth[1]))


def normalize_scan(scan: TriMesh, detect_facing: bool = True) -> Tuple[TriMesh, AlignmentReport]:
    """Meters, facing +Y, lowest point on z = 0, horizontal box centre at the origin."""
    v = scan.vertices
    if len(v) == 0:
        raise AlignmentError("empty scan")
    extent = np.ptp(v, axis=0)
    if not np.all(np.isfinite(extent)) or extent[2] <= 0 or np.all(extent[:2] <= 0):
        raise AlignmentError("degenerate scan bounding box")
    scale = unit_scale(float(extent[2]))
    p = v * scale
    yaw = facing_yaw(p) if detect_facing else 0.0
    if abs(yaw) < 1e-12:
        yaw = 0.0
    p = p @ _rot_z(yaw).T
    lo, hi = p.min(axis=0), p.max(axis=0)
    t = np.array([-(lo[0] + hi[0]) / 2, -(lo[1] + hi[1]) / 2, -lo[2]])
    t[np.abs(t) < 1e-15] = 0.0
    p = p + t
    report = AlignmentReport(scale, yaw, tuple(float(x) for x in t))
    return scan.with_vertices(p), report


def ground_and_center(mesh: TriMesh) -> TriMesh:
    """Translate so the lowest point is on z = 0 and the box centre is at x = y = 0."""
    v = mesh.vertices
    lo, hi = v.min(axis=0), v.max(axis=0)
    return mesh.with_vertices(v - np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, lo[2]]))


def fit_height_model(pairs: Sequence[Tuple[float, float]]) -> HeightModel:
    """Least-squares line ``beta1 = slope * height + intercept``."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if len(arr) < 2 or np.ptp(arr[:, 0]) == 0:
        raise ParameterError("height model needs at least two distinct heights")
    A = np.column_stack([arr[:, 0], np.ones(len(arr))])
    (slope, intercept), *_ = np.linalg.lstsq(A, arr[:, 1], rcond=None)
    return HeightModel(float(slope), float(intercept))


def template_height_model(template: ParametricTemplate, n: int = 41,
                          span: float = 3.0) -> HeightModel:
    """Height model from the template itself: sweep beta1, measure stature."""
    sd = template.mode_std[0]
    betas = np.linspace(-span * sd, span * sd, n)
    pairs = []
    for b in betas:
        shape = np.zeros(template.n_modes)
        shape[0] = b
        pairs.append((mesh_height(instantiate(template, ShapeParams(shape))), b))
    return fit_height_model(pairs)


def posed_template(template: ParametricTemplate, shape: ShapeParams, arm_angle: float) -> TriMesh:
    """Template at ``shape`` with both shoulders at absolute abduction ``arm_angle``."""
    pose = abduction_pose(template, arm_angle - template.arm_abduction)
    return ground_and_center(instantiate(template, shape, pose))


def init_arm_angle(template: ParametricTemplate, shape: ShapeParams, scan: TriMesh,
                   candidates: Sequence[float] = DEFAULT_ARM_CANDIDATES) -> float:
    """Arm abduction (radians from vertical) whose template best overlays ``scan``.

    Score is the mean template-vertex-to-scan-surface distance; ties go to the
    smallest angle.
    """
    cands = [float(c) for c in candidates]
    if not cands:
        raise ParameterError("empty arm-angle candidate list")
    if len(cands) == 1:
        return cands[0]
    scores = arm_angle_scores(template, shape, scan, cands)
    best = min(scores)
    return min(c for c, s in zip(cands, scores) if s == best)


def arm_angle_scores(template, shape, scan, candidates) -> list:
    idx = scan.surface_index if scan.n_faces else None
    scores = []
    for c in candidates:
        m = posed_template(template, shape, c)
        if idx is not None:
            _, _, d, _ = idx.query(m.vertices)
        else:
            from .mesh import nearest_vertices
            _, _, d = nearest_vertices(m.vertices, scan)
        scores.append(float(np.mean(d)))
    return scores


def fit_shape(template: ParametricTemplate, scan: TriMesh, shape: ShapeParams, arm_angle: float,
              iterations: int = 12, prior: float = 1e-4, gate: float = 0.03):
    """Closest-point fit of every shape coefficient, the arm angle and an offset.

    Gauss-Newton on ``posed_template(beta, angle) + t`` against the scan
    surface, re-linearized every iteration. Matches farther than ``gate``
    meters or with normals more than 60 degrees apart are dropped; ``prior``
    (m^2 per squared standard deviation) keeps unobserved modes near zero.
    Returns ``(mesh, shape, arm_angle)``.
    """
    from .nricp import NricpConfig, find_correspondences

    cfg = NricpConfig(distance_gate=None)
    K = template.n_modes
    std = np.maximum(template.mode_std, 1e-12)
    beta = np.array(shape.beta, dtype=np.float64)
    angle = float(arm_angle)
    offset = np.zeros(3)
    step_a = 1e-3
    for _ in range(iterations):
        base = posed_template(template, ShapeParams(beta), angle).vertices
        cols = []
        for k in range(K):
            b = beta.copy()
            b[k] += std[k]
            cols.append((posed_template(template, ShapeParams(b), angle).vertices - base) / std[k])
        cols.append((posed_template(template, ShapeParams(beta), angle + step_a).vertices - base) / step_a)
        cols += [np.broadcast_to(e, base.shape) for e in np.eye(3)]
        J = np.stack(cols, axis=-1)                      # (n, 3, K + 4)
        current = base + offset
        corr = find_correspondences(template.canonical.with_vertices(current), scan, cfg)
        w = (corr.weights > 0) & (corr.distances < gate)
        if w.sum() < K + 4:
            break
        A = J[w].reshape(-1, K + 4)
        r = (corr.targets[w] - current[w]).ravel()
        reg = np.zeros(K + 4)
        reg[:K] = prior / std ** 2
        AtA = A.T @ A + np.diag(reg)
        rhs = A.T @ r
        rhs[:K] -= reg[:K] * beta
        delta = np.linalg.solve(AtA, rhs)
        beta = beta + delta[:K]
        angle = float(np.clip(angle + delta[K], 0.0, np.pi / 2))
        offset = offset + delta[K + 1:]
        if np.max(np.abs(delta[:K]) / std) < 1e-3 and abs(delta[K]) < 1e-4:
            break
    mesh = posed_template(template, ShapeParams(beta), angle)
    return mesh.with_vertices(mesh.vertices + offset), ShapeParams(beta), angle


def initialize_template(template: ParametricTemplate, scan: TriMesh, height_model: HeightModel,
                        candidates: Sequence[float] = DEFAULT_ARM_CANDIDATES, shape_fit: bool = True):
    """Stature from scan height, then the best arm angle, then (optionally) a shape fit.

    ``scan`` must already be normalized. The template's own abduction is
    always among the candidates. Returns ``(mesh, shape, arm_angle)``.
    """
    beta = np.zeros(template.n_modes)
    beta[0] = height_model.estimate_beta1(mesh_height(scan))
    shape = ShapeParams(beta)
    cands = sorted({float(c) for c in candidates} | {float(template.arm_abduction)})
    angle = init_arm_angle(template, shape, scan, cands)
    if shape_fit:
        return fit_shape(template, scan, shape, angle)
    return posed_template(template, shape, angle), shape, angle

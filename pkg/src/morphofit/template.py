"""Deformable body template: mean mesh, PCA-style shape basis, skinned skeleton.

The SMPL assets used in the original work are not redistributable, so
:func:`generate_synthetic_template` builds a procedural humanoid with the same
``{T, S, theta}`` interface. Each body part is a closed tube of vertex rings;
rings double as circumference paths.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import GenerationError, ParameterError
from .fileio import read_array, read_json, write_array, write_json
from .measure import MeasurementSpec, Path, load_paths, save_paths
from .mesh import TriMesh, load_obj, save_obj

JOINT_NAMES = [
    "pelvis", "spine1", "spine2", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
]
JOINT_PARENTS = [-1, 0, 1, 2, 3, 2, 5, 6, 2, 8, 9, 0, 11, 12, 0, 14, 15]

# instructed pose (a convention, not measured): arms abducted 20 deg, ankles 30 cm apart
ARM_ABDUCTION = np.deg2rad(20.0)
ANKLE_HALF_SPAN = 0.15

# Table 1 style acceptance limits (mm) for the stations this template carries
DEFAULT_LIMITS_MM = {
    "NeckCirc": 6.0, "ChestCirc": 15.0, "NaturalWaistCirc": 12.0, "HipCirc": 12.0,
    "ThighCirc": 6.0, "KneeCirc": 4.0, "CalfCirc": 5.0, "AnkleCirc": 4.0,
    "BicepCirc": 6.0, "ElbowCirc": 4.0, "WristCirc": 5.0,
}


@dataclass(frozen=True)
class ShapeParams:
    beta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64).ravel()
        if not np.all(np.isfinite(b)):
            raise ParameterError("shape coefficients must be finite")
        object.__setattr__(self, "beta", b)

    @classmethod
    def zeros(cls, n: int) -> "ShapeParams":
        return cls(np.zeros(n))


@dataclass(frozen=True)
class PoseParams:
    theta: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.theta, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(t)):
            raise ParameterError("pose angles must be finite")
        object.__setattr__(self, "theta", t)

    @classmethod
    def zeros(cls, k: int = len(JOINT_NAMES)) -> "PoseParams":
        return cls(np.zeros((k, 3)))


@dataclass(frozen=True)
class Station:
    """Where a tape measurement is taken on the template.

    ``ring`` indexes the centre ring of ``part``; ``mode`` is ``"at"`` (cut
    through the centre ring), ``"min"`` or ``"max"`` (extremal girth across
    the neighbouring rings).
    """

    name: str
    part: str
    ring: int
    mode: str = "at"
    band: int = 2


@dataclass
class ParametricTemplate:
    canonical: TriMesh
    shape_basis: np.ndarray          # (n_modes, V, 3)
    joints: np.ndarray               # (K, 3) rest positions
    parents: np.ndarray              # (K,)
    skin_weights: np.ndarray         # (V, K)
    paths: List[MeasurementSpec]
    height: float
    joint_shape_dirs: np.ndarray = None  # (n_modes, K, 3)
    mode_std: np.ndarray = None          # natural spread of each coefficient
    part_labels: np.ndarray = None       # (V,) index into part_names
    part_names: List[str] = field(default_factory=list)
    rings: Dict[str, np.ndarray] = field(default_factory=dict)   # part -> (R, N) vertex ids
    stations: List[Station] = field(default_factory=list)
    arm_abduction: float = float(ARM_ABDUCTION)
    joint_names: List[str] = field(default_factory=lambda: list(JOINT_NAMES))
    seams: np.ndarray = None             # (S, 2) extra stiffness edges joining parts

    def __post_init__(self):
        nv = self.canonical.n_vertices
        if self.seams is None:
            self.seams = np.zeros((0, 2), dtype=np.int64)
        self.seams = np.asarray(self.seams, dtype=np.int64).reshape(-1, 2)
        if len(self.seams) and (self.seams.min() < 0 or self.seams.max() >= nv):
            raise ParameterError("seam edge references an invalid vertex")
        if self.shape_basis.ndim != 3 or self.shape_basis.shape[1:] != (nv, 3):
            raise ParameterError("shape basis must be (n_modes, V, 3)")
        if self.skin_weights.shape != (nv, len(self.joints)):
            raise ParameterError("skin weights must be (V, K)")
        if self.joint_shape_dirs is None:
            self.joint_shape_dirs = np.zeros((self.n_modes, len(self.joints), 3))
        if self.mode_std is None:
            self.mode_std = np.ones(self.n_modes)
        for spec in self.paths:
            for p in spec.paths:
                if max(p.vertices) >= nv or min(p.vertices) < 0:
                    raise ParameterError(f"path of {spec.name} has an invalid vertex index")

    @property
    def n_modes(self) -> int:
        return self.shape_basis.shape[0]

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def spec(self, name: str) -> MeasurementSpec:
        for s in self.paths:
            if s.name == name:
                return s
        raise KeyError(name)

    def station(self, name: str) -> Station:
        for s in self.stations:
            if s.name == name:
                return s
        raise KeyError(name)

    def part_mask(self, part: str) -> np.ndarray:
        return self.part_labels == self.part_names.index(part)

    def shaped_joints(self, shape: ShapeParams) -> np.ndarray:
        _check_shape(self, shape)
        return self.joints + np.tensordot(shape.beta, self.joint_shape_dirs, axes=1)


def _check_shape(template, shape):
    if len(shape.beta) != template.n_modes:
        raise ParameterError(
            f"expected {template.n_modes} shape coefficients, got {len(shape.beta)}")


def blend_shape(template: ParametricTemplate, shape: ShapeParams) -> TriMesh:
    """Mean shape plus the linear combination of shape modes."""
    _check_shape(template, shape)
    offs = np.tensordot(shape.beta, template.shape_basis, axes=1)
    return template.canonical.with_vertices(template.canonical.vertices + offs)


def joint_transforms(template: ParametricTemplate, pose: PoseParams, joints=None) -> np.ndarray:
    """Global 4x4 transform of every joint, relative to the rest pose."""
    theta = pose.theta
    if len(theta) != template.n_joints:
        raise ParameterError(f"expected {template.n_joints} joint rotations, got {len(theta)}")
    J = template.joints if joints is None else joints
    rots = Rotation.from_rotvec(theta).as_matrix()
    G = np.zeros((template.n_joints, 4, 4))
    for k in range(template.n_joints):
        local = np.eye(4)
        local[:3, :3] = rots[k]
        local[:3, 3] = J[k] - rots[k] @ J[k]
        p = template.parents[k]
        G[k] = local if p < 0 else G[p] @ local
    return G


def pose_mesh(mesh: TriMesh, template: ParametricTemplate, pose: PoseParams,
              shape: ShapeParams = None) -> TriMesh:
    """Linear blend skinning of ``mesh`` (template topology) by ``pose``.

    Joint centres come from ``shape`` when given (stature scaling), otherwise
    from the canonical skeleton.
    """
    if mesh.n_vertices != template.skin_weights.shape[0]:
        raise ParameterError("mesh vertex count does not match skin weights")
    joints = template.shaped_joints(shape) if shape is not None else None
    G = joint_transforms(template, pose, joints)
    W = template.skin_weights
    v = mesh.vertices
    blended = np.einsum("vk,kij->vij", W, G[:, :3, :])
    out = np.einsum("vij,vj->vi", blended[:, :, :3], v) + blended[:, :, 3]
    return mesh.with_vertices(out)


def instantiate(template: ParametricTemplate, shape: ShapeParams, pose: PoseParams = None) -> TriMesh:
    mesh = blend_shape(template, shape)
    if pose is None:
        return mesh
    return pose_mesh(mesh, template, pose, shape)


def abduction_pose(template: ParametricTemplate, delta: float, left=None, right=None) -> PoseParams:
    """Pose that raises both arms sideways by ``delta`` radians from the template pose."""
    theta = np.zeros((template.n_joints, 3))
    names = template.joint_names
    theta[names.index("l_shoulder")] = (0.0, delta if left is None else left, 0.0)
    theta[names.index("r_shoulder")] = (0.0, -(delta if right is None else right), 0.0)
    return PoseParams(theta)


def mesh_height(mesh: TriMesh) -> float:
    z = mesh.vertices[:, 2]
    return float(z.max() - z.min())


# ---------------------------------------------------------------------------
# procedural generator


def _tube(center, frame_u, frame_v, a, b, n_around, start_pole, end_pole, angle_offset=None):
    """Closed tube: ``R`` rings of ``n_around`` vertices plus two pole vertices.

    Returns ``(vertices, faces, ring_ids, local_angle)`` where vertex ids are
    local to the tube and ``local_angle`` is each ring vertex's angle.
    """
    R = len(center)
    phi = 2 * np.pi * np.arange(n_around) / n_around
    if angle_offset is not None:
        phi = phi + angle_offset
    ca, sa = np.cos(phi), np.sin(phi)
    ring_pts = (center[:, None, :]
                + (a(phi))[:, :, None] * ca[None, :, None] * frame_u[:, None, :]
                + (b(phi))[:, :, None] * sa[None, :, None] * frame_v[:, None, :])
    verts = np.vstack([ring_pts.reshape(-1, 3), start_pole[None], end_pole[None]])
    ring_ids = np.arange(R * n_around).reshape(R, n_around)
    s_id, e_id = R * n_around, R * n_around + 1
    faces = []
    for r in range(R - 1):
        for j in range(n_around):
            j2 = (j + 1) % n_around
            p, q = ring_ids[r, j], ring_ids[r, j2]
            p2, q2 = ring_ids[r + 1, j], ring_ids[r + 1, j2]
            faces.append((p, q, q2))
            faces.append((p, q2, p2))
    for j in range(n_around):
        j2 = (j + 1) % n_around
        faces.append((s_id, ring_ids[0, j2], ring_ids[0, j]))
        faces.append((e_id, ring_ids[-1, j], ring_ids[-1, j2]))
    faces = np.array(faces, dtype=np.int64)
    # orient outward: signed volume must be positive
    tri = verts[faces]
    vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()
    if vol < 0:
        faces = faces[:, ::-1].copy()
    return verts, faces, ring_ids, np.tile(phi, R)


def _profile(knots):
    k = np.asarray(knots, dtype=np.float64)
    return PchipInterpolator(k[:, 0], k[:, 1:], axis=0)


TORSO_KNOTS = [
    # z, half-width (x), half-depth (y)
    (0.790, 0.110, 0.085), (0.840, 0.165, 0.112), (0.900, 0.180, 0.122),
    (0.980, 0.160, 0.106), (1.050, 0.140, 0.095), (1.150, 0.150, 0.104),
    (1.280, 0.165, 0.116), (1.380, 0.180, 0.106), (1.430, 0.165, 0.090),
    (1.470, 0.075, 0.066), (1.520, 0.056, 0.058), (1.570, 0.060, 0.070),
    (1.600, 0.075, 0.093), (1.670, 0.078, 0.100), (1.720, 0.060, 0.075),
    (1.745, 0.030, 0.036),
]
ARM_KNOTS = [
    # distance from shoulder joint along the arm, forward radius, lateral radius
    (-0.030, 0.045, 0.045), (0.020, 0.052, 0.052), (0.075, 0.043, 0.042), (0.145, 0.048, 0.044),
    (0.220, 0.040, 0.038), (0.290, 0.036, 0.034), (0.360, 0.040, 0.037),
    (0.480, 0.030, 0.027), (0.550, 0.026, 0.021), (0.620, 0.045, 0.016),
    (0.690, 0.030, 0.012),
]
LEG_KNOTS = [
    # height, lateral radius, forward radius
    (0.060, 0.032, 0.036), (0.120, 0.030, 0.032), (0.220, 0.040, 0.043),
    (0.340, 0.055, 0.062), (0.420, 0.052, 0.056), (0.490, 0.052, 0.054),
    (0.580, 0.065, 0.066), (0.700, 0.082, 0.085), (0.760, 0.088, 0.090),
    (0.880, 0.095, 0.095), (0.970, 0.070, 0.070),
]
SHOULDER = np.array([0.175, 0.0, 1.40])
HIP_TOP = np.array([0.085, 0.0, 0.975])
FOOT_CENTER = np.array([ANKLE_HALF_SPAN, 0.05, 0.035])
FOOT_AXES = np.array([0.045, 0.125, 0.04])

STATIONS = [
    # name, part, anchor (height or distance along limb), mode
    ("NeckCirc", "torso", 1.52, "min"),
    ("ChestCirc", "torso", 1.33, "max"),
    ("NaturalWaistCirc", "torso", 1.05, "min"),
    ("HipCirc", "torso", 0.90, "max"),
    ("ThighCirc", "l_leg", 0.72, "max"),
    ("KneeCirc", "l_leg", 0.49, "at"),
    ("CalfCirc", "l_leg", 0.34, "max"),
    ("AnkleCirc", "l_leg", 0.13, "min"),
    ("BicepCirc", "l_arm", 0.165, "max"),
    ("ElbowCirc", "l_arm", 0.29, "at"),
    ("WristCirc", "l_arm", 0.55, "min"),
]


def _dent(phi, centre, depth, width):
    d = np.angle(np.exp(1j * (phi - centre)))
    return 1.0 - depth * np.exp(-0.5 * (d / width) ** 2)


def _arm_axis(side):
    # side = -1 for the left arm (at -x), +1 for the right
    return np.array([side * np.sin(ARM_ABDUCTION), 0.0, -np.cos(ARM_ABDUCTION)])


def _build_parts(resolution):
    n_torso = resolution
    n_limb = max(6, int(round(resolution * 10 / 16)))
    r_torso = max(8, int(round(34 * resolution / 16)))
    r_arm = max(6, int(round(20 * resolution / 16)))
    r_leg = max(6, int(round(28 * resolution / 16)))
    r_foot = max(3, int(round(7 * resolution / 16)))
    parts = []

    # torso, neck and head: vertical tube, x = width, y = depth
    prof = _profile(TORSO_KNOTS)
    z = np.linspace(0.795, 1.742, r_torso)
    ab = prof(z)
    center = np.column_stack([np.zeros_like(z), np.zeros_like(z), z])
    U = np.tile([1.0, 0.0, 0.0], (r_torso, 1))
    V = np.tile([0.0, 1.0, 0.0], (r_torso, 1))
    # shallow sternum/spine grooves keep the cross-section slightly non-convex
    front = lambda phi: _dent(phi, np.pi / 2, 0.06, 0.22) * _dent(phi, -np.pi / 2, 0.05, 0.22)
    verts, faces, rings, phi = _tube(
        center, U, V,
        lambda p: ab[:, :1] * front(p)[None, :], lambda p: ab[:, 1:] * front(p)[None, :],
        n_torso, np.array([0, 0, 0.775]), np.array([0, 0, 1.750]))
    parts.append(dict(name="torso", verts=verts, faces=faces, rings=rings, axial=z,
                      angle=phi, kind="torso", side=0, center=center))

    # arms: tube along the abducted arm axis
    prof = _profile(ARM_KNOTS)
    s = np.linspace(-0.025, 0.685, r_arm)
    ab = prof(s)
    for side, name in ((-1, "l_arm"), (1, "r_arm")):
        axis = _arm_axis(side)
        shoulder = SHOULDER * np.array([side, 1, 1])
        center = shoulder[None, :] + s[:, None] * axis[None, :]
        fwd = np.array([0.0, 1.0, 0.0])
        out = -side * np.cross(fwd, axis)  # away from the body
        U = np.tile(fwd, (r_arm, 1))
        V = np.tile(out, (r_arm, 1))
        verts, faces, rings, phi = _tube(
            center, U, V, lambda p: np.repeat(ab[:, :1], len(p), 1),
            lambda p: np.repeat(ab[:, 1:], len(p), 1), n_limb,
            shoulder - 0.045 * axis, shoulder + 0.705 * axis)
        parts.append(dict(name=name, verts=verts, faces=faces, rings=rings, axial=s,
                          angle=phi, kind="arm", side=side, center=center, axis=axis,
                          origin=shoulder))

    # legs: near-vertical tube from inside the pelvis to inside the foot
    prof = _profile(LEG_KNOTS)
    h = np.linspace(0.062, 0.962, r_leg)
    ab = prof(h)
    for side, name in ((-1, "l_leg"), (1, "r_leg")):
        top = HIP_TOP * np.array([side, 1, 1])
        bottom = np.array([side * ANKLE_HALF_SPAN, 0.0, 0.045])
        t = (h - bottom[2]) / (top[2] - bottom[2])
        center = bottom[None, :] + t[:, None] * (top - bottom)[None, :]
        center[:, 1] -= 0.012 * np.exp(-0.5 * ((h - 0.34) / 0.08) ** 2)  # calf bulges backward
        axis = (top - bottom) / np.linalg.norm(top - bottom)
        fwd = np.array([0.0, 1.0, 0.0])
        lat = np.cross(fwd, axis)
        lat /= np.linalg.norm(lat)
        U = np.tile(lat * side, (r_leg, 1))
        V = np.tile(fwd, (r_leg, 1))
        verts, faces, rings, phi = _tube(
            center, U, V, lambda p: np.repeat(ab[:, :1], len(p), 1),
            lambda p: np.repeat(ab[:, 1:], len(p), 1), n_limb,
            bottom + np.array([0, 0, 0.0]), top + np.array([0, 0, 0.02]))
        parts.append(dict(name=name, verts=verts, faces=faces, rings=rings, axial=h,
                          angle=phi, kind="leg", side=side, center=center,
                          top=top, bottom=bottom))

    # feet: ellipsoids extending forward of the ankle
    y = np.linspace(-0.85, 0.85, r_foot)
    for side, name in ((-1, "l_foot"), (1, "r_foot")):
        c = FOOT_CENTER * np.array([side, 1, 1])
        center = np.column_stack([np.full_like(y, c[0]), c[1] + y * FOOT_AXES[1],
                                  np.full_like(y, c[2])])
        sc = np.sqrt(1 - y ** 2)[:, None]
        U = np.tile([1.0, 0.0, 0.0], (r_foot, 1))
        V = np.tile([0.0, 0.0, 1.0], (r_foot, 1))
        verts, faces, rings, phi = _tube(
            center, U, V, lambda p: np.repeat(FOOT_AXES[0] * sc, len(p), 1),
            lambda p: np.repeat(FOOT_AXES[2] * sc, len(p), 1), n_limb,
            c - np.array([0, FOOT_AXES[1], 0]), c + np.array([0, FOOT_AXES[1], 0]))
        parts.append(dict(name=name, verts=verts, faces=faces, rings=rings, axial=y,
                          angle=phi, kind="foot", side=side, center=center))
    return parts


def _ramp(x, lo, hi):
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def _chain_weights(x, bounds, joints, K, width):
    """Weights along a joint chain: segment k spans ``bounds[k-1]..bounds[k]``."""
    W = np.zeros((len(x), K))
    prev = np.ones(len(x))
    for k, b in enumerate(bounds):
        nxt = _ramp(x, b - width, b + width)
        W[:, joints[k]] += prev - nxt
        prev = nxt
    W[:, joints[len(bounds)]] += prev
    return W


def _seam_edges(parts, offsets, band=2):
    """Edges tying each limb's attachment end to the nearest vertices of its parent.

    The body parts are separate closed surfaces that overlap at the joints;
    without these links the stiffness term would leave each part free to
    drift on its own.
    """
    by_name = {p["name"]: p for p in parts}

    def gid(name, local):
        return offsets[name] + np.asarray(local)

    def end_ids(name, at_start):
        p = by_name[name]
        nv = len(p["verts"])
        R = p["rings"].shape[0]
        rows = range(band) if at_start else range(R - band, R)
        ids = np.concatenate([p["rings"][r] for r in rows] + [[nv - 2 if at_start else nv - 1]])
        return ids

    links = [("l_arm", True, "torso"), ("r_arm", True, "torso"),
             ("l_leg", False, "torso"), ("r_leg", False, "torso")]
    edges = []
    for child, at_start, parent in links:
        ids = end_ids(child, at_start)
        tree = cKDTree(by_name[parent]["verts"])
        _, nn = tree.query(by_name[child]["verts"][ids])
        edges.append(np.column_stack([gid(child, ids), gid(parent, nn)]))
    # the leg's lower end sits inside the foot
    for leg, foot in (("l_leg", "l_foot"), ("r_leg", "r_foot")):
        ids = end_ids(leg, True)
        tree = cKDTree(by_name[foot]["verts"])
        _, nn = tree.query(by_name[leg]["verts"][ids])
        edges.append(np.column_stack([gid(leg, ids), gid(foot, nn)]))
    e = np.sort(np.vstack(edges), axis=1)
    return np.unique(e, axis=0)


def generate_synthetic_template(seed: int = 0, n_modes: int = 10, resolution: int = 16
                                ) -> ParametricTemplate:
    """Deterministic procedural humanoid in the instructed scanning pose.

    Parameters
    ----------
    seed
        Seeds the random low-frequency shape modes.
    n_modes
        Number of shape coefficients. Mode 1 is a pure stature (vertical
        stretch) mode; the rest are smooth girth fields.
    resolution
        Vertices around the torso; every other count scales with it. The
        default gives about 1,650 vertices.
    """
    if n_modes < 1:
        raise GenerationError("n_modes must be >= 1")
    if resolution < 8:
        raise GenerationError("resolution too low to place all measurement paths")
    parts = _build_parts(int(resolution))
    K = len(JOINT_NAMES)
    idx = {n: i for i, n in enumerate(JOINT_NAMES)}

    verts, faces, labels = [], [], []
    rings, offsets = {}, {}
    off = 0
    for pi, p in enumerate(parts):
        verts.append(p["verts"])
        faces.append(p["faces"] + off)
        labels.append(np.full(len(p["verts"]), pi))
        rings[p["name"]] = p["rings"] + off
        offsets[p["name"]] = off
        off += len(p["verts"])
    V = np.vstack(verts)
    F = np.vstack(faces)
    labels = np.concatenate(labels)
    nv = len(V)
    if nv < 500:
        raise GenerationError(f"resolution {resolution} yields only {nv} vertices (< 500)")
    canonical = TriMesh(V, F)

    # skeleton
    joints = np.zeros((K, 3))
    joints[idx["pelvis"]] = (0, 0, 0.93)
    joints[idx["spine1"]] = (0, 0, 1.10)
    joints[idx["spine2"]] = (0, 0, 1.30)
    joints[idx["neck"]] = (0, 0, 1.47)
    joints[idx["head"]] = (0, 0, 1.57)
    for side, pre in ((-1, "l_"), (1, "r_")):
        axis = _arm_axis(side)
        sh = SHOULDER * np.array([side, 1, 1])
        joints[idx[pre + "shoulder"]] = sh
        joints[idx[pre + "elbow"]] = sh + 0.29 * axis
        joints[idx[pre + "wrist"]] = sh + 0.55 * axis
        top = HIP_TOP * np.array([side, 1, 1])
        bottom = np.array([side * ANKLE_HALF_SPAN, 0.0, 0.045])
        at = lambda h: bottom + (h - bottom[2]) / (top[2] - bottom[2]) * (top - bottom)
        joints[idx[pre + "hip"]] = at(0.92)
        joints[idx[pre + "knee"]] = at(0.49)
        joints[idx[pre + "ankle"]] = at(0.10)

    # skin weights
    W = np.zeros((nv, K))
    for pi, p in enumerate(parts):
        sl = slice(offsets[p["name"]], offsets[p["name"]] + len(p["verts"]))
        local = p["verts"]
        if p["kind"] == "torso":
            x = local[:, 2]
            W[sl] = _chain_weights(x, [1.00, 1.20, 1.45, 1.56],
                                   [idx[n] for n in ("pelvis", "spine1", "spine2", "neck", "head")],
                                   K, 0.04)
        elif p["kind"] == "arm":
            pre = "l_" if p["side"] < 0 else "r_"
            x = (local - p["origin"]) @ p["axis"]
            W[sl] = _chain_weights(x, [0.02, 0.29, 0.55],
                                   [idx["spine2"], idx[pre + "shoulder"], idx[pre + "elbow"],
                                    idx[pre + "wrist"]], K, 0.03)
        elif p["kind"] == "leg":
            pre = "l_" if p["side"] < 0 else "r_"
            # height of the ring's centre, read off along the tilted leg axis so
            # every ring gets one weight row and stays planar when posed
            top, bottom = p["top"], p["bottom"]
            x = -(bottom[2] + (local - bottom) @ (top - bottom) / ((top - bottom) @ (top - bottom))
                  * (top[2] - bottom[2]))
            W[sl] = _chain_weights(x, [-0.90, -0.49, -0.10],
                                   [idx["pelvis"], idx[pre + "hip"], idx[pre + "knee"],
                                    idx[pre + "ankle"]], K, 0.03)
        else:
            pre = "l_" if p["side"] < 0 else "r_"
            W[sl, idx[pre + "ankle"]] = 1.0

    # shape modes
    rng = np.random.default_rng(seed)
    modes = np.zeros((n_modes, nv, 3))
    z = V[:, 2]
    # stature: vertical stretch about the floor. Limb rings are lifted as a
    # whole (by their centre height) so tilted rings stay planar.
    modes[0, :, 2] = z
    for p in parts:
        if p["kind"] in ("arm", "leg"):
            ids = rings[p["name"]]
            modes[0, ids, 2] = p["center"][:, 2][:, None]
    for m in range(1, n_modes):
        field_ = np.zeros((nv, 3))
        coef = {kind: rng.normal(size=7) for kind in ("torso", "arm", "leg", "foot")}
        for p in parts:
            sl = slice(offsets[p["name"]], offsets[p["name"]] + len(p["verts"]))
            c = coef[p["kind"]]
            t = np.concatenate([np.repeat(np.linspace(0, 1, len(p["axial"])), p["rings"].shape[1]),
                                [0.0, 1.0]])
            ang = np.concatenate([p["angle"], [0.0, 0.0]])
            # even in the mirror plane: cos(2a) and sin(a) on the torso; limb angles
            # are already mirrored between sides
            scale = (c[0] + c[1] * np.cos(np.pi * t) + c[2] * np.cos(2 * np.pi * t)
                     + c[3] * np.cos(3 * np.pi * t)) * (
                1.0 + 0.4 * c[4] * np.cos(2 * ang) + 0.4 * c[5] * np.sin(ang)
                + 0.6 * c[6] * np.exp(-0.5 * (np.angle(np.exp(1j * (ang - np.pi / 2))) / 0.3) ** 2))
            ctr = np.vstack([np.repeat(p["center"], p["rings"].shape[1], axis=0),
                             p["verts"][-2:]])
            field_[sl] = (p["verts"] - ctr) * scale[:, None]
        modes[m] = field_
    flat = modes.reshape(n_modes, -1).T
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))[None, :]
    basis = q.T.reshape(n_modes, nv, 3)

    # joints follow the stature mode only
    jdirs = np.zeros((n_modes, K, 3))
    k_stature = basis[0, :, 2] @ z / (z @ z)
    jdirs[0, :, 2] = k_stature * joints[:, 2]

    mode_std = np.empty(n_modes)
    mode_std[0] = 1.5
    if n_modes > 1:
        mode_std[1:] = np.linspace(0.35, 0.08, n_modes - 1)

    # circumference paths: five parallel rings around each station
    part_names = [p["name"] for p in parts]
    stations, specs = [], []
    for name, part, anchor, mode in STATIONS:
        pdata = parts[part_names.index(part)]
        R = len(pdata["axial"])
        ring = int(np.argmin(np.abs(pdata["axial"] - anchor)))
        if ring - 2 < 0 or ring + 2 >= R:
            raise GenerationError(f"resolution too low to place paths for {name}")
        stations.append(Station(name, part, ring, mode))
        loops = tuple(Path(tuple(int(v) for v in rings[part][ring + d]), True) for d in (-2, -1, 0, 1, 2))
        specs.append(MeasurementSpec(name, loops, DEFAULT_LIMITS_MM.get(name)))

    return ParametricTemplate(
        canonical=canonical, shape_basis=basis, joints=joints,
        parents=np.array(JOINT_PARENTS), skin_weights=W, paths=specs,
        height=mesh_height(canonical), joint_shape_dirs=jdirs, mode_std=mode_std,
        part_labels=labels, part_names=part_names, rings=rings, stations=stations,
        seams=_seam_edges(parts, offsets))


# ---------------------------------------------------------------------------
# persistence


def save_template(template: ParametricTemplate, directory) -> None:
    """Write ``canonical.obj``, ``basis.bin``, ``skeleton.json``, ``paths.json``, ``meta.json``."""
    os.makedirs(directory, exist_ok=True)
    save_obj(template.canonical, os.path.join(directory, "canonical.obj"))
    write_array(os.path.join(directory, "basis.bin"), template.shape_basis)
    write_json(os.path.join(directory, "skeleton.json"), {
        "joint_names": list(template.joint_names),
        "parents": [int(p) for p in template.parents],
        "rest_positions": template.joints.tolist(),
        "stature_joint_dirs": template.joint_shape_dirs.tolist(),
        "skin_weights": template.skin_weights.tolist(),
    })
    save_paths(template.paths, os.path.join(directory, "paths.json"))
    write_json(os.path.join(directory, "meta.json"), {
        "height_m": template.height,
        "arm_abduction_rad": template.arm_abduction,
        "mode_std": template.mode_std.tolist(),
        "part_names": list(template.part_names),
        "part_labels": [int(x) for x in template.part_labels],
        "rings": {k: v.tolist() for k, v in template.rings.items()},
        "stations": [asdict(s) for s in template.stations],
        "seams": template.seams.tolist(),
    })


def load_template(directory) -> ParametricTemplate:
    canonical = load_obj(os.path.join(directory, "canonical.obj"))
    basis = read_array(os.path.join(directory, "basis.bin"))
    skel = read_json(os.path.join(directory, "skeleton.json"))
    specs = load_paths(os.path.join(directory, "paths.json"))
    meta = read_json(os.path.join(directory, "meta.json"))
    return ParametricTemplate(
        canonical=canonical, shape_basis=basis,
        joints=np.array(skel["rest_positions"]), parents=np.array(skel["parents"]),
        skin_weights=np.array(skel["skin_weights"]), paths=specs, height=meta["height_m"],
        joint_shape_dirs=np.array(skel["stature_joint_dirs"]),
        mode_std=np.array(meta["mode_std"]), part_labels=np.array(meta["part_labels"]),
        part_names=meta["part_names"],
        rings={k: np.array(v, dtype=np.int64) for k, v in meta["rings"].items()},
        stations=[Station(**s) for s in meta["stations"]],
        arm_abduction=meta["arm_abduction_rad"], joint_names=skel["joint_names"],
        seams=np.array(meta.get("seams", []), dtype=np.int64).reshape(-1, 2))

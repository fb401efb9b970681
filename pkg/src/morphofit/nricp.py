"""Locally affine non-rigid ICP.

Every template vertex ``i`` carries a 4x3 affine transform ``X_i`` acting on
homogeneous row vectors ``[v_i, 1]``. For fixed correspondences the energy

    E(X) = E_d + alpha * E_s + beta_l * E_l

is an exact linear least-squares problem ``||A X - B||_F^2`` over the stacked
``4n x 3`` unknown, solved through the normal equations. An outer loop walks a
decreasing stiffness schedule; the inner loop re-estimates correspondences
until the transforms stop moving.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from cvxopt import cholmod, matrix, spmatrix
from scipy.sparse.csgraph import connected_components

from .errors import (AssemblyError, ConfigError, ParameterError, RegistrationError,
                     SingularSystemError)
from .fileio import atomic_write_text
from .mesh import TriMesh, nearest_vertices

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Landmarks:
    """Template vertex ids paired with target points; empty by default."""

    indices: tuple = ()
    targets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    weight: float = 1.0

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        tgt = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        if len(idx) != len(tgt):
            raise ParameterError("landmark indices and targets differ in length")
        if self.weight < 0:
            raise ParameterError("landmark weight must be >= 0")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "targets", tgt)

    def __len__(self):
        return len(self.indices)


NO_LANDMARKS = Landmarks()


def desk_schedule() -> tuple:
    return tuple(float(a) for a in np.geomspace(100.0, 1.0, 8))


def paper_schedule() -> tuple:
    return tuple(float(a) for a in np.arange(100, 0, -1))


@dataclass(frozen=True)
class NricpConfig:
    stiffness_schedule: tuple = field(default_factory=desk_schedule)
    gamma: float = 0.1                    # translation vs. linear-part stiffness; unit dependent
    epsilon: Optional[float] = None       # None -> 1e-4 * sqrt(n)
    max_inner_iters: int = 20
    distance_gate: Optional[float] = 4.0  # multiple of the median match distance
    distance_floor: float = 1e-3          # meters; keeps the gate open on exact fits
    normal_gate_deg: Optional[float] = 60.0
    vertex_targets: bool = False          # match scan vertices instead of triangles

    def __post_init__(self):
        sched = tuple(float(a) for a in self.stiffness_schedule)
        if not sched:
            raise ConfigError("stiffness schedule is empty")
        if any(a <= 0 for a in sched):
            raise ConfigError("stiffness values must be positive")
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise ConfigError("stiffness schedule must be strictly decreasing")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.max_inner_iters < 1:
            raise ConfigError("max_inner_iters must be >= 1")
        object.__setattr__(self, "stiffness_schedule", sched)

    def eps_for(self, n: int) -> float:
        return self.epsilon if self.epsilon is not None else 1e-4 * np.sqrt(n)


@dataclass
class CorrespondenceSet:
    targets: np.ndarray     # (n, 3) matched points u_i
    weights: np.ndarray     # (n,) in {0, 1}
    distances: np.ndarray   # (n,) match distances

    @property
    def active_fraction(self) -> float:
        return float(self.weights.mean()) if len(self.weights) else 0.0


@dataclass
class TraceRow:
    alpha: float
    iter: int
    E_d: float
    E_s: float
    E_l: float
    delta_x: float
    active_fraction: float


@dataclass
class RegistrationTrace:
    rows: List[TraceRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "iter", "E_d", "E_s", "E_l", "delta_x", "active_fraction"])
        for r in self.rows:
            w.writerow([repr(r.alpha), r.iter, repr(r.E_d), repr(r.E_s), repr(r.E_l),
                        repr(r.delta_x), repr(r.active_fraction)])
        return buf.getvalue()

    def save(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    def outer_blocks(self) -> int:
        return len({r.alpha for r in self.rows})


# ---------------------------------------------------------------------------
# deformation parameters


def identity_params(n: int) -> np.ndarray:
    X = np.zeros((n, 4, 3))
    X[:, 0, 0] = X[:, 1, 1] = X[:, 2, 2] = 1.0
    return X.reshape(4 * n, 3)


def apply_deformation(template: TriMesh, X) -> TriMesh:
    """Vertex ``i`` goes to ``[v_i, 1] @ X_i``."""
    X = np.asarray(X, dtype=np.float64)
    n = template.n_vertices
    if X.shape != (4 * n, 3):
        raise ParameterError(f"expected deformation of shape {(4 * n, 3)}, got {X.shape}")
    Xb = X.reshape(n, 4, 3)
    v = np.einsum("ni,nij->nj", template.vertices, Xb[:, :3, :]) + Xb[:, 3, :]
    return template.with_vertices(v)


# ---------------------------------------------------------------------------
# correspondences


def find_correspondences(deformed: TriMesh, scan: TriMesh, config: NricpConfig) -> CorrespondenceSet:
    """Nearest scan point per deformed vertex, with distance and normal gates."""
    q = deformed.vertices
    if config.vertex_targets or scan.n_faces == 0:
        pts, vid, dist = nearest_vertices(q, scan)
        scan_normals = scan.vertex_normals[vid] if scan.n_faces else None
    else:
        pts, fid, dist, _ = scan.surface_index.query(q)
        scan_normals = scan.face_normals[fid]
    w = np.ones(len(q))
    if config.distance_gate is not None:
        thresh = config.distance_gate * max(float(np.median(dist)), config.distance_floor)
        w[dist > thresh] = 0.0
    if config.normal_gate_deg is not None and scan_normals is not None and deformed.n_faces:
        cosang = np.einsum("ij,ij->i", deformed.vertex_normals, scan_normals)
        w[cosang < np.cos(np.deg2rad(config.normal_gate_deg))] = 0.0
    return CorrespondenceSet(targets=np.asarray(pts, dtype=np.float64), weights=w, distances=dist)


# ---------------------------------------------------------------------------
# linear system


def _incidence(template: TriMesh, extra_edges=None) -> sp.csr_matrix:
    M = template.incidence
    if extra_edges is None or len(extra_edges) == 0:
        return M
    e = np.sort(np.asarray(extra_edges, dtype=np.int64).reshape(-1, 2), axis=1)
    ne = len(e)
    Mx = sp.csr_matrix((np.tile([1.0, -1.0], ne), (np.repeat(np.arange(ne), 2), e.ravel())),
                       shape=(ne, template.n_vertices))
    return sp.vstack([M, Mx]).tocsr()


def _homogeneous_rows(points, index, n) -> sp.csr_matrix:
    """Rows placing ``[p_k, 1]`` into the 4-column block of vertex ``index[k]``."""
    index = np.asarray(index, dtype=np.int64)
    m = len(index)
    rows = np.repeat(np.arange(m), 4)
    cols = (4 * index[:, None] + np.arange(4)[None, :]).ravel()
    vals = np.column_stack([points, np.ones(m)]).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, 4 * n))


def assemble_system(template: TriMesh, corr: CorrespondenceSet, landmarks: Landmarks = NO_LANDMARKS,
                    alpha: float = 1.0, gamma: float = 1.0, extra_edges=None
                    ) -> Tuple[sp.csr_matrix, np.ndarray]:
    """Stack stiffness, data and landmark rows.

    Row blocks are scaled by ``sqrt(alpha)`` and ``sqrt(beta_l)`` so that
    ``||A X - B||^2 = E_d + alpha * E_s + beta_l * E_l`` holds exactly.
    ``A`` has shape ``(4e + n + l, 4n)``.
    """
    n = template.n_vertices
    if alpha <= 0:
        raise AssemblyError("alpha must be positive")
    if corr.targets.shape != (n, 3) or corr.weights.shape != (n,):
        raise AssemblyError(
            f"correspondences sized for {len(corr.weights)} vertices, template has {n}")
    for i in landmarks.indices:
        if not 0 <= i < n:
            raise AssemblyError(f"landmark vertex {i} out of range")
    M = _incidence(template, extra_edges)
    G = sp.diags([1.0, 1.0, 1.0, gamma])
    stiff = np.sqrt(alpha) * sp.kron(M, G, format="csr")
    W = sp.diags(corr.weights)
    D = _homogeneous_rows(template.vertices, np.arange(n), n)
    blocks = [stiff, W @ D]
    rhs = [np.zeros((stiff.shape[0], 3)), corr.weights[:, None] * corr.targets]
    if len(landmarks):
        sb = np.sqrt(landmarks.weight)
        DL = _homogeneous_rows(template.vertices[list(landmarks.indices)], landmarks.indices, n)
        blocks.append(sb * DL)
        rhs.append(sb * landmarks.targets)
    A = sp.vstack(blocks, format="csr")
    B = np.vstack(rhs)
    return A, B


def energy(template: TriMesh, X, corr: CorrespondenceSet, landmarks: Landmarks = NO_LANDMARKS,
           gamma: float = 1.0, extra_edges=None) -> Tuple[float, float, float]:
    """``(E_d, E_s, E_l)`` evaluated term by term."""
    n = template.n_vertices
    Xb = np.asarray(X, dtype=np.float64).reshape(n, 4, 3)
    hv = np.column_stack([template.vertices, np.ones(n)])
    moved = np.einsum("ni,nij->nj", hv, Xb)
    E_d = float(np.sum(corr.weights * np.sum((moved - corr.targets) ** 2, axis=1)))
    edges = template.edges
    if extra_edges is not None and len(extra_edges):
        edges = np.vstack([edges, np.asarray(extra_edges).reshape(-1, 2)])
    g = np.array([1.0, 1.0, 1.0, gamma])[None, :, None]
    diff = (Xb[edges[:, 0]] - Xb[edges[:, 1]]) * g
    E_s = float(np.sum(diff ** 2))
    E_l = 0.0
    if len(landmarks):
        idx = np.asarray(landmarks.indices)
        E_l = float(np.sum((moved[idx] - landmarks.targets) ** 2))
    return E_d, E_s, E_l


def _singular_report(labels, bad) -> str:
    return ", ".join(f"component {c} ({int(np.sum(labels == c))} vertices, first vertex "
                     f"{int(np.argmax(labels == c))})" for c in bad[:5])


def _rank_deficient(grams: np.ndarray) -> list:
    """Indices of 4x4 Gram matrices that are numerically rank deficient."""
    ev = np.linalg.eigvalsh(grams)
    top = np.abs(ev).max(axis=1)
    return [int(c) for c in np.flatnonzero((top == 0) | (ev[:, 0] <= 1e-12 * top))]


def _check_rank(A: sp.csr_matrix, AtA: sp.csc_matrix) -> None:
    """Raise if some coupled group of vertices is not pinned down.

    Within a connected group the stiffness rows only vanish when every
    transform is equal, so the group is determined iff the data and landmark
    rows, summed over the group, have rank 4.
    """
    nv = AtA.shape[0] // 4
    coo = AtA.tocoo()
    graph = sp.csr_matrix((np.ones(len(coo.data)), (coo.row // 4, coo.col // 4)), shape=(nv, nv))
    ncomp, labels = connected_components(graph, directed=False)
    P = sp.csr_matrix((np.ones(4 * nv), (np.arange(4 * nv), 4 * labels.repeat(4) + np.tile(np.arange(4), nv))),
                      shape=(4 * nv, 4 * ncomp))
    S = (A @ P).tocsc()
    grams = np.stack([(S[:, 4 * c:4 * c + 4].T @ S[:, 4 * c:4 * c + 4]).toarray() for c in range(ncomp)])
    bad = _rank_deficient(grams)
    if bad:
        raise SingularSystemError(
            f"normal equations are singular: unconstrained {_singular_report(labels, bad)}")


def _cholmod_matrix(lower: sp.coo_matrix):
    return spmatrix(matrix(lower.data), matrix(lower.row.astype(np.int64)),
                    matrix(lower.col.astype(np.int64)), lower.shape)


def _cholmod_solve(S, rhs: np.ndarray, symbolic=None) -> np.ndarray:
    F = symbolic if symbolic is not None else cholmod.symbolic(S)
    cholmod.numeric(S, F)
    b = matrix(np.ascontiguousarray(rhs))
    cholmod.solve(F, b)
    return np.array(b)


_BACKWARD_TOL = 64 * np.finfo(float).eps


def _spd_solve(AtA: sp.spmatrix, AtB: np.ndarray, rtol: float, lower=None, symbolic=None,
               A=None, B=None) -> np.ndarray:
    """Solve ``AtA X = AtB``: sparse Cholesky, then sparse LU, then LSQR on ``A``."""
    ref = max(np.linalg.norm(AtB), 1e-300)
    scale = spla.norm(AtA)

    def resid(X):
        return np.linalg.norm(AtA @ X - AtB) / ref

    def ok(X):
        if X is None or not np.all(np.isfinite(X)):
            return False
        r = np.linalg.norm(AtA @ X - AtB)
        # either the requested relative residual, or a normwise backward error at the
        # level of rounding (very stiff systems cannot get below ~eps * cond)
        return r <= rtol * ref or r <= _BACKWARD_TOL * (scale * np.linalg.norm(X) + ref)

    X = None
    try:
        if lower is None:
            lower = sp.tril(AtA, format="coo")
        S = _cholmod_matrix(lower)
        X = _cholmod_solve(S, AtB, symbolic)
        if not ok(X):  # one round of iterative refinement
            X = X + _cholmod_solve(S, AtB - AtA @ X, symbolic)
    except ArithmeticError:
        X = None
    if not ok(X):
        log.debug("Cholesky insufficient; trying sparse LU")
        try:
            X = spla.splu(sp.csc_matrix(AtA), permc_spec="MMD_AT_PLUS_A").solve(AtB)
        except RuntimeError:
            X = None
    if not ok(X):
        if A is None:
            raise SingularSystemError("normal equations are numerically singular")
        log.debug("sparse LU insufficient; falling back to LSQR")
        x0 = X if X is not None and np.all(np.isfinite(X)) else np.zeros_like(AtB)
        X = np.column_stack([
            x0[:, k] + spla.lsqr(A, B[:, k] - A @ x0[:, k], atol=1e-16, btol=1e-16,
                                 iter_lim=50 * A.shape[1])[0]
            for k in range(B.shape[1])])
        if not ok(X):
            raise SingularSystemError(
                f"normal equations are numerically singular (relative residual {resid(X):.2e})")
    return X


def solve_step(A, B, rtol: float = 1e-10) -> np.ndarray:
    """Minimizer of ``||A X - B||_F^2`` via the normal equations.

    ``A^T A`` is factored with a fill-reducing sparse Cholesky (CHOLMOD);
    sparse LU and then LSQR take over if the factorization fails or leaves a
    relative optimality residual ``||A^T (A X - B)|| / ||A^T B||`` above
    ``rtol``. When the column count is a multiple of 4 the columns are read
    as per-vertex affine blocks and rank deficiency is reported per
    connected component.
    """
    A = sp.csr_matrix(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    vec = B.ndim == 1
    if vec:
        B = B[:, None]
    if A.shape[0] != B.shape[0]:
        raise AssemblyError(f"A has {A.shape[0]} rows, B has {B.shape[0]}")
    AtA = (A.T @ A).tocsc()
    AtB = np.asarray(A.T @ B)
    if A.shape[1] % 4 == 0:
        _check_rank(A, AtA)
    X = _spd_solve(AtA, AtB, rtol, A=A, B=B)
    return X[:, 0] if vec else X


class NormalEquations:
    """Normal equations of the stacked system, refreshed in place per iteration.

    The sparsity pattern of ``A^T A`` depends only on the mesh graph, so the
    symbolic factorization is computed once and every inner iteration only
    rewrites the 4x4 diagonal data blocks.
    """

    def __init__(self, template: TriMesh, landmarks: Landmarks = NO_LANDMARKS,
                 gamma: float = 1.0, extra_edges=None):
        n = template.n_vertices
        self.n = n
        self.landmarks = landmarks
        self.hv = np.column_stack([template.vertices, np.ones(n)])
        M = _incidence(template, extra_edges)
        self.labels = connected_components(abs(M.T @ M), directed=False)[1]
        G2 = sp.diags(np.array([1.0, 1.0, 1.0, gamma]) ** 2)
        K = sp.tril(sp.kron(M.T @ M, G2), format="coo")
        bi, a, b = np.meshgrid(np.arange(n), np.arange(4), np.arange(4), indexing="ij")
        keep = a >= b
        drow = (4 * bi + a)[keep]
        dcol = (4 * bi + b)[keep]
        N = 4 * n
        lin = np.concatenate([K.row.astype(np.int64) * N + K.col, drow * N + dcol])
        uniq, inv = np.unique(lin, return_inverse=True)
        self.row, self.col = uniq // N, uniq % N
        self.stiff = np.bincount(inv[:K.nnz], weights=K.data, minlength=len(uniq))
        self.data_pos = inv[K.nnz:]
        self.keep = keep[0]
        self.offdiag = self.row != self.col
        self._symbolic = None

    def blocks(self, corr: CorrespondenceSet) -> Tuple[np.ndarray, np.ndarray]:
        """Per-vertex data Gram blocks ``(n, 4, 4)`` and right-hand sides ``(n, 4, 3)``."""
        w = corr.weights
        gram = np.einsum("n,ni,nj->nij", w, self.hv, self.hv)
        rhs = np.einsum("ni,nj->nij", self.hv, w[:, None] * corr.targets)
        if len(self.landmarks):
            bl = self.landmarks.weight
            idx = np.asarray(self.landmarks.indices)
            h = self.hv[idx]
            np.add.at(gram, idx, bl * np.einsum("ni,nj->nij", h, h))
            np.add.at(rhs, idx, bl * np.einsum("ni,nj->nij", h, self.landmarks.targets))
        return gram, rhs

    def solve(self, corr: CorrespondenceSet, alpha: float, rtol: float = 1e-10) -> np.ndarray:
        if corr.weights.shape != (self.n,):
            raise AssemblyError("correspondence count does not match template")
        gram, rhs = self.blocks(corr)
        comp_gram = np.zeros((self.labels.max() + 1, 4, 4))
        np.add.at(comp_gram, self.labels, gram)
        bad = _rank_deficient(comp_gram)
        if bad:
            raise SingularSystemError(
                f"normal equations are singular: unconstrained {_singular_report(self.labels, bad)}")
        vals = alpha * self.stiff
        vals[self.data_pos] += gram[:, self.keep].ravel()
        N = 4 * self.n
        lower = sp.coo_matrix((vals, (self.row, self.col)), shape=(N, N))
        o = self.offdiag
        full = sp.csr_matrix((np.concatenate([vals, vals[o]]),
                              (np.concatenate([self.row, self.col[o]]),
                               np.concatenate([self.col, self.row[o]]))), shape=(N, N))
        if self._symbolic is None:
            self._symbolic = cholmod.symbolic(_cholmod_matrix(lower))
        return _spd_solve(full, rhs.reshape(N, 3), rtol, lower=lower, symbolic=self._symbolic)


# ---------------------------------------------------------------------------
# driver


@dataclass
class RegistrationResult:
    X: np.ndarray
    deformed: TriMesh
    trace: RegistrationTrace
    correspondences: CorrespondenceSet

    def __iter__(self):
        return iter((self.X, self.deformed, self.trace))

    @property
    def mean_active_distance(self) -> float:
        w = self.correspondences.weights > 0
        return float(self.correspondences.distances[w].mean()) if w.any() else float("nan")


def register(template: TriMesh, scan: TriMesh, landmarks: Landmarks = NO_LANDMARKS,
             config: NricpConfig = None, extra_edges=None, X0=None) -> RegistrationResult:
    """Fit ``template`` (already pre-aligned) onto ``scan``.

    ``extra_edges`` adds stiffness couplings beyond the mesh edges (seams
    between separately meshed body parts). The returned object unpacks as
    ``X, deformed, trace``; its ``correspondences`` are re-evaluated on the
    final deformed mesh.
    """
    config = config or NricpConfig()
    n = template.n_vertices
    eps = config.eps_for(n)
    X = identity_params(n) if X0 is None else np.array(X0, dtype=np.float64)
    normal = NormalEquations(template, landmarks, config.gamma, extra_edges)
    trace = RegistrationTrace()
    for alpha in config.stiffness_schedule:
        for it in range(1, config.max_inner_iters + 1):
            deformed = apply_deformation(template, X)
            corr = find_correspondences(deformed, scan, config)
            if not corr.weights.any():
                err = RegistrationError(
                    f"no active correspondences at alpha={alpha:g} (coverage "
                    f"{corr.active_fraction:.3f})")
                err.trace = trace
                raise err
            X_new = normal.solve(corr, alpha)
            dx = float(np.linalg.norm(X_new - X))
            E_d, E_s, E_l = energy(template, X_new, corr, landmarks, config.gamma, extra_edges)
            trace.rows.append(TraceRow(alpha, it, E_d, E_s, E_l, dx, corr.active_fraction))
            X = X_new
            if dx < eps:
                break
        log.debug("alpha=%g iters=%d E_d=%.3g active=%.3f", alpha, it, trace.rows[-1].E_d,
                  trace.rows[-1].active_fraction)
    deformed = apply_deformation(template, X)
    corr = find_correspondences(deformed, scan, config)
    return RegistrationResult(X, deformed, trace, corr)

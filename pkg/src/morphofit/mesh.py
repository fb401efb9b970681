"""Triangle meshes, OBJ persistence and closest-point queries."""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from numba import njit
from scipy.spatial import cKDTree

from .errors import MeshQueryError, ParseError, SerializationError


class Topology:
    """Connectivity derived from a face list; shared by meshes with equal faces."""

    def __init__(self, faces: np.ndarray, n_vertices: int):
        self.faces = faces
        self.n_vertices = n_vertices

    @cached_property
    def edges(self) -> np.ndarray:
        if len(self.faces) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        # +1 at the lower index, -1 at the higher one
        e = self.edges
        ne = len(e)
        rows = np.repeat(np.arange(ne), 2)
        cols = e.ravel()
        vals = np.tile([1.0, -1.0], ne)
        return sp.csr_matrix((vals, (rows, cols)), shape=(ne, self.n_vertices))

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        e = self.edges
        n = self.n_vertices
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    @cached_property
    def neighbors(self) -> list:
        adj = self.adjacency
        return [adj.indices[adj.indptr[i]:adj.indptr[i + 1]] for i in range(self.n_vertices)]

    @cached_property
    def components(self) -> np.ndarray:
        """Connected-component label per vertex."""
        _, labels = connected_components(self.adjacency, directed=False)
        return labels


class TriMesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : (n, 3) array_like
        Vertex positions in meters (raw scans may use other units until
        pre-alignment).
    faces : (m, 3) array_like of int
        Zero-based vertex indices. ``m`` may be zero (point cloud).
    """

    def __init__(self, vertices, faces=None, _topology: Optional[Topology] = None):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        if faces is None:
            faces = np.zeros((0, 3), dtype=np.int64)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face with repeated vertex index")
        v.flags.writeable = False
        f.flags.writeable = False
        self.vertices = v
        self.faces = f
        if _topology is not None and _topology.n_vertices == len(v) and _topology.faces is not None:
            self._topology = _topology
        else:
            self._topology = Topology(f, len(v))

    def __repr__(self):
        return f"TriMesh(n_vertices={self.n_vertices}, n_faces={self.n_faces})"

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def topology(self) -> Topology:
        return self._topology

    @property
    def edges(self) -> np.ndarray:
        return self._topology.edges

    @property
    def incidence(self) -> sp.csr_matrix:
        return self._topology.incidence

    @property
    def neighbors(self) -> list:
        return self._topology.neighbors

    @property
    def components(self) -> np.ndarray:
        return self._topology.components

    def with_vertices(self, vertices) -> "TriMesh":
        """Same connectivity, new positions."""
        v = np.asarray(vertices, dtype=np.float64)
        if v.shape != self.vertices.shape:
            raise ValueError(f"expected vertices of shape {self.vertices.shape}, got {v.shape}")
        return TriMesh(v, self.faces, _topology=self._topology)

    def submesh(self, face_mask) -> "TriMesh":
        """Keep the selected faces; drop vertices no longer referenced."""
        faces = self.faces[np.asarray(face_mask)]
        used = np.unique(faces)
        remap = -np.ones(self.n_vertices, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriMesh(self.vertices[used], remap[faces])

    @cached_property
    def _face_cross(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._face_cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        c = self._face_cross
        norm = np.linalg.norm(c, axis=1, keepdims=True)
        return c / np.where(norm > 0, norm, 1.0)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals."""
        acc = np.zeros_like(self.vertices)
        c = self._face_cross
        for k in range(3):
            np.add.at(acc, self.faces[:, k], c)
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        return acc / np.where(norm > 0, norm, 1.0)

    @cached_property
    def surface_index(self) -> "SurfaceIndex":
        return SurfaceIndex(self)

    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass(frozen=True)
class SurfaceHit:
    point: np.ndarray
    face_index: int
    distance: float
    barycentric: np.ndarray


# ---------------------------------------------------------------------------
# OBJ I/O


def _parse_index(token: str, n_vertices: int, lineno: int) -> int:
    head = token.split("/", 1)[0]
    try:
        idx = int(head)
    except ValueError:
        raise ParseError(f"bad face index {token!r}", lineno) from None
    if idx > 0:
        idx -= 1
    elif idx < 0:
        idx = n_vertices + idx
    else:
        raise ParseError("face index 0 is invalid (OBJ indices are 1-based)", lineno)
    if not 0 <= idx < n_vertices:
        raise ParseError(f"face index {head} out of range for {n_vertices} vertices", lineno)
    return idx


def load_obj(path) -> TriMesh:
    """Read a Wavefront OBJ file.

    Only ``v`` and ``f`` records are interpreted. Texture/normal indices in
    ``f`` records are ignored and polygons are fan-triangulated. Negative
    (relative) indices are accepted.
    """
    verts = []
    faces = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ParseError("vertex record needs 3 coordinates", lineno)
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise ParseError(f"bad vertex coordinate in {line!r}", lineno) from None
            elif tag == "f":
                if len(parts) < 4:
                    raise ParseError("face record needs at least 3 vertices", lineno)
                idx = [_parse_index(t, len(verts), lineno) for t in parts[1:]]
                for k in range(1, len(idx) - 1):
                    tri = (idx[0], idx[k], idx[k + 1])
                    if len(set(tri)) < 3:
                        raise ParseError("degenerate face (repeated vertex)", lineno)
                    faces.append(tri)
    if not verts:
        raise ParseError(f"{path}: empty mesh (no vertex records)")
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: TriMesh, path) -> None:
    """Write ``mesh`` as OBJ with 17 significant digits (exact round trip).

    Writes to a temporary file and renames it into place.
    """
    if not np.all(np.isfinite(mesh.vertices)):
        raise SerializationError("refusing to write a mesh with non-finite vertices")
    path = os.fspath(path)
    tmp = path + ".tmp"
    lines = ["v %.17g %.17g %.17g\n" % tuple(v) for v in mesh.vertices]
    lines += ["f %d %d %d\n" % tuple(f + 1) for f in mesh.faces]
    try:
        with open(tmp, "w") as fh:
            fh.writelines(lines)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


# ---------------------------------------------------------------------------
# closest point on triangles


def closest_points_on_triangles(p, a, b, c):
    """Closest point of each query ``p[k]`` on triangle ``(a[k], b[k], c[k])``.

    Vectorized form of the Voronoi-region walk from Ericson, *Real-Time
    Collision Detection* (2004). Returns ``(points, barycentric)`` with
    ``points = u*a + v*b + w*c``.
    """
    p = np.asarray(p, dtype=np.float64)
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = len(p)
    bary = np.empty((n, 3))
    done = np.zeros(n, dtype=bool)

    def assign(mask, u, v, w):
        m = mask & ~done
        bary[m, 0] = u[m] if np.ndim(u) else u
        bary[m, 1] = v[m] if np.ndim(v) else v
        bary[m, 2] = w[m] if np.ndim(w) else w
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
        assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
        t = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - t, t, 0.0)
        assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
        t = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - t, 0.0, t)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1 - t, t)
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        assign(np.ones(n, dtype=bool), 1 - v - w, v, w)
    # degenerate (zero-area) triangles can leave NaNs: fall back to nearest vertex
    bad = ~np.all(np.isfinite(bary), axis=1)
    if np.any(bad):
        corners = np.stack([a[bad], b[bad], c[bad]], axis=1)
        k = np.argmin(np.linalg.norm(corners - p[bad, None, :], axis=2), axis=1)
        bb = np.zeros((bad.sum(), 3))
        bb[np.arange(len(k)), k] = 1.0
        bary[bad] = bb
    pts = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return pts, bary


class SurfaceIndex:
    """Exact nearest-point-on-surface queries over an axis-aligned box tree.

    Traversal prunes a node only when its box is strictly farther than the
    best distance found so far, and equal distances resolve to the lower face
    index, so results match an exhaustive scan over every triangle.
    """

    def __init__(self, mesh: TriMesh, leaf_size: int = 4):
        if mesh.n_faces == 0:
            raise MeshQueryError("nearest-point query on a mesh without faces")
        self.mesh = mesh
        tri = np.ascontiguousarray(mesh.vertices[mesh.faces])
        self._tri = tri
        (self.node_lo, self.node_hi, self.node_left, self.node_right,
         self.node_start, self.node_count, self.order) = _build_bvh(tri, leaf_size)

    def query(self, queries):
        """Nearest surface points for a ``(q, 3)`` array.

        Returns ``(points, face_index, distance, barycentric)``.
        """
        queries = np.ascontiguousarray(np.atleast_2d(np.asarray(queries, dtype=np.float64)))
        return _bvh_query(queries, self._tri, self.node_lo, self.node_hi, self.node_left,
                          self.node_right, self.node_start, self.node_count, self.order)


def _build_bvh(tri, leaf_size):
    """Median-split box tree over triangle centroids (iterative build)."""
    m = len(tri)
    cent = tri.mean(axis=1)
    tlo = tri.min(axis=1)
    thi = tri.max(axis=1)
    order = np.arange(m)
    lo, hi, left, right, start, count = [], [], [], [], [], []
    stack = [(0, m, -1, 0)]
    while stack:
        s, e, parent, side = stack.pop()
        node = len(lo)
        idx = order[s:e]
        lo.append(tlo[idx].min(axis=0))
        hi.append(thi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        if parent >= 0:
            (left if side == 0 else right)[parent] = node
        if e - s > leaf_size:
            c = cent[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            mid = (e - s) // 2
            part = np.argsort(c[:, axis], kind="stable")
            order[s:e] = idx[part]
            count[node] = 0
            stack.append((s + mid, e, node, 1))
            stack.append((s, s + mid, node, 0))
    return (np.array(lo), np.array(hi), np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64), np.array(start, dtype=np.int64),
            np.array(count, dtype=np.int64), order.astype(np.int64))


@njit(cache=True)
def _closest_on_triangle(p, a, b, c, out):
    # Voronoi-region walk (Ericson 2004); writes barycentrics into out
    ab0 = b[0] - a[0]; ab1 = b[1] - a[1]; ab2 = b[2] - a[2]
    ac0 = c[0] - a[0]; ac1 = c[1] - a[1]; ac2 = c[2] - a[2]
    ap0 = p[0] - a[0]; ap1 = p[1] - a[1]; ap2 = p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        out[0] = 1.0; out[1] = 0.0; out[2] = 0.0
        return
    bp0 = p[0] - b[0]; bp1 = p[1] - b[1]; bp2 = p[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        out[0] = 0.0; out[1] = 1.0; out[2] = 0.0
        return
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        out[0] = 1.0 - t; out[1] = t; out[2] = 0.0
        return
    cp0 = p[0] - c[0]; cp1 = p[1] - c[1]; cp2 = p[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        out[0] = 0.0; out[1] = 0.0; out[2] = 1.0
        return
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        out[0] = 1.0 - t; out[1] = 0.0; out[2] = t
        return
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out[0] = 0.0; out[1] = 1.0 - t; out[2] = t
        return
    denom = va + vb + vc
    if denom == 0.0:
        # zero-area triangle: nearest corner
        da = ap0 * ap0 + ap1 * ap1 + ap2 * ap2
        db = bp0 * bp0 + bp1 * bp1 + bp2 * bp2
        dc = cp0 * cp0 + cp1 * cp1 + cp2 * cp2
        out[0] = 0.0; out[1] = 0.0; out[2] = 0.0
        if da <= db and da <= dc:
            out[0] = 1.0
        elif db <= dc:
            out[1] = 1.0
        else:
            out[2] = 1.0
        return
    v = vb / denom
    w = vc / denom
    out[0] = 1.0 - v - w; out[1] = v; out[2] = w


@njit(cache=True)
def _box_dist2(p, lo, hi):
    d = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            t = lo[k] - p[k]
            d += t * t
        elif p[k] > hi[k]:
            t = p[k] - hi[k]
            d += t * t
    return d


@njit(cache=True)
def _bvh_query(queries, tri, lo, hi, left, right, start, count, order):
    nq = queries.shape[0]
    pts = np.empty((nq, 3))
    bary = np.empty((nq, 3))
    face = np.empty(nq, dtype=np.int64)
    dist = np.empty(nq)
    stack = np.empty(256, dtype=np.int64)
    w = np.empty(3)
    for qi in range(nq):
        p = queries[qi]
        best = np.inf
        best_f = -1
        b0 = 0.0; b1 = 0.0; b2 = 0.0
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist2(p, lo[node], hi[node]) > best:
                continue
            if count[node] > 0:
                for k in range(start[node], start[node] + count[node]):
                    f = order[k]
                    t = tri[f]
                    _closest_on_triangle(p, t[0], t[1], t[2], w)
                    d = 0.0
                    for j in range(3):
                        x = w[0] * t[0, j] + w[1] * t[1, j] + w[2] * t[2, j] - p[j]
                        d += x * x
                    if d < best or (d == best and f < best_f):
                        best = d
                        best_f = f
                        b0 = w[0]; b1 = w[1]; b2 = w[2]
            else:
                l = left[node]
                r = right[node]
                dl = _box_dist2(p, lo[l], hi[l])
                dr = _box_dist2(p, lo[r], hi[r])
                # push the farther child first so the nearer one is visited next
                if dl <= dr:
                    stack[top] = r; stack[top + 1] = l
                else:
                    stack[top] = l; stack[top + 1] = r
                top += 2
        t = tri[best_f]
        for j in range(3):
            pts[qi, j] = b0 * t[0, j] + b1 * t[1, j] + b2 * t[2, j]
        bary[qi, 0] = b0; bary[qi, 1] = b1; bary[qi, 2] = b2
        face[qi] = best_f
        dist[qi] = np.sqrt(best)
    return pts, face, dist, bary


def nearest_surface_point(query, mesh: TriMesh) -> SurfaceHit:
    """Globally nearest point on the union of ``mesh``'s triangles."""
    if mesh.n_faces == 0:
        raise MeshQueryError("nearest-point query on a mesh without faces")
    pts, fi, d, bary = mesh.surface_index.query(np.asarray(query, dtype=np.float64)[None, :])
    return SurfaceHit(point=pts[0], face_index=int(fi[0]), distance=float(d[0]),
                      barycentric=bary[0])


def nearest_vertices(queries, mesh: TriMesh):
    """Vertex-only fallback: nearest mesh vertex per query.

    Returns ``(points, vertex_index, distance)``.
    """
    if mesh.n_vertices == 0:
        raise MeshQueryError("nearest-vertex query on an empty mesh")
    tree = mesh.__dict__.get("_vertex_tree")
    if tree is None:
        tree = cKDTree(mesh.vertices)
        mesh.__dict__["_vertex_tree"] = tree
    d, i = tree.query(np.atleast_2d(queries))
    return mesh.vertices[i], i, d

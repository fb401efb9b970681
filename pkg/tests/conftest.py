import numpy as np
import pytest

from morphofit.mesh import TriMesh
from morphofit.template import generate_synthetic_template


@pytest.fixture(scope="session")
def template():
    return generate_synthetic_template(seed=0)


def cube_mesh(size: float = 1.0) -> TriMesh:
    v = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=float) * size
    # two triangles per side, outward winding
    f = [
        (0, 2, 1), (1, 2, 3),      # z = 0
        (4, 5, 6), (5, 7, 6),      # z = 1
        (0, 1, 4), (1, 5, 4),      # y = 0
        (2, 6, 3), (3, 6, 7),      # y = 1
        (0, 4, 2), (2, 4, 6),      # x = 0
        (1, 3, 5), (3, 7, 5),      # x = 1
    ]
    return TriMesh(v, f)


def cylinder_mesh(radius: float, height: float, segments: int, rings: int = 5) -> TriMesh:
    """Open tube around the z axis."""
    phi = 2 * np.pi * np.arange(segments) / segments
    zs = np.linspace(0.0, height, rings)
    v = np.array([[radius * np.cos(p), radius * np.sin(p), z] for z in zs for p in phi])
    faces = []
    for r in range(rings - 1):
        for s in range(segments):
            a, b = r * segments + s, r * segments + (s + 1) % segments
            c, d = a + segments, b + segments
            faces += [(a, b, d), (a, d, c)]
    return TriMesh(v, faces)


def random_rigid(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return R, rng.normal(size=3)


def grid_mesh(rows: int, cols: int, rng=None) -> TriMesh:
    """Triangulated, slightly bumpy height field with ``rows * cols`` vertices."""
    u, v = np.meshgrid(np.arange(cols, dtype=float), np.arange(rows, dtype=float))
    w = np.zeros_like(u) if rng is None else 0.2 * rng.normal(size=u.shape)
    verts = np.c_[u.ravel(), v.ravel(), w.ravel()] * 0.1
    idx = np.arange(rows * cols).reshape(rows, cols)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    return TriMesh(verts, np.r_[np.c_[a, b, d], np.c_[a, d, c]])


def random_system(rng, rows: int, cols: int, n_landmarks: int = 0, drop: float = 0.3):
    """Random well-posed registration system on a grid template."""
    from morphofit.nricp import CorrespondenceSet, Landmarks, assemble_system

    mesh = grid_mesh(rows, cols, rng)
    n = mesh.n_vertices
    w = (rng.random(n) > drop).astype(float)
    w[:4] = 1.0  # keeps the data Gram full rank on the (connected) grid
    corr = CorrespondenceSet(mesh.vertices + 0.05 * rng.normal(size=(n, 3)), w, np.zeros(n))
    lm = Landmarks(tuple(rng.choice(n, n_landmarks, replace=False)), rng.normal(size=(n_landmarks, 3)),
                   float(rng.uniform(0.5, 2.0)))
    alpha = float(10 ** rng.uniform(-1, 2))
    gamma = float(rng.uniform(0.05, 1.0))
    A, B = assemble_system(mesh, corr, lm, alpha, gamma)
    return mesh, corr, lm, alpha, gamma, A, B

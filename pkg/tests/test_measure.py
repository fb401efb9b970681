import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from morphofit.errors import SpecError, TopologyMismatchError
from morphofit.measure import (MeasurementSpec, Path, extract_features, features_csv, load_paths, path_length,
                               read_features_csv, save_paths, write_features_csv)
from morphofit.template import ShapeParams, blend_shape

from conftest import random_rigid


def test_unit_square():
    sq = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
    assert path_length(sq, [0, 1, 2, 3]) == 4.0


@given(st.integers(3, 200), st.floats(0.01, 10.0))
def test_regular_polygon(n, r):
    phi = 2 * np.pi * np.arange(n) / n
    pts = np.c_[r * np.cos(phi), r * np.sin(phi), np.zeros(n)]
    assert path_length(pts, range(n)) == pytest.approx(2 * n * r * np.sin(np.pi / n), rel=1e-12)


def test_open_two_vertex_chain():
    pts = np.array([[0, 0, 0], [3, 4, 0.0]])
    assert path_length(pts, [0, 1], closed=False) == 5.0


@pytest.mark.parametrize("verts,closed", [((0, 1), True), ((0,), False), ((0, 1, 1), True)])
def test_too_short(verts, closed):
    with pytest.raises(SpecError):
        Path(verts, closed)
    if len(verts) < (3 if closed else 2):
        with pytest.raises(SpecError):
            path_length(np.zeros((3, 3)), list(verts), closed)


def test_path_count_bounds():
    p = Path((0, 1, 2))
    with pytest.raises(SpecError):
        MeasurementSpec("X", ())
    with pytest.raises(SpecError):
        MeasurementSpec("X", (p,) * 10)
    assert MeasurementSpec("X", (p,) * 4).n_paths == 4


def test_feature_length_matches_C(template):
    spec = template.paths[0].subset([0, 1, 2, 3])
    f = extract_features(template.canonical, spec)
    assert f.shape == (4,) and np.all(f > 0)


def test_index_out_of_range(template):
    spec = MeasurementSpec("X", (Path((0, 1, 10 ** 6)),))
    with pytest.raises(TopologyMismatchError):
        extract_features(template.canonical, spec)


@given(st.floats(0.1, 10.0))
def test_scaling(template, s):
    m = template.canonical
    for spec in template.paths:
        a = extract_features(m, spec)
        b = extract_features(m.with_vertices(m.vertices * s), spec)
        assert np.allclose(b, s * a, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_rigid_invariance(template, seed):
    R, t = random_rigid(np.random.default_rng(seed))
    m = template.canonical
    moved = m.with_vertices(m.vertices @ R.T + t)
    for spec in template.paths:
        assert np.allclose(extract_features(moved, spec), extract_features(m, spec), atol=1e-9, rtol=0)


def test_shape_changes_features(template):
    beta = np.zeros(template.n_modes)
    beta[1] = 2.0
    m = blend_shape(template, ShapeParams(beta))
    diff = [np.abs(extract_features(m, s) - extract_features(template.canonical, s)).max() for s in template.paths]
    assert max(diff) > 1e-4


@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)), min_size=3, max_size=30))
def test_reversal_invariance(pts):
    pts = np.array(pts)
    idx = list(range(len(pts)))
    assert path_length(pts, idx) == pytest.approx(path_length(pts, idx[::-1]), rel=1e-12, abs=1e-15)


@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)), min_size=3, max_size=20),
       st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)), st.integers(0, 100), st.floats(0, 1))
def test_refinement(pts, extra, pos, t):
    pts = np.array(pts)
    n = len(pts)
    k = pos % n
    idx = list(range(n))
    base = path_length(pts, idx)
    # off-segment insert never shortens
    grown = np.vstack([pts, extra])
    assert path_length(grown, idx[:k + 1] + [n] + idx[k + 1:]) >= base - 1e-12
    # collinear insert leaves the length unchanged
    a, b = pts[k], pts[(k + 1) % n]
    on = np.vstack([pts, a + t * (b - a)])
    assert path_length(on, idx[:k + 1] + [n] + idx[k + 1:]) == pytest.approx(base, rel=1e-12, abs=1e-12)


def test_paths_json_round_trip(template, tmp_path):
    save_paths(template.paths, tmp_path / "paths.json")
    assert load_paths(tmp_path / "paths.json") == list(template.paths)


def test_features_csv_round_trip(tmp_path):
    rows = [("S1", "A", np.array([0.1, 0.2])), ("S2", "A", np.array([0.3, 1 / 3]))]
    write_features_csv(rows, tmp_path / "f.csv")
    back = read_features_csv(tmp_path / "f.csv")
    assert np.array_equal(back["S2"]["A"], rows[1][2])
    assert features_csv(rows).splitlines()[0] == "subject_id,measurement,c_index,length_m"

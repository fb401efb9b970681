import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphofit.errors import EvaluationError, MetricError, PlanError
from morphofit.evaluation import (Dataset, FoldPlan, cv_evaluate, load_limits, mae, make_folds, success_rate,
                                  sweep_paths)
from morphofit.measure import MeasurementSpec, Path
from morphofit.regress import RegressorConfig

floats = st.floats(-2.0, 2.0, allow_nan=False)


# ---------------------------------------------------------------- metrics

def test_mae_examples():
    assert mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mae([1.000, 2.000], [1.002, 1.996]) == pytest.approx(3.0, abs=1e-9)
    assert mae([0.5], [0.516]) == pytest.approx(16.0, abs=1e-9)


@pytest.mark.parametrize("a,b", [([], []), ([1.0], [1.0, 2.0])])
def test_mae_bad_input(a, b):
    with pytest.raises(MetricError):
        mae(a, b)


def test_success_examples():
    assert success_rate([1.0, 2.0], [1.0, 2.0], 6.0) == 1.0
    # Neck limit 6 mm, errors of 3 and 7 mm
    assert success_rate([0.4, 0.4], [0.403, 0.407], 6.0) == 0.5
    with pytest.raises(MetricError):
        success_rate([], [], 6.0)


@given(st.lists(floats, min_size=1, max_size=20), st.sampled_from([1.0, 4.0, 6.0, 15.0]))
def test_errors_at_limit_inclusive(t, lim):
    t = np.array(t)
    signs = np.where(np.arange(len(t)) % 2, 1.0, -1.0)
    assert success_rate(t, t + signs * lim / 1000.0, lim) == 1.0


@given(st.lists(floats, min_size=1, max_size=20), st.lists(floats, min_size=20, max_size=20),
       st.floats(1e-4, 0.5))
def test_mae_translation(t, noise, delta):
    t = np.array(t)
    base = t + np.abs(np.array(noise[:len(t)])) * 0.01
    assert mae(t, base + delta) == pytest.approx(mae(t, base) + 1000 * delta, rel=1e-9, abs=1e-9)


@given(st.lists(floats, min_size=1, max_size=30), st.lists(floats, min_size=30, max_size=30),
       st.floats(0.1, 50), st.floats(0.1, 50))
def test_success_monotone_in_limit(t, e, l1, l2):
    t = np.array(t)
    est = t + np.array(e[:len(t)]) * 0.01
    lo, hi = sorted((l1, l2))
    assert success_rate(t, est, lo) <= success_rate(t, est, hi)


def test_shipped_limits_match_table():
    lim = load_limits()
    expected = {"AnkleCirc": 4, "BicepCirc": 6, "CalfCirc": 5, "ChestCirc": 15, "BustCirc": 15, "ElbowCirc": 4,
                "HipCirc": 12, "KneeCirc": 4, "NaturalWaistCirc": 12, "NeckBaseCirc": 11, "NeckCirc": 6,
                "ThighCirc": 6, "WristCirc": 5, "UnderbustCirc": 16, "BustToBust": 10, "NecksideToBust": 8}
    assert lim == {k: float(v) for k, v in expected.items()}


# ---------------------------------------------------------------- folds

def test_ten_into_five():
    plan = make_folds([f"s{i}" for i in range(10)], 5, seed=1)
    assert [len(f) for f in plan.folds] == [2] * 5
    flat = [s for f in plan.folds for s in f]
    assert sorted(flat) == sorted(f"s{i}" for i in range(10)) and len(set(flat)) == 10


def test_k_too_large():
    with pytest.raises(PlanError):
        make_folds(range(10), 11)


@settings(max_examples=40)
@given(st.integers(2, 60), st.integers(2, 10), st.integers(0, 1000))
def test_fold_properties(n, k, seed):
    if k > n:
        with pytest.raises(PlanError):
            make_folds(range(n), k, seed)
        return
    ids = [f"id{i:03d}" for i in range(n)]
    plan = make_folds(ids, k, seed)
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1
    assert sorted(s for f in plan.folds for s in f) == ids
    assert plan == make_folds(list(reversed(ids)), k, seed)


# ---------------------------------------------------------------- cv protocol

def _linear_dataset(n=40, seed=0, C=3, noise=0.0):
    rng = np.random.default_rng(seed)
    ids = [f"S{i:03d}" for i in range(n)]
    w = rng.normal(size=C)
    feats, truths = {}, {}
    for s in ids:
        x = 0.5 + 0.1 * rng.random(C)
        feats[s] = {"M": x}
        truths[s] = {"M": 0.2 + x @ w + noise * rng.normal()}
    spec = MeasurementSpec("M", tuple(Path((0, 1, 2 + c)) for c in range(C)), 5.0)
    return feats, truths, spec


def test_realizable_target_ols():
    f, t, spec = _linear_dataset()
    data = Dataset.from_maps(f, t, ["M"])
    res = cv_evaluate(data, [spec], RegressorConfig("ols"), make_folds(data.ids, 5, 0))
    assert res.report.result("M").mae_mm < 1e-6


def test_missing_subject_listed():
    f, t, spec = _linear_dataset()
    del f["S007"]
    with pytest.raises(EvaluationError, match="S007"):
        Dataset.from_maps(f, t, ["M"])
    data = Dataset.from_maps({k: v for k, v in f.items()}, {k: v for k, v in t.items() if k != "S007"}, ["M"])
    plan = make_folds(sorted(t), 5, 0)
    with pytest.raises(EvaluationError, match="S007"):
        cv_evaluate(data, [spec], RegressorConfig("ols"), plan)


def test_permuted_input_same_report():
    f, t, spec = _linear_dataset(noise=0.003)
    plan = make_folds(sorted(f), 5, 2)
    a = cv_evaluate(Dataset.from_maps(f, t, ["M"]), [spec], RegressorConfig("ridge"), plan)
    keys = list(f)[::-1]
    b = cv_evaluate(Dataset.from_maps({k: f[k] for k in keys}, {k: t[k] for k in keys}, ["M"]),
                    [spec], RegressorConfig("ridge"), plan)
    assert a.report.to_csv() == b.report.to_csv()
    assert a.predictions_csv() == b.predictions_csv()


def test_report_mae_from_predictions():
    f, t, spec = _linear_dataset(noise=0.004)
    data = Dataset.from_maps(f, t, ["M"])
    res = cv_evaluate(data, [spec], RegressorConfig("svr"), make_folds(data.ids, 5, 0))
    errs = [p["abs_error_mm"] for p in res.predictions]
    assert res.report.result("M").mae_mm == pytest.approx(np.mean(errs), rel=1e-12)
    hdr = res.predictions_csv().splitlines()[0]
    assert hdr == "subject_id,measurement,truth_mm,estimate_mm,abs_error_mm,within_limit"


@pytest.mark.parametrize("kind", ["ols", "ridge", "svr"])
def test_no_test_leakage(kind):
    f, t, spec = _linear_dataset(n=30, noise=0.004)
    data = Dataset.from_maps(f, t, ["M"])
    plan = make_folds(data.ids, 5, 0)
    cfg = RegressorConfig(kind)
    full = cv_evaluate(data, [spec], cfg, plan)
    for fold in range(plan.k):
        victim = plan.folds[fold][0]
        reduced_plan = FoldPlan(tuple(tuple(s for s in fo if s != victim) for fo in plan.folds), plan.seed)
        reduced = Dataset.from_maps({k: v for k, v in f.items() if k != victim},
                                    {k: v for k, v in t.items() if k != victim}, ["M"])
        res = cv_evaluate(reduced, [spec], cfg, reduced_plan)
        a = json.dumps(full.models[("M", fold)].to_json(), sort_keys=True)
        b = json.dumps(res.models[("M", fold)].to_json(), sort_keys=True)
        assert a == b


def test_average_rule_documented():
    f, t, spec = _linear_dataset()
    data = Dataset.from_maps(f, t, ["M"])
    rep = cv_evaluate(data, [spec], RegressorConfig("ols"), make_folds(data.ids, 5, 0)).report
    assert rep.to_csv().startswith("# average success rate = mean of per-measurement rates")
    assert "per-measurement" in rep.to_json()["average_rule"]


# ---------------------------------------------------------------- sweep

def test_sweep_full_set_matches_cv():
    f, t, spec = _linear_dataset(C=4, noise=0.003)
    data = Dataset.from_maps(f, t, ["M"])
    plan = make_folds(data.ids, 5, 0)
    cfg = RegressorConfig("ridge")
    cv = cv_evaluate(data, [spec], cfg, plan)
    sw = sweep_paths(data, spec, range(1, 5), cfg, plan, budget=False)
    assert [c for c, _ in sw.entries] == [1, 2, 3, 4]
    assert dict(sw.entries)[4] == pytest.approx(cv.report.result("M").mae_mm, rel=1e-12)
    assert sw.best_multi[1] <= sw.best_single_mae


def test_sweep_budget_keeps_best_prefix():
    # one informative path plus pure-noise paths: the budget sweep should stop at one
    rng = np.random.default_rng(8)
    ids = [f"S{i:03d}" for i in range(60)]
    f = {s: {"M": rng.random(4)} for s in ids}
    t = {s: {"M": 2.0 * f[s]["M"][1] + 1e-3 * rng.standard_normal()} for s in ids}
    spec = MeasurementSpec("M", tuple(Path((0, 1, 2 + c)) for c in range(4)))
    data = Dataset.from_maps(f, t, ["M"])
    plan = make_folds(ids, 5, 0)
    cfg = RegressorConfig("ols")
    sw = sweep_paths(data, spec, range(1, 5), cfg, plan)
    exact = sweep_paths(data, spec, range(1, 5), cfg, plan, budget=False)
    for c in range(1, 5):
        assert all(len(s) <= c for s in sw.subsets[c])
        assert all(set(sw.subsets[1][f]) <= set(s) for f, s in enumerate(sw.subsets[c]))
        assert all(len(s) == c for s in exact.subsets[c])
    assert all(s == (1,) for s in sw.subsets[1])
    assert sw.entries[0] == exact.entries[0]


def test_sweep_single_entry_and_bounds():
    f, t, spec = _linear_dataset(C=3)
    data = Dataset.from_maps(f, t, ["M"])
    plan = make_folds(data.ids, 5, 0)
    sw = sweep_paths(data, spec, [1], RegressorConfig("ols"), plan)
    assert len(sw.entries) == 1
    with pytest.raises(EvaluationError):
        sweep_paths(data, spec, range(1, 5), RegressorConfig("ols"), plan)


def test_greedy_picks_informative_path():
    rng = np.random.default_rng(3)
    ids = [f"S{i:03d}" for i in range(40)]
    f = {s: {"M": rng.random(3)} for s in ids}
    t = {s: {"M": 2.0 * f[s]["M"][2]} for s in ids}
    spec = MeasurementSpec("M", tuple(Path((0, 1, 2 + c)) for c in range(3)))
    data = Dataset.from_maps(f, t, ["M"])
    sw = sweep_paths(data, spec, [1], RegressorConfig("ols"), make_folds(ids, 5, 0))
    assert all(s == (2,) for s in sw.subsets[1])

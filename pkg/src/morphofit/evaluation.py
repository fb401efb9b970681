"""Metrics and cross-validation protocol for measurement estimates."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import EvaluationError, MetricError, PlanError
from .fileio import atomic_write_text, read_json, write_json
from .measure import MeasurementSpec
from .regress import RegressorConfig, fit, fit_with, select_params


def _pair(truth, est) -> Tuple[np.ndarray, np.ndarray]:
    t = np.asarray(truth, dtype=np.float64).ravel()
    e = np.asarray(est, dtype=np.float64).ravel()
    if len(t) != len(e):
        raise MetricError(f"length mismatch: {len(t)} truths vs {len(e)} estimates")
    if len(t) == 0:
        raise MetricError("empty input")
    return t, e


def mae(truth, est) -> float:
    """Mean absolute error in millimeters for inputs in meters."""
    t, e = _pair(truth, est)
    return float(np.mean(np.abs(t - e)) * 1000.0)


def success_rate(truth, est, limit_mm: float) -> float:
    """Fraction of subjects with ``|error| <= limit_mm`` (inputs in meters)."""
    t, e = _pair(truth, est)
    if not limit_mm > 0:
        raise MetricError("limit must be positive")
    # compare in meters to keep "exactly at the limit" inclusive despite rounding
    return float(np.mean(np.abs(t - e) <= limit_mm / 1000.0 * (1 + 1e-12)))


def load_limits(path=None) -> Dict[str, float]:
    """Per-measurement error limits in mm (defaults to the shipped table)."""
    if path is None:
        raw = json.loads(resources.files("morphofit").joinpath("data/limits.json").read_text())
    else:
        raw = read_json(path)
    return {k: float(v) for k, v in raw.items() if not k.startswith("_")}


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple    # tuple of tuples of subject ids
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_test(self, f: int) -> Tuple[list, list]:
        test = sorted(self.folds[f])
        train = sorted(s for g, fold in enumerate(self.folds) if g != f for s in fold)
        return train, test

    def to_json(self) -> dict:
        return {"seed": self.seed, "folds": [list(f) for f in self.folds]}


def make_folds(subject_ids: Sequence, k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle of the sorted ids, then round-robin into ``k`` folds."""
    ids = sorted(set(subject_ids))
    if len(ids) != len(list(subject_ids)):
        raise PlanError("duplicate subject ids")
    if k < 2:
        raise PlanError("need k >= 2")
    if k > len(ids):
        raise PlanError(f"cannot split {len(ids)} subjects into {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    folds = tuple(tuple(ids[i] for i in sorted(perm[j::k])) for j in range(k))
    return FoldPlan(folds, int(seed))


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    """Per-subject features and tape truths (meters), rows in sorted id order."""

    ids: List[str]
    features: Dict[str, np.ndarray]   # measurement -> (n, C)
    truths: Dict[str, np.ndarray]     # measurement -> (n,)

    @classmethod
    def from_maps(cls, feature_map: Mapping[str, Mapping[str, Sequence[float]]],
                  truth_map: Mapping[str, Mapping[str, float]], names: Sequence[str]) -> "Dataset":
        ids = sorted(set(feature_map) | set(truth_map))
        missing = [s for s in ids
                   if s not in feature_map or s not in truth_map
                   or any(n not in feature_map[s] or n not in truth_map[s] for n in names)]
        if missing:
            raise EvaluationError(f"missing features or truths for subjects: {', '.join(map(str, missing))}")
        feats = {n: np.array([np.asarray(feature_map[s][n], dtype=np.float64) for s in ids]) for n in names}
        truths = {n: np.array([float(truth_map[s][n]) for s in ids]) for n in names}
        return cls(ids, feats, truths)

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        pos = {s: i for i, s in enumerate(self.ids)}
        missing = [s for s in ids if s not in pos]
        if missing:
            raise EvaluationError(f"subjects not in dataset: {', '.join(map(str, missing))}")
        return np.array([pos[s] for s in ids], dtype=np.int64)


@dataclass
class MeasurementResult:
    name: str
    mae_mm: float
    success_rate: Optional[float]
    n_subjects: int
    c_used: int
    limit_mm: Optional[float] = None


@dataclass
class EvalReport:
    results: List[MeasurementResult]
    regressor: str = ""

    @property
    def average_mae_mm(self) -> float:
        return float(np.mean([r.mae_mm for r in self.results]))

    @property
    def average_success_rate(self) -> Optional[float]:
        """Mean of per-measurement success rates over measurements that have a limit."""
        rates = [r.success_rate for r in self.results if r.success_rate is not None]
        return float(np.mean(rates)) if rates else None

    def result(self, name: str) -> MeasurementResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# average success rate = mean of per-measurement rates over limited measurements\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["measurement", "mae_mm", "success_rate", "n_subjects", "c_used", "limit_mm"])
        for r in self.results:
            w.writerow([r.name, f"{r.mae_mm:.6f}", "" if r.success_rate is None else f"{r.success_rate:.6f}",
                        r.n_subjects, r.c_used, "" if r.limit_mm is None else r.limit_mm])
        avg = self.average_success_rate
        w.writerow(["AVERAGE", f"{self.average_mae_mm:.6f}", "" if avg is None else f"{avg:.6f}", "", "", ""])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "regressor": self.regressor,
            "average_rule": "mean of per-measurement success rates over measurements with a limit",
            "average_mae_mm": self.average_mae_mm,
            "average_success_rate": self.average_success_rate,
            "measurements": [r.__dict__ for r in self.results],
        }

    def save(self, csv_path=None, json_path=None) -> None:
        if csv_path:
            atomic_write_text(csv_path, self.to_csv())
        if json_path:
            write_json(json_path, self.to_json())


@dataclass
class CVResult:
    report: EvalReport
    predictions: List[dict]
    models: Dict[Tuple[str, int], object]
    params: Dict[str, List[dict]]

    def predictions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["subject_id", "measurement", "truth_mm", "estimate_mm", "abs_error_mm", "within_limit"]
        w.writerow(cols)
        for p in self.predictions:
            w.writerow([p["subject_id"], p["measurement"], f"{p['truth_mm']:.6f}", f"{p['estimate_mm']:.6f}",
                        f"{p['abs_error_mm']:.6f}", "" if p["within_limit"] is None else int(p["within_limit"])])
        return buf.getvalue()


def _fold_params(dataset: Dataset, name: str, config: RegressorConfig, folds: FoldPlan) -> List[dict]:
    out = []
    for f in range(folds.k):
        train, _ = folds.train_test(f)
        r = dataset.rows(train)
        out.append(select_params(config, dataset.features[name][r], dataset.truths[name][r]))
    return out


def cv_evaluate(dataset: Dataset, specs: Sequence[MeasurementSpec], config: RegressorConfig,
                folds: FoldPlan, limits: Optional[Mapping[str, float]] = None) -> CVResult:
    """K-fold estimates for every measurement; tuning never sees the test fold."""
    all_ids = sorted(s for f in folds.folds for s in f)
    missing = sorted(set(all_ids) - set(dataset.ids))
    if missing:
        raise EvaluationError(f"missing subject data: {', '.join(map(str, missing))}")
    results, preds, models, params = [], [], {}, {}
    for spec in specs:
        name = spec.name
        if name not in dataset.features:
            raise EvaluationError(f"no features for measurement {name}")
        X, t = dataset.features[name], dataset.truths[name]
        if X.shape[1] != spec.n_paths:
            raise EvaluationError(f"{name}: {X.shape[1]} features but {spec.n_paths} paths")
        limit = spec.limit_mm if spec.limit_mm is not None else (limits or {}).get(name)
        params[name] = _fold_params(dataset, name, config, folds)
        truth_all, est_all, sid_all = [], [], []
        for f in range(folds.k):
            train, test = folds.train_test(f)
            rtr, rte = dataset.rows(train), dataset.rows(test)
            model = fit(config, X[rtr], t[rtr], params[name][f])
            models[(name, f)] = model
            est = model.predict(X[rte])
            truth_all.append(t[rte])
            est_all.append(est)
            sid_all.extend(test)
        tt, ee = np.concatenate(truth_all), np.concatenate(est_all)
        order = np.argsort(np.array(sid_all, dtype=object), kind="stable")
        for i in order:
            err = abs(tt[i] - ee[i]) * 1000.0
            preds.append({"subject_id": sid_all[i], "measurement": name, "truth_mm": tt[i] * 1000.0,
                          "estimate_mm": ee[i] * 1000.0, "abs_error_mm": err,
                          "within_limit": None if limit is None else bool(abs(tt[i] - ee[i]) <= limit / 1000.0 * (1 + 1e-12))})
        results.append(MeasurementResult(name, mae(tt, ee), None if limit is None else success_rate(tt, ee, limit),
                                         len(tt), spec.n_paths, limit))
    return CVResult(EvalReport(results, config.kind), preds, models, params)


# ---------------------------------------------------------------------------
# path-count sweep


@dataclass
class SweepResult:
    name: str
    entries: List[Tuple[int, float]]          # (C, mae_mm)
    subsets: Dict[int, List[Tuple[int, ...]]]  # C -> chosen path indices per fold

    @property
    def best_single_mae(self) -> float:
        return dict(self.entries)[1]

    @property
    def best_multi(self) -> Optional[Tuple[int, float]]:
        multi = [(c, m) for c, m in self.entries if c >= 2]
        return min(multi, key=lambda cm: (cm[1], cm[0])) if multi else None

    def best_single_paths(self) -> List[Tuple[int, ...]]:
        return self.subsets.get(1, [])


def _inner_mae(kind, X, t, splits, params) -> float:
    err = 0.0
    for test in splits:
        train = np.setdiff1d(np.arange(len(t)), test)
        model = fit_with(kind, X[train], t[train], params)
        err += np.abs(model.predict(X[test]) - t[test]).sum()
    return err / len(t)


def sweep_paths(dataset: Dataset, spec: MeasurementSpec, c_range: Iterable[int], config: RegressorConfig,
                folds: FoldPlan, params: Optional[List[dict]] = None, budget: bool = True) -> SweepResult:
    """MAE as a function of the number of paths allowed.

    Within each training fold, paths are added greedily by inner-CV MAE (ties
    to the lower path index). With ``budget=True`` the entry for C uses the
    greedy prefix of at most C paths with the lowest inner-CV MAE (forward
    selection with early stopping); with ``budget=False`` it uses exactly C
    paths. The chosen subset is fitted on the whole training fold and scored
    on the test fold. Hyperparameters are selected once per fold on the full
    path set and reused for every subset, so with ``budget=False`` the
    full-set entry reproduces :func:`cv_evaluate`.
    """
    cs = sorted(set(int(c) for c in c_range))
    if not cs or cs[0] < 1 or cs[-1] > spec.n_paths:
        raise EvaluationError(f"{spec.name}: path counts must lie in 1..{spec.n_paths}")
    name = spec.name
    X, t = dataset.features[name], dataset.truths[name]
    if params is None:
        params = _fold_params(dataset, name, config, folds)
    c_max = cs[-1]
    truth = {c: [] for c in cs}
    est = {c: [] for c in cs}
    subsets = {c: [] for c in cs}
    for f in range(folds.k):
        train, test = folds.train_test(f)
        rtr, rte = dataset.rows(train), dataset.rows(test)
        Xtr, ttr = X[rtr], t[rtr]
        k = min(config.inner_folds, len(ttr))
        perm = np.random.default_rng(config.seed).permutation(len(ttr))
        splits = [np.sort(perm[j::k]) for j in range(k)]
        chosen: List[int] = []
        kept, kept_err = [], np.inf
        for c in range(1, c_max + 1):
            if c == spec.n_paths:
                chosen = list(range(spec.n_paths))
                best_err = _inner_mae(config.kind, Xtr, ttr, splits, params[f]) if budget else -np.inf
            else:
                best, best_err = None, np.inf
                for p in range(spec.n_paths):
                    if p in chosen:
                        continue
                    cols = sorted(chosen + [p])
                    e = _inner_mae(config.kind, Xtr[:, cols], ttr, splits, params[f])
                    if e < best_err:
                        best, best_err = p, e
                chosen = chosen + [best]
            if not budget or best_err < kept_err:
                kept, kept_err = list(chosen), best_err
            if c in truth:
                cols = sorted(kept)
                model = fit_with(config.kind, Xtr[:, cols], ttr, params[f])
                truth[c].append(t[rte])
                est[c].append(model.predict(X[rte][:, cols]))
                subsets[c].append(tuple(cols))
    entries = [(c, mae(np.concatenate(truth[c]), np.concatenate(est[c]))) for c in cs]
    return SweepResult(name, entries, subsets)

"""``morphofit`` command line: synth, register, measure, train, predict, evaluate, pipeline."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError, MorphofitError, RegistrationError
from .evaluation import Dataset, EvalReport, MeasurementResult, cv_evaluate, load_limits, make_folds, mae, success_rate, sweep_paths
from .fileio import atomic_write_text, read_json, write_array, write_json
from .measure import extract_features, load_paths, read_features_csv, write_features_csv
from .mesh import load_obj, save_obj
from .nricp import NricpConfig, desk_schedule, paper_schedule
from .pipeline import fit_scan
from .plotting import error_histogram, sweep_plot
from .prealign import template_height_model
from .regress import RegressorConfig, fit, load_model, save_model
from .synth import ScanRecipe, read_subjects_csv, write_cohort
from .template import generate_synthetic_template, load_template, save_template

log = logging.getLogger("morphofit")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    template_dir: Optional[str] = None
    template_seed: int = 0
    schedule: object = "desk"            # "desk", "paper" or an explicit list
    gamma: float = NricpConfig.gamma
    epsilon: Optional[float] = None
    max_inner_iters: int = 20
    distance_gate: Optional[float] = 4.0
    normal_gate_deg: Optional[float] = 60.0
    regressor: str = "svr"
    ridge_lambda: Optional[float] = None
    svr_c: Optional[float] = None
    svr_bandwidth_factor: Optional[float] = None
    svr_eps_mm: Optional[float] = None
    folds: int = 5
    seed: int = 0
    paths_file: Optional[str] = None
    limits_file: Optional[str] = None
    out: str = "morphofit-out"
    # synth
    noise_sigma: float = 0.002
    unit_scale: float = 1000.0
    beta_sigma: float = 1.0
    arm_jitter: float = 0.1

    @classmethod
    def load(cls, path: Optional[str]) -> "PipelineConfig":
        if path is None:
            return cls()
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        raw = read_json(path)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**raw)
        for key in ("template_dir", "paths_file", "limits_file"):
            p = getattr(cfg, key)
            if p is not None and not os.path.exists(p):
                raise ConfigError(f"{key} does not exist: {p}")
        return cfg

    def nricp(self) -> NricpConfig:
        if self.schedule == "desk":
            sched = desk_schedule()
        elif self.schedule == "paper":
            sched = paper_schedule()
        elif isinstance(self.schedule, (list, tuple)):
            sched = tuple(self.schedule)
        else:
            raise ConfigError(f"bad schedule {self.schedule!r}")
        return NricpConfig(stiffness_schedule=sched, gamma=self.gamma, epsilon=self.epsilon,
                           max_inner_iters=self.max_inner_iters, distance_gate=self.distance_gate,
                           normal_gate_deg=self.normal_gate_deg)

    def regressor_config(self) -> RegressorConfig:
        eps = None if self.svr_eps_mm is None else self.svr_eps_mm / 1000.0
        return RegressorConfig(self.regressor, self.ridge_lambda, self.svr_c, self.svr_bandwidth_factor,
                               eps, seed=self.seed)


def _template(cfg: PipelineConfig, fallback_dir: Optional[str] = None):
    d = cfg.template_dir or (fallback_dir if fallback_dir and os.path.isdir(fallback_dir) else None)
    t = load_template(d) if d else generate_synthetic_template(seed=cfg.template_seed)
    if cfg.paths_file:
        paths = load_paths(cfg.paths_file)
        if cfg.limits_file is None:
            t.paths = paths
        else:
            lim = load_limits(cfg.limits_file)
            from .measure import MeasurementSpec
            t.paths = [MeasurementSpec(s.name, s.paths, lim.get(s.name, s.limit_mm)) for s in paths]
    elif cfg.limits_file:
        from .measure import MeasurementSpec
        lim = load_limits(cfg.limits_file)
        t.paths = [MeasurementSpec(s.name, s.paths, lim.get(s.name, s.limit_mm)) for s in t.paths]
    return t


def _require_file(path: str) -> None:
    if not os.path.isfile(path):
        raise MorphofitError(f"file not found: {path}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: PipelineConfig) -> int:
    if args.n < 1:
        raise ConfigError("-n must be at least 1")
    out = args.out or cfg.out
    template = _template(cfg)
    save_template(template, os.path.join(out, "template"))
    recipe = ScanRecipe(noise_sigma=cfg.noise_sigma, yaw=None, translation=None, unit_scale=cfg.unit_scale)
    indices = list(range(args.n))
    if args.jobs > 1:
        chunks = [indices[j::args.jobs] for j in range(args.jobs)]
        with ProcessPoolExecutor(args.jobs) as ex:
            parts = list(ex.map(_synth_chunk, [(out, template, args.n, args.seed, recipe, cfg.beta_sigma,
                                                 cfg.arm_jitter, c) for c in chunks]))
        subjects = sorted((s for p in parts for s in p), key=lambda s: s.id)
    else:
        subjects = write_cohort(out, template, args.n, args.seed, recipe, cfg.beta_sigma, cfg.arm_jitter)
    # the summary files are always written from the full, ordered list
    from .synth import subjects_csv
    names = [p.name for p in template.paths]
    atomic_write_text(os.path.join(out, "subjects.csv"), subjects_csv(subjects, names))
    write_json(os.path.join(out, "recipe.json"), {
        "seed": args.seed, "beta_sigma": cfg.beta_sigma, "arm_jitter": cfg.arm_jitter,
        "recipe": recipe.to_json()})
    print(f"wrote {len(subjects)} subjects to {out}")
    return 0


def _synth_chunk(job):
    out, template, n, seed, recipe, beta_sigma, arm_jitter, idx = job
    import tempfile
    # write subject folders directly; summary files go to a scratch dir and are discarded
    with tempfile.TemporaryDirectory() as scratch:
        subs = write_cohort(scratch, template, n, seed, recipe, beta_sigma, arm_jitter, indices=idx)
        for s in subs:
            d = os.path.join(out, s.id)
            os.makedirs(d, exist_ok=True)
            for f in ("true.obj", "scan.obj"):
                os.replace(os.path.join(scratch, s.id, f), os.path.join(d, f))
    return subs


def _register_artifacts(out: str, outcome) -> None:
    os.makedirs(out, exist_ok=True)
    save_obj(outcome.deformed, os.path.join(out, "registered.obj"))
    outcome.trace.save(os.path.join(out, "trace.csv"))
    outcome.alignment.save(os.path.join(out, "alignment.json"))
    write_array(os.path.join(out, "X.bin"), outcome.X)


def cmd_register(args, cfg: PipelineConfig) -> int:
    _require_file(args.scan)
    if args.paper_schedule:
        cfg.schedule = "paper"
    template = _template(cfg)
    scan = load_obj(args.scan)
    out = args.out or cfg.out
    try:
        outcome = fit_scan(template, scan, config=cfg.nricp(), subject_id=os.path.basename(args.scan))
    except RegistrationError as exc:
        trace = getattr(exc, "trace", None)
        if trace is not None:
            os.makedirs(out, exist_ok=True)
            trace.save(os.path.join(out, "trace.csv"))
        raise
    _register_artifacts(out, outcome)
    write_features_csv([(os.path.basename(args.scan), k, v) for k, v in outcome.features.items()],
                       os.path.join(out, "features.csv"))
    from .nricp import find_correspondences
    # distance of the registered template to the (normalized) scan, over active vertices
    from .prealign import normalize_scan
    norm, _ = normalize_scan(scan)
    corr = find_correspondences(outcome.deformed, norm, cfg.nricp())
    w = corr.weights > 0
    dist = float(corr.distances[w].mean()) if w.any() else float("nan")
    print(f"mean active-vertex distance: {dist:.6g} m ({100 * w.mean():.1f}% active)")
    return 0


def cmd_measure(args, cfg: PipelineConfig) -> int:
    _require_file(args.mesh)
    template = _template(cfg)
    mesh = load_obj(args.mesh)
    sid = args.subject_id or os.path.splitext(os.path.basename(args.mesh))[0]
    rows = [(sid, s.name, extract_features(mesh, s)) for s in template.paths]
    write_features_csv(rows, args.out or "features.csv")
    return 0


def _truths_from_csv(path: str) -> Dict[str, Dict[str, float]]:
    _require_file(path)
    return {sid: {k: v / 1000.0 for k, v in d.items()} for sid, d in read_subjects_csv(path).items()}


def cmd_train(args, cfg: PipelineConfig) -> int:
    _require_file(args.features)
    if args.regressor:
        cfg.regressor = args.regressor
    feats = read_features_csv(args.features)
    truths = _truths_from_csv(args.truths)
    names = sorted({n for d in feats.values() for n in d})
    ids = sorted(set(feats) & set(truths))
    data = Dataset.from_maps({s: feats[s] for s in ids}, {s: truths[s] for s in ids}, names)
    out = args.out or os.path.join(cfg.out, "models")
    os.makedirs(out, exist_ok=True)
    rc = cfg.regressor_config()
    for n in names:
        save_model(fit(rc, data.features[n], data.truths[n]), os.path.join(out, f"{n}.json"))
    print(f"trained {len(names)} {rc.kind} models on {len(ids)} subjects")
    return 0


def cmd_predict(args, cfg: PipelineConfig) -> int:
    _require_file(args.features)
    feats = read_features_csv(args.features)
    rows = []
    for sid in sorted(feats):
        for name in sorted(feats[sid]):
            path = os.path.join(args.models, f"{name}.json")
            _require_file(path)
            est = float(load_model(path).predict(feats[sid][name][None, :])[0])
            rows.append([sid, name, f"{est * 1000.0:.6f}"])
    lines = ["subject_id,measurement,estimate_mm"] + [",".join(r) for r in rows]
    atomic_write_text(args.out or "estimates.csv", "\n".join(lines) + "\n")
    return 0


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    _require_file(args.estimates)
    truths = _truths_from_csv(args.truths)
    limits = load_limits(cfg.limits_file)
    per: Dict[str, list] = {}
    with open(args.estimates, newline="") as fh:
        for row in csv.DictReader(fh):
            sid, name = row["subject_id"], row["measurement"]
            if sid not in truths or name not in truths[sid]:
                raise MorphofitError(f"no truth for subject {sid}, measurement {name}")
            per.setdefault(name, []).append((truths[sid][name], float(row["estimate_mm"]) / 1000.0))
    results = []
    for name in sorted(per):
        t, e = map(np.array, zip(*per[name]))
        lim = limits.get(name)
        results.append(MeasurementResult(name, mae(t, e), None if lim is None else success_rate(t, e, lim),
                                         len(t), 0, lim))
    rep = EvalReport(results, "")
    out = args.out or cfg.out
    os.makedirs(out, exist_ok=True)
    rep.save(os.path.join(out, "report.csv"), os.path.join(out, "report.json"))
    print(rep.to_csv(), end="")
    return 0


def _pipeline_job(job):
    sid, scan_path, template, hm, ncfg = job
    try:
        scan = load_obj(scan_path)
        outcome = fit_scan(template, scan, hm, ncfg, subject_id=sid)
        return sid, outcome.features, None
    except (MorphofitError, OSError) as exc:
        return sid, None, f"{type(exc).__name__}: {exc}"


def cmd_pipeline(args, cfg: PipelineConfig) -> int:
    cohort = args.cohort
    subjects_path = os.path.join(cohort, "subjects.csv")
    _require_file(subjects_path)
    if args.paper_schedule:
        cfg.schedule = "paper"
    if args.regressor:
        cfg.regressor = args.regressor
    out = args.out or cfg.out
    os.makedirs(out, exist_ok=True)
    template = _template(cfg, os.path.join(cohort, "template"))
    limits = load_limits(cfg.limits_file)
    truths = _truths_from_csv(subjects_path)
    hm = template_height_model(template)
    ncfg = cfg.nricp()

    skipped: Dict[str, str] = {}
    jobs = []
    for sid in sorted(truths):
        p = os.path.join(cohort, sid, "scan.obj")
        if not os.path.isfile(p):
            skipped[sid] = "scan missing"
        else:
            jobs.append((sid, p, template, hm, ncfg))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_pipeline_job, jobs))
    else:
        results = [_pipeline_job(j) for j in jobs]
    feats = {}
    for sid, f, err in results:
        if err is None:
            feats[sid] = f
        else:
            skipped[sid] = err
            log.warning("skipping %s: %s", sid, err)
    names = [s.name for s in template.paths]
    write_features_csv([(sid, n, feats[sid][n]) for sid in sorted(feats) for n in names],
                       os.path.join(out, "features.csv"))
    if len(feats) < cfg.folds:
        raise MorphofitError(f"only {len(feats)} subjects registered; need at least {cfg.folds}")

    data = Dataset.from_maps(feats, {s: truths[s] for s in feats}, names)
    plan = make_folds(data.ids, cfg.folds, cfg.seed)
    rc = cfg.regressor_config()
    cv = cv_evaluate(data, template.paths, rc, plan, limits)
    sweeps = [sweep_paths(data, s, range(1, s.n_paths + 1), rc, plan, cv.params[s.name]) for s in template.paths]

    atomic_write_text(os.path.join(out, "predictions.csv"), cv.predictions_csv())
    cv.report.save(os.path.join(out, "report.csv"))
    rep = cv.report.to_json()
    rep["n_subjects"] = len(data.ids)
    rep["skipped"] = [{"subject_id": s, "reason": skipped[s]} for s in sorted(skipped)]
    rep["folds"] = plan.to_json()
    rep["hyperparameters"] = cv.params
    rep["sweeps"] = [{"measurement": sw.name, "entries": [{"C": c, "mae_mm": m} for c, m in sw.entries],
                      "subsets": {str(c): [list(x) for x in v] for c, v in sw.subsets.items()}}
                     for sw in sweeps]
    write_json(os.path.join(out, "report.json"), rep)
    sweep_rows = ["measurement,C,mae_mm"] + [f"{sw.name},{c},{m:.6f}" for sw in sweeps for c, m in sw.entries]
    atomic_write_text(os.path.join(out, "sweep.csv"), "\n".join(sweep_rows) + "\n")

    fig_dir = os.path.join(out, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    for r in cv.report.results:
        errs = [p["estimate_mm"] - p["truth_mm"] for p in cv.predictions if p["measurement"] == r.name]
        error_histogram(errs, os.path.join(fig_dir, f"hist_{r.name}.svg"), r.name, r.limit_mm)
    sweep_plot(sweeps, os.path.join(fig_dir, "sweep.svg"))

    print(cv.report.to_csv(), end="")
    if skipped:
        print(f"skipped {len(skipped)} subject(s): {', '.join(sorted(skipped))}", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline configuration")
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for subject-level work")
    common.add_argument("--paper-schedule", action="store_true",
                        help="stiffness 100 down to 1 in steps of 1 instead of the 8-step desk schedule")
    common.add_argument("--regressor", choices=("ols", "ridge", "svr"), default=None)
    common.add_argument("--out", default=None, help="output file or directory")

    p = _Parser(prog="morphofit", description="Template-based body measurement from 3D scans.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    s.add_argument("-n", type=int, required=True, help="number of subjects")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("register", parents=[common], help="register the template to one scan")
    s.add_argument("scan")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("measure", parents=[common], help="path-length features of a registered mesh")
    s.add_argument("mesh")
    s.add_argument("--subject-id", default=None)
    s.set_defaults(func=cmd_measure)

    s = sub.add_parser("train", parents=[common], help="fit one regressor per measurement")
    s.add_argument("features")
    s.add_argument("truths", help="subjects.csv with <name>_mm columns")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="apply trained models to features")
    s.add_argument("models")
    s.add_argument("features")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="score estimates against truths")
    s.add_argument("estimates")
    s.add_argument("truths")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("pipeline", parents=[common], help="register a cohort and cross-validate")
    s.add_argument("cohort")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    level = os.environ.get("MORPHOFIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = PipelineConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        args.seed = cfg.seed
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return args.func(args, cfg)
    except MorphofitError as exc:
        print(f"morphofit: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"morphofit: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

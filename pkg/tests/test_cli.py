"""Command-line front end: exit codes, artifacts and determinism."""
import csv
import filecmp
import json
import os

import numpy as np
import pytest

from morphofit import generate_synthetic_template, save_obj
from morphofit.cli import PipelineConfig, main
from morphofit.errors import ConfigError


def _tree_identical(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(_tree_identical(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


def test_synth_twice_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "-n", "3", "--seed", "7", "--out", str(a)]) == 0
    assert main(["synth", "-n", "3", "--seed", "7", "--out", str(b)]) == 0
    assert _tree_identical(a, b)


def test_synth_other_seed_differs(tmp_path):
    main(["synth", "-n", "2", "--seed", "1", "--out", str(tmp_path / "a")])
    main(["synth", "-n", "2", "--seed", "2", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "subjects.csv").read_bytes() != (tmp_path / "b" / "subjects.csv").read_bytes()


def test_synth_zero_subjects_is_usage_error(tmp_path, capsys):
    assert main(["synth", "-n", "0", "--out", str(tmp_path / "c")]) == 1
    assert "-n" in capsys.readouterr().err


def test_synth_csv_rows(tmp_path):
    main(["synth", "-n", "4", "--seed", "3", "--out", str(tmp_path)])
    lines = (tmp_path / "subjects.csv").read_text().strip().splitlines()
    assert len(lines) == 4 + 1
    ids = [l.split(",")[0] for l in lines[1:]]
    assert all((tmp_path / sid / "scan.obj").is_file() for sid in ids)


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--bogus"])
    assert exc.value.code == 1


def test_missing_scan_names_path(tmp_path, capsys):
    path = str(tmp_path / "nope.obj")
    assert main(["register", path, "--out", str(tmp_path / "o")]) == 2
    assert path in capsys.readouterr().err


def test_config_unknown_key_rejected(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"gama": 0.1}))
    with pytest.raises(ConfigError):
        PipelineConfig.load(str(p))
    assert main(["synth", "-n", "1", "--config", str(p), "--out", str(tmp_path / "x")]) == 1


def test_config_missing_referenced_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"limits_file": str(tmp_path / "limits.json")}))
    with pytest.raises(ConfigError):
        PipelineConfig.load(str(p))


@pytest.fixture(scope="module")
def self_scan(tmp_path_factory):
    d = tmp_path_factory.mktemp("self")
    path = str(d / "self.obj")
    save_obj(generate_synthetic_template().canonical, path)
    return d, path


def _distance(out):
    line = [l for l in out.splitlines() if l.startswith("mean active-vertex distance")][0]
    return float(line.split(":")[1].split()[0])


def test_register_template_against_itself(self_scan, capsys):
    d, path = self_scan
    out = d / "desk"
    assert main(["register", path, "--out", str(out)]) == 0
    assert _distance(capsys.readouterr().out) < 1e-9
    for f in ("registered.obj", "trace.csv", "alignment.json", "X.bin", "features.csv"):
        assert (out / f).is_file()


def test_paper_schedule_has_100_outer_blocks(self_scan, capsys):
    d, path = self_scan
    out = d / "paper"
    assert main(["register", path, "--paper-schedule", "--out", str(out)]) == 0
    capsys.readouterr()
    with open(out / "trace.csv", newline="") as fh:
        alphas = [float(r["alpha"]) for r in csv.DictReader(fh)]
    blocks = list(dict.fromkeys(alphas))
    assert len(blocks) == 100
    assert blocks[0] == 100.0 and blocks[-1] == 1.0


def test_measure_then_inputs_untouched(self_scan):
    d, path = self_scan
    before = open(path, "rb").read()
    out = d / "m.csv"
    assert main(["measure", path, "--out", str(out)]) == 0
    assert open(path, "rb").read() == before
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 11 * 5
    assert all(float(r["length_m"]) > 0 for r in rows)


# ---------------------------------------------------------------------------
# end-to-end smoke cohort


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cohort, out = root / "cohort", root / "out"
    assert main(["synth", "-n", "20", "--seed", "11", "--out", str(cohort)]) == 0
    victim = sorted(d for d in os.listdir(cohort) if (cohort / d / "scan.obj").is_file())[3]
    os.remove(cohort / victim / "scan.obj")
    code = main(["pipeline", str(cohort), "--regressor", "ridge", "--out", str(out)])
    return cohort, out, victim, code


@pytest.mark.slow
def test_pipeline_partial_success_exit_code(smoke):
    assert smoke[3] == 2


@pytest.mark.slow
def test_pipeline_reports_skipped_subject(smoke):
    _, out, victim, _ = smoke
    rep = json.loads((out / "report.json").read_text())
    assert [s["subject_id"] for s in rep["skipped"]] == [victim]
    assert rep["n_subjects"] == 19


@pytest.mark.slow
def test_pipeline_one_row_per_measurement(smoke):
    cohort, out, _, _ = smoke
    names = [s.name for s in generate_synthetic_template().paths]
    rows = [r for r in csv.reader(l for l in open(out / "report.csv") if not l.startswith("#"))]
    assert rows[0][0] == "measurement"
    assert [r[0] for r in rows[1:-1]] == names
    assert rows[-1][0] == "AVERAGE"
    for n in names:
        assert (out / "figures" / f"hist_{n}.svg").is_file()
    assert (out / "figures" / "sweep.svg").is_file()


@pytest.mark.slow
def test_pipeline_mae_matches_predictions(smoke):
    _, out, _, _ = smoke
    rep = json.loads((out / "report.json").read_text())
    per = {}
    with open(out / "predictions.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["subject_id", "measurement", "truth_mm", "estimate_mm",
                             "abs_error_mm", "within_limit"]
    for r in rows:
        per.setdefault(r["measurement"], []).append(abs(float(r["truth_mm"]) - float(r["estimate_mm"])))
    for m in rep["measurements"]:
        assert len(per[m["name"]]) == 19
        # predictions are written with 6 decimals
        assert m["mae_mm"] == pytest.approx(np.mean(per[m["name"]]), abs=2e-6)


@pytest.mark.slow
def test_train_predict_evaluate_deterministic(smoke, tmp_path):
    cohort, out, _, _ = smoke
    truths = str(cohort / "subjects.csv")
    feats = str(out / "features.csv")
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        assert main(["train", feats, truths, "--regressor", "ridge", "--out", str(d / "models")]) == 0
        assert main(["predict", str(d / "models"), feats, "--out", str(d / "est.csv")]) == 0
        assert main(["evaluate", str(d / "est.csv"), truths, "--out", str(d / "eval")]) == 0
        outs.append(d)
    assert _tree_identical(outs[0], outs[1])
    est = list(csv.DictReader(open(outs[0] / "est.csv")))
    assert len(est) == 19 * 11

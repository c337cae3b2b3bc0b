import json

import numpy as np
import pandas as pd
import pytest
import yaml

from gradegap import __version__, cli
from gradegap.io import MANIFEST, VOLATILE_KEYS, read_json, sha256, stable_manifest

SMALL = {
    "simulate": {"J": 30, "students_per_teacher": 20, "years": [2014, 2015, 2016],
                 "subjects": ["math", "science"], "employment": True, "iat": {"d_mean": 0.301}},
}


def _config(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return path


def _ok(*argv):
    assert cli.run([str(a) for a in argv]) == 0


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    doc = dict(SMALL, hetero={"panel": str(root / "sim"), "iat": str(root / "iat" / "iat_scores.csv")})
    cfg = _config(root / "c.yaml", doc)
    _ok("simulate", "--config", cfg, "--seed", 5, "--out", root / "sim")
    _ok("gaps", "--in", root / "sim", "--out", root / "gaps")
    _ok("iat-score", "--in", root / "sim", "--out", root / "iat")
    _ok("hetero", "--config", cfg, "--in", root / "gaps", "--out", root / "het")
    _ok("eb", "--in", root / "gaps", "--out", root / "eb")
    _ok("effects", "--in", root / "sim", "--out", root / "eff")
    _ok("report", "--in", root, "--out", root / "rep")
    return root


def test_gaps_file_has_one_row_per_teacher_and_subject(pipeline):
    gaps = pd.read_csv(pipeline / "gaps" / "gaps.csv")
    assert len(gaps) == 30 * 2
    assert gaps.groupby("subject").size().to_dict() == {"math": 30, "science": 30}
    assert {"teacher_id", "theta_hat", "se"} <= set(gaps.columns)


def test_every_step_writes_manifest(pipeline):
    for step in ("sim", "gaps", "iat", "het", "eb", "eff", "rep"):
        doc = read_json(pipeline / step / MANIFEST)
        assert doc["status"] == "ok"
        assert doc["tool"]["version"] == __version__
        assert all(k in doc for k in VOLATILE_KEYS)


def test_manifest_digests_trace_inputs_and_outputs(pipeline):
    doc = read_json(pipeline / "gaps" / MANIFEST)
    assert doc["command"] == "gaps"
    assert doc["inputs"]["sim/scores.csv"] == sha256(pipeline / "sim" / "scores.csv")
    assert "sim/manifest.json" not in doc["inputs"]
    for name, digest in doc["outputs"].items():
        assert sha256(pipeline / "gaps" / name) == digest


def test_iat_scores_standardized(pipeline):
    scores = pd.read_csv(pipeline / "iat" / "iat_scores.csv")
    z = scores["iat_std"].dropna()
    assert abs(z.mean()) < 1e-12 and z.std(ddof=0) == pytest.approx(1.0, abs=1e-12)


def test_gaussian_posterior_written(pipeline):
    post = pd.read_csv(pipeline / "eb" / "posterior.csv")
    assert len(post) == 60
    prior = read_json(pipeline / "eb" / "prior_math.json")
    assert prior["kind"] == "gaussian"


def test_report_layout(pipeline):
    index = read_json(pipeline / "rep" / "report_index.json")["reports"]
    assert "effects_grad_ever" in index and "hetero_iat_math" in index
    lines = (pipeline / "rep" / "report_effects_grad_ever.txt").read_text().splitlines()
    assert lines[0] == "Outcome: grad_ever"
    doc = read_json(pipeline / "eff" / "effects_grad_ever.json")
    kept = [c for c in doc["coefficients"] if not c["dropped"]]
    for i, c in enumerate(kept):
        name_line, se_line = lines[2 + 2 * i], lines[3 + 2 * i]
        assert name_line.split()[0] == c["name"]
        assert float(name_line.split()[1]) == pytest.approx(c["estimate"], abs=5e-5)
        assert se_line.strip() == f"({c['se']:.4f})"
    body = "\n".join(lines)
    assert "Ybar (female)" in body and "Ybar (male)" in body and "Observations" in body
    rep = read_json(pipeline / "rep" / "report_effects_grad_ever.json")
    assert rep["source"] == "eff/effects_grad_ever.json"


def test_rerun_is_byte_identical(pipeline, tmp_path):
    cfg = _config(tmp_path / "c.yaml", SMALL)
    _ok("simulate", "--config", cfg, "--seed", 5, "--out", tmp_path / "sim")
    _ok("gaps", "--in", tmp_path / "sim", "--out", tmp_path / "gaps", "--threads", 2)
    for step in ("sim", "gaps"):
        for p in sorted((pipeline / step).iterdir()):
            if p.name == MANIFEST:
                continue
            assert p.read_bytes() == (tmp_path / step / p.name).read_bytes(), p.name
    a, b = stable_manifest(pipeline / "gaps" / MANIFEST), stable_manifest(tmp_path / "gaps" / MANIFEST)
    assert a["outputs"] == b["outputs"] and a["inputs"] == b["inputs"]


def test_deconvolve_with_calibration(tmp_path):
    cfg = _config(tmp_path / "c.yaml", {"simulate": {"J": 200, "students_per_teacher": 40, "years": [2015, 2016],
                                                     "subjects": ["math"], "noise_sd_blind": 0.3,
                                                     "noise_sd_teacher": 0.3}})
    _ok("simulate", "--config", cfg, "--seed", 5, "--out", tmp_path / "sim")
    _ok("gaps", "--in", tmp_path / "sim", "--out", tmp_path / "gaps")
    _ok("eb", "--in", tmp_path / "gaps", "--out", tmp_path / "eb", "--method", "deconvolve", "--calibrate")
    density = pd.read_csv(tmp_path / "eb" / "density_math.csv")
    assert abs(density["g"].sum() - 1.0) <= 1e-12
    trace = pd.read_csv(tmp_path / "eb" / "calibration_math.csv")
    assert len(trace) == 21 and trace["selected"].sum() == 1
    prior = read_json(tmp_path / "eb" / "prior_math.json")
    assert prior["kind"] == "deconvolved" and prior["converged"]
    assert read_json(tmp_path / "eb" / MANIFEST)["config"]["calibrate"] is True


def test_unknown_flag_prints_usage_and_exits_1(tmp_path, capsys):
    assert cli.run(["gaps", "--bogus", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("usage: gradegap")
    assert json.loads(err.strip().splitlines()[-1])["kind"] == "usage"


def test_unknown_subcommand_exits_1(capsys):
    assert cli.run(["frobnicate"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_validation_error_exits_1_with_report(tmp_path):
    out = tmp_path / "o"
    assert cli.run(["gaps", "--in", str(tmp_path / "missing"), "--out", str(out)]) == 1
    doc = read_json(out / "error.json")
    assert doc["kind"] == "validation" and doc["type"] == "ConfigError"
    assert "does not exist" in doc["message"]


def test_simulate_without_seed_exits_1(tmp_path):
    assert cli.run(["simulate", "--out", str(tmp_path / "o")]) == 1
    assert "seed" in read_json(tmp_path / "o" / "error.json")["message"]
    assert read_json(tmp_path / "o" / MANIFEST)["status"] == "error"


def test_bad_thread_count_exits_1(tmp_path):
    assert cli.run(["simulate", "--seed", "1", "--threads", "0", "--out", str(tmp_path)]) == 1


def test_internal_error_exits_2(tmp_path, monkeypatch):
    def boom(args, cfg, run):
        raise RuntimeError("unexpected")

    monkeypatch.setitem(cli.HANDLERS, "simulate", boom)
    assert cli.run(["simulate", "--seed", "1", "--out", str(tmp_path)]) == 2
    doc = read_json(tmp_path / "error.json")
    assert doc["kind"] == "internal" and doc["type"] == "RuntimeError"
    assert "traceback" in read_json(tmp_path / MANIFEST)["error"]


def test_report_without_results_exits_1(tmp_path):
    (tmp_path / "empty").mkdir()
    assert cli.run(["report", "--in", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 1


def test_render_report_skips_dropped_and_blank_nan():
    text = cli.render_report({"outcome": "y", "n": 10, "r2": float("nan"), "coefficients": [
        {"name": "a", "estimate": 1.5, "se": 0.25, "dropped": False},
        {"name": "b", "estimate": np.nan, "se": np.nan, "dropped": True}]})
    lines = text.splitlines()
    assert lines[2].split() == ["a", "1.5000"] and lines[3].strip() == "(0.2500)"
    assert "b " not in text
    assert lines[-1].split() == ["R-squared"]

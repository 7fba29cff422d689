import csv
import json
import subprocess
import sys

import pytest

from swmkit.cli import EXIT_CONFIG, EXIT_DOMAIN, EXIT_OK, main
from swmkit.codec import load_bundle

DATA = ["--dataset", "synthetic", "--classes", "4", "--samples-per-class", "20"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert main(["gen-patterns", "--count", "44", "--out", str(out)]) == EXIT_OK
    assert main(["train", *DATA, "--patterns", str(out / "patterns.json"), "--pattern-ids", "31,1,16",
                 "--epochs", "2", "--out", str(out)]) == EXIT_OK
    assert main(["pack", "--models", str(out / "models.npz"), "--out", str(out)]) == EXIT_OK
    return out


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_pipeline_outputs(pipeline, capsys):
    out = pipeline
    lib = json.loads((out / "patterns.json").read_text())
    assert len(lib["patterns"]) == 44
    rows = _rows(out / "train_report.csv")
    assert [float(r["sparsity"]) for r in rows] == sorted((float(r["sparsity"]) for r in rows), reverse=True)
    assert load_bundle(out / "bundle.swm").num_models == 3

    assert main(["extract", "--bundle", str(out / "bundle.swm"), "--model", "0", "--out", str(out)]) == EXIT_OK
    text = (out / "condensed_model0.txt").read_text()
    assert text.startswith("# model 0") and "pattern 000 010 010" in text
    assert text in capsys.readouterr().out

    assert main(["predict", *DATA, "--bundle", str(out / "bundle.swm"), "--out", str(out)]) == EXIT_OK
    assert list(_rows(out / "predictions.csv")[0]) == ["index", "label", "prediction"]

    assert main(["report", "--models", str(out / "models.npz"), "--train-report", str(out / "train_report.csv"),
                 "--out", str(out)]) == EXIT_OK
    summary = _rows(out / "summary.csv")
    lat = [float(r["latency_predicted"]) for r in summary]
    assert lat[0] < lat[1] < lat[2]


def test_simulate_outputs(pipeline):
    out = pipeline
    assert main(["simulate", *DATA, "--bundle", str(out / "bundle.swm"), "--power", "5e-3", "--inferences", "3",
                 "--compare-baselines", "--out", str(out)]) == EXIT_OK
    assert len(_rows(out / "run_report.csv")) == 3
    assert _rows(out / "events.csv")[0]["event"] == "power_on"
    strategies = [r["strategy"] for r in _rows(out / "comparison.csv")]
    assert strategies == ["swm", "reload", "no_prune"]
    assert main(["simulate", *DATA, "--bundle", str(out / "bundle.swm"), "--sweep", "5e-3,3e-3",
                 "--out", str(out)]) == EXIT_OK
    sweep = _rows(out / "latency_sweep.csv")
    assert len(sweep) == 6


def test_runs_are_deterministic(tmp_path):
    for name in ("a", "b"):
        d = tmp_path / name
        assert main(["train", *DATA, "--pattern-ids", "1,16", "--epochs", "1", "--seed", "3", "--out", str(d)]) == EXIT_OK
        assert main(["pack", "--models", str(d / "models.npz"), "--out", str(d)]) == EXIT_OK
    assert (tmp_path / "a" / "bundle.swm").read_bytes() == (tmp_path / "b" / "bundle.swm").read_bytes()
    assert (tmp_path / "a" / "train_report.csv").read_text() == (tmp_path / "b" / "train_report.csv").read_text()


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"count": 6, "shape": "3x3"}))
    assert main(["gen-patterns", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    assert len(json.loads((tmp_path / "patterns.json").read_text())["patterns"]) == 6
    assert main(["gen-patterns", "--config", str(cfg), "--count", "9", "--out", str(tmp_path)]) == EXIT_OK
    assert len(json.loads((tmp_path / "patterns.json").read_text())["patterns"]) == 9


def test_exit_codes(tmp_path, pipeline):
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"not_an_option": 1}))
    assert main(["gen-patterns", "--config", str(bad_cfg)]) == EXIT_CONFIG
    assert main(["gen-patterns", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["pack", "--models", str(tmp_path / "nope.npz")]) == EXIT_CONFIG
    assert main(["frobnicate"]) == EXIT_CONFIG
    assert main(["search", *DATA]) == EXIT_CONFIG
    corrupt = tmp_path / "corrupt.swm"
    raw = bytearray((pipeline / "bundle.swm").read_bytes())
    raw[50] ^= 1
    corrupt.write_bytes(bytes(raw))
    assert main(["extract", "--bundle", str(corrupt), "--model", "0", "--out", str(tmp_path)]) == EXIT_DOMAIN
    assert main(["extract", "--bundle", str(pipeline / "bundle.swm"), "--model", "7", "--out", str(tmp_path)]) == EXIT_DOMAIN
    assert main(["gen-patterns", "--count", "500", "--out", str(tmp_path)]) == EXIT_DOMAIN


def test_search_with_small_library(tmp_path):
    assert main(["gen-patterns", "--count", "6", "--out", str(tmp_path)]) == EXIT_OK
    assert main(["search", *DATA, "--patterns", str(tmp_path / "patterns.json"), "--latency-constraint", "1.0",
                 "--accuracy-constraint", "0.01", "--max-episodes", "10", "--epochs-search", "1", "--epochs-final", "1",
                 "--out", str(tmp_path)]) == EXIT_OK
    best = json.loads((tmp_path / "best_assignment.json").read_text())
    assert best["satisfied"] is True and len(best["pattern_ids"]) == 3
    assert _rows(tmp_path / "episodes.csv")[-1]["case"] == "satisfied"
    assert (tmp_path / "models.npz").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "swmkit", "gen-patterns", "--count", "3", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert (tmp_path / "patterns.json").exists()

import csv
import hashlib
import json
import subprocess
import sys

import pytest

from twinsync import cli
from twinsync.delay import REFERENCE_TABLE
from twinsync.stream import PANEL_FILES

FAST_TRAIN = ["--epochs", "5", "--subsample", "200", "--seed", "42"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    assert run("gen-data", "--output", data_dir, "--vehicles", 2, "--samples", 500,
               "--seed", 42) == 0
    csv_path = data_dir / "trajectories.csv"
    models = root / "models"
    assert run("train", "--input", csv_path, "--output", models, *FAST_TRAIN) == 0
    return root, csv_path, models


def test_gen_data_deterministic(tmp_path, pipeline):
    _, csv_path, _ = pipeline
    assert run("gen-data", "--output", tmp_path, "--vehicles", 2, "--samples", 500,
               "--seed", 42) == 0
    assert _digest(tmp_path / "trajectories.csv") == _digest(csv_path)


def test_train_outputs(pipeline):
    _, _, models = pipeline
    for name in ("standardizer.json", "svr_lat.json", "svr_lon.json", "mlp.json",
                 "mlp_history.csv", "metrics_svr.json", "metrics_dnn.json", "metrics.csv"):
        assert (models / name).exists(), name
    doc = json.loads((models / "metrics_svr.json").read_text())
    assert {"mae", "mse", "r2", "n"} <= set(doc["report"])
    assert doc["config"]["seed"] == 42
    hist = (models / "mlp_history.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_loss,val_loss" and len(hist) == 6


def test_pipeline_deterministic(tmp_path, pipeline):
    _, csv_path, models = pipeline
    assert run("train", "--input", csv_path, "--output", tmp_path / "again", *FAST_TRAIN) == 0
    for name in ("metrics_svr.json", "metrics_dnn.json"):
        a = json.loads((models / name).read_text())["report"]
        b = json.loads((tmp_path / "again" / name).read_text())["report"]
        assert a == b
    for out in (tmp_path / "e1", tmp_path / "e2"):
        assert run("evaluate", "--input", csv_path, "--models", models, "--output", out) == 0
    assert (tmp_path / "e1" / "evaluation.csv").read_text() == \
        (tmp_path / "e2" / "evaluation.csv").read_text()


def test_inputs_not_mutated(tmp_path, pipeline):
    _, csv_path, models = pipeline
    before = {p.name: _digest(p) for p in [csv_path, *models.glob("*.json")]}
    run("evaluate", "--input", csv_path, "--models", models, "--output", tmp_path)
    run("annotate", "--input", csv_path, "--models", models, "--output", tmp_path)
    after = {p.name: _digest(p) for p in [csv_path, *models.glob("*.json")]}
    assert before == after


def test_standardized_space(tmp_path, pipeline):
    _, csv_path, models = pipeline
    assert run("evaluate", "--input", csv_path, "--models", models, "--output", tmp_path,
               "--space", "standardized", "--model", "dnn") == 0
    assert (tmp_path / "evaluation_dnn.json").exists()
    assert not (tmp_path / "evaluation_svr.json").exists()


def test_annotate_then_replay(tmp_path, pipeline):
    _, csv_path, models = pipeline
    assert run("annotate", "--input", csv_path, "--models", models, "--output", tmp_path) == 0
    annotated = tmp_path / "annotated.csv"
    with open(annotated) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1000
    assert all(r["pred_svr_lat"] and r["pred_dnn_lon"] for r in rows)

    out = tmp_path / "replay"
    assert run("replay", "--input", annotated, "--output", out, "--time-scale", 0) == 0
    for fname, header in PANEL_FILES.values():
        lines = (out / fname).read_text().splitlines()
        assert lines[0] == ",".join(header)
        assert len(lines) == 1001, fname
    seqs = [json.loads(line)["seq"] for line in (out / "stream.ndjson").read_text().splitlines()]
    assert seqs == list(range(1, 1001))


def test_delay_report_matches_table(tmp_path, capsys):
    assert run("delay-report", "--output", tmp_path) == 0
    printed = capsys.readouterr().out
    rows = list(csv.DictReader(printed.splitlines()))
    assert len(rows) == 9
    for r, (n, a, b, pct) in zip(rows, REFERENCE_TABLE):
        assert int(r["n"]) == n
        assert abs(float(r["no_dt_s"]) - a) <= 1e-6
        assert abs(float(r["dt_s"]) - b) <= 1e-6
        assert abs(float(r["improvement_pct"]) - pct) <= 0.01
    assert (tmp_path / "delay_report.csv").read_text() == printed
    assert json.loads((tmp_path / "delay_report.json").read_text())["rows"][0]["n"] == 2


def test_delay_report_custom_n(capsys):
    assert run("delay-report", "--n", 3, 7) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split(",")[0] for line in lines[1:]] == ["3", "7"]


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"vehicles": 1, "samples": 30, "seed": 7}))
    assert run("gen-data", "--config", cfg, "--output", tmp_path / "a") == 0
    lines = (tmp_path / "a" / "trajectories.csv").read_text().splitlines()
    assert len(lines) == 31
    assert run("gen-data", "--config", cfg, "--samples", 10, "--output", tmp_path / "b") == 0
    assert len((tmp_path / "b" / "trajectories.csv").read_text().splitlines()) == 11


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["bogus"])
    assert exc.value.code == 2


def test_missing_input_names_stage(tmp_path, capsys):
    assert run("train", "--input", tmp_path / "missing.csv", "--output", tmp_path) == 1
    err = capsys.readouterr().err
    assert "stage 'load'" in err


def test_bad_config_names_stage(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("[1, 2]")
    assert run("gen-data", "--config", cfg, "--output", tmp_path) == 1
    assert "stage 'config'" in capsys.readouterr().err


def test_malformed_csv_fails_in_load(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("vehicle_id,timestamp\nV1,0\n")
    assert run("train", "--input", bad, "--output", tmp_path) == 1
    assert "load" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "twinsync", "delay-report", "--n", "2"],
                          capture_output=True, text=True, check=True)
    assert proc.stdout.splitlines()[1].startswith("2,1.6577933")

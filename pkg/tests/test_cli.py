import csv
import json

import pytest

from weldmon.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--cycles-per-class", "4", "--seed", "7", "--out-dir", str(root / "rec")]) == 0
    assert main(["segment", "--in", str(root / "rec"), "--out-dir", str(root / "seg")]) == 0
    return root



def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    assert main(["evaluate", "--bogus", "1"]) == 2


@pytest.mark.parametrize("argv", [["evaluate", "--sensors", "3"], ["evaluate", "--task", "5"], ["segment", "--theta1", "0.5"], ["sweep-augment", "--factors", "-1..2"]])
def test_invalid_values(argv, tmp_path):
    assert main(argv + ["--out-dir", str(tmp_path)]) == 2


def test_generate_writes_pairs(workspace):
    rec = workspace / "rec"
    assert len(list(rec.glob("cycle_*.pcm"))) == 16
    assert len(list(rec.glob("cycle_*.json"))) == 16
    meta = json.loads((rec / "run-meta.json").read_text())
    assert meta["command"] == "generate" and meta["config"]["cycles_per_class"] == 4


def test_segment_outputs(workspace):
    seg = workspace / "seg"
    assert (seg / "segments.segf32").stat().st_size == 16 * 48000 * 5 * 4
    rows = list(csv.DictReader(open(seg / "marks.csv")))
    assert len(rows) == 16
    assert all(abs(float(r["sw_error_ms"])) <= 15 for r in rows)


def test_missing_data_is_data_error(tmp_path, capsys):
    assert main(["evaluate", "--data-dir", str(tmp_path / "none"), "--out-dir", str(tmp_path)]) == 3
    assert "NoData" in capsys.readouterr().err


def test_transform_dump(workspace):
    out = workspace / "tr"
    assert main(["transform", "--data-dir", str(workspace / "seg"), "--out-dir", str(out), "--sensors", "4,6"]) == 0
    index = json.loads((out / "spectrograms.json").read_text())
    assert index["spectrograms"][0]["shape"] == [2, 184, 513]
    assert (out / "spectrograms.segf32").stat().st_size == 16 * 2 * 184 * 513 * 4


def eval_args(workspace, out):
    return [
        "evaluate", "--data-dir", str(workspace / "seg"), "--out-dir", str(out),
        "--task", "2", "--method", "dwt", "--sensors", "4", "--aug-factor", "0",
        "--folds", "3", "--reps", "1", "--max-epochs", "5",
    ]


def test_evaluate_is_byte_identical(workspace):
    a, b = workspace / "e1", workspace / "e2"
    assert main(eval_args(workspace, a)) == 0
    assert main(eval_args(workspace, b)) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    header = (a / "report.csv").read_text().splitlines()[0]
    assert header == "task,method,sensors,aug_factor,cv_mean,cv_std,lcb,holdout_acc,mean_ms,max_ms"


def test_run_meta_reproduces_report(workspace, tmp_path):
    first = workspace / "e1"
    if not (first / "report.json").exists():
        assert main(eval_args(workspace, first)) == 0
    config = json.loads((first / "run-meta.json").read_text())["config"]
    config["out_dir"] = str(tmp_path)
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    assert main(["evaluate", "--config", str(config_path)]) == 0
    assert (tmp_path / "report.json").read_bytes() == (first / "report.json").read_bytes()


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"not_a_flag": 1}))
    assert main(["evaluate", "--config", str(path)]) == 2


def test_config_values_are_validated(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"sensors": [4, 5]}))
    assert main(["evaluate", "--config", str(path)]) == 2


def test_train_writes_checkpoint(workspace):
    out = workspace / "t"
    assert main(["train", "--data-dir", str(workspace / "seg"), "--out-dir", str(out), "--method", "dwt", "--sensors", "4,6", "--max-epochs", "4", "--aug-factor", "1"]) == 0
    assert (out / "model.ckpt").read_bytes()[:8] == b"WMCKPT01"
    log = list(csv.DictReader(open(out / "train-log.csv")))
    assert len(log) == 4


def test_sweep_and_rank(workspace):
    out = workspace / "sw"
    assert main(["sweep-augment", "--data-dir", str(workspace / "seg"), "--out-dir", str(out), "--task", "2", "--method", "dwt", "--factors", "0,1", "--folds", "3", "--reps", "1", "--max-epochs", "2"]) == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [r["aug_factor"] for r in rows] == ["0", "1"]
    out = workspace / "rk"
    assert main(["rank-sensors", "--data-dir", str(workspace / "seg"), "--out-dir", str(out), "--tasks", "2", "--methods", "dwt", "--sensors", "4,6", "--folds", "3", "--max-epochs", "2"]) == 0
    ranking = json.loads((out / "ranking.json").read_text())
    assert len(ranking["ranking"]["dwt"]) == 3


def test_bench_latency(workspace):
    out = workspace / "bl"
    assert main(["bench-latency", "--data-dir", str(workspace / "seg"), "--out-dir", str(out), "--runs", "3", "--methods", "dwt", "--max-epochs", "1"]) == 0
    doc = json.loads((out / "latency.json").read_text())
    assert doc["results"][0]["n_runs"] == 3 and "machine" in doc

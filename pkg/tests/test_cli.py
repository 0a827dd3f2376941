import csv
import subprocess
import sys

import numpy as np
import pytest

from maskdistill.cli import run
from maskdistill.core import default_config_values, load_config
from maskdistill.dataio import read_protocol
from maskdistill.metrics import read_scores
from maskdistill.toydata import write_toy_pairs

TOY_CFG = """\
batch_size = 16
total_iterations = 30
lr_milestones = [20]
lambda_switch_iteration = 15
backbone_width = 8
embedding_dim = 32
scale = 16
margin = 0.2
sigma = 0.1
"""


def last_line(text):
    return text.strip().splitlines()[-1]


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "toy.cfg"
    path.write_text(TOY_CFG)
    return path


def test_help_lists_every_flag_with_default(capsys):
    assert run(["train-student", "--help"]) == 0
    out = capsys.readouterr().out
    flat = " ".join(out.split())
    for key, value in default_config_values().items():
        flag = "--" + key.replace("_", "-")
        assert flag in out
    assert "--total-iterations VALUE (default: 295000)" in flat
    assert "--lr-milestones VALUE (default: 80000,140000,210000)" in flat
    assert "--lambda-switch-iteration VALUE (default: 227000)" in flat
    assert "--p-mask VALUE (default: 0.5)" in flat
    assert "--scale VALUE (default: 64.0)" in flat


def test_usage_errors_exit_2(capsys, tmp_path):
    assert run(["bogus"]) == 2
    assert run(["protocol", "--pairs", "x", "--scenario", "none", "--run-dir", str(tmp_path),
                "--nonsense"]) == 2
    assert run(["protocol", "--pairs", "x", "--scenario", "sideways",
                "--run-dir", str(tmp_path)]) == 2
    # training needs a config or explicit flags
    assert run(["train-teacher", "--data", str(tmp_path), "--run-dir", str(tmp_path)]) == 2


def test_protocol_divisibility_error(tmp_path, capsys):
    pairs = tmp_path / "pairs.txt"
    pairs.write_text("".join(f"a/{i}.png b/{i}.png {i % 2}\n" for i in range(6001)))
    code = run(["protocol", "--pairs", str(pairs), "--scenario", "both-masked", "--folds", "10",
                "--run-dir", str(tmp_path / "run")])
    err = capsys.readouterr().err
    assert code == 1
    assert len(err.strip().splitlines()) == 1
    assert err.startswith("error: protocol: ")


def test_protocol_writes_file(tmp_path, capsys):
    pairs = tmp_path / "pairs.txt"
    pairs.write_text("".join(f"a/{i}.png b/{i}.png {i % 2}\n" for i in range(20)))
    run_dir = tmp_path / "run"
    assert run(["protocol", "--pairs", str(pairs), "--scenario", "masked-vs-nonmasked",
                "--folds", "4", "--run-dir", str(run_dir)]) == 0
    proto = read_protocol(run_dir / "protocol.tsv")
    assert proto.num_folds == 4 and len(proto.pairs) == 20
    assert all(p.mask_probe and not p.mask_ref for p in proto.pairs)
    assert (run_dir / "config.cfg").exists() and (run_dir / "command.txt").exists()


def test_config_errors_are_one_line(tmp_path, capsys, small_dataset):
    bad = tmp_path / "bad.cfg"
    bad.write_text("batch_size = 16\nlr_milestones = [9, 3]\n")
    code = run(["train-teacher", "--data", str(small_dataset.root), "--config", str(bad),
                "--run-dir", str(tmp_path / "run")])
    err = capsys.readouterr().err
    assert code == 1
    assert err.strip() == "error: validation: lr_milestones not ascending"
    code = run(["train-teacher", "--data", str(small_dataset.root), "--config", str(bad),
                "--run-dir", str(tmp_path / "run"), "--lr-milestones", "[3]", "--p-mask", "0.5"])
    assert code == 1
    assert capsys.readouterr().err.startswith("error: config: ")


def test_missing_dataset_is_ingestion_error(tmp_path, capsys, cfg_file):
    code = run(["train-teacher", "--data", str(tmp_path / "nowhere"), "--config", str(cfg_file),
                "--run-dir", str(tmp_path / "run")])
    assert code == 1
    assert capsys.readouterr().err.startswith("error: ingestion: ")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, small_dataset, cfg_file):
    """teacher -> student -> protocol -> evaluate, all through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    teacher_dir, student_dir = root / "teacher", root / "student"
    assert run(["train-teacher", "--data", str(small_dataset.root), "--config", str(cfg_file),
                "--run-dir", str(teacher_dir)]) == 0
    assert run(["train-student", "--data", str(small_dataset.root), "--config", str(cfg_file),
                "--paradigm", "HG", "--teacher", str(teacher_dir / "teacher.pt"),
                "--run-dir", str(student_dir)]) == 0
    pairs = write_toy_pairs(root / "pairs.txt", small_dataset, 10, 10, seed=0, per_fold=5)
    proto_dir = root / "proto"
    assert run(["protocol", "--pairs", str(pairs), "--scenario", "masked-vs-nonmasked",
                "--folds", "2", "--run-dir", str(proto_dir)]) == 0
    eval_dir = root / "eval"
    assert run(["evaluate", "--protocol", str(proto_dir / "protocol.tsv"), "--model",
                str(student_dir / "student.pt"), "--run-dir", str(eval_dir)]) == 0
    return root


def test_train_runs_are_self_describing(pipeline):
    teacher_cfg, _ = load_config(pipeline / "teacher" / "config.cfg")
    assert teacher_cfg.paradigm.value == "NO_KD" and teacher_cfg.p_mask == 0.0
    assert teacher_cfg.total_iterations == 30
    student_cfg, head = load_config(pipeline / "student" / "config.cfg")
    assert student_cfg.paradigm.value == "HG" and student_cfg.lambda_switch_iteration == 15
    assert head.embedding_dim == 32
    assert sorted(p.name for p in (pipeline / "student").glob("ckpt_*.pt"))[-1] == "ckpt_0000030.pt"
    with open(pipeline / "student" / "loss_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "l_arc", "l_kd", "lambda", "l_total", "lr"]
    assert len(rows) == 31
    assert float(rows[15][3]) == 100.0 and float(rows[16][3]) == 3000.0


def test_evaluate_outputs(pipeline):
    ev = pipeline / "eval"
    scores = read_scores(ev / "scores.csv")
    assert scores.counts == (10, 10)
    head, row = (ev / "report.csv").read_text().splitlines()
    assert head.split(",")[:7] == ["name", "FMR1000", "FMR100", "FDR", "FAR2000", "ACC2000", "ACC"]
    assert row.startswith("student,")
    assert (ev / "report.txt").exists() and (ev / "thresholds.csv").exists()


def test_evaluate_checkpoint_matches_export(pipeline, tmp_path):
    args = ["evaluate", "--protocol", str(pipeline / "proto" / "protocol.tsv")]
    assert run(args + ["--model", str(pipeline / "student" / "ckpt_0000030.pt"),
                       "--run-dir", str(tmp_path / "a")]) == 0
    a = read_scores(tmp_path / "a" / "scores.csv")
    b = read_scores(pipeline / "eval" / "scores.csv")
    assert np.allclose(a.pair_scores, b.pair_scores, atol=1e-12)


def test_report_from_scores(pipeline, tmp_path):
    assert run(["report", "--scores", str(pipeline / "eval" / "scores.csv"), "--protocol",
                str(pipeline / "proto" / "protocol.tsv"), "--name", "again",
                "--run-dir", str(tmp_path)]) == 0
    first = (pipeline / "eval" / "report.csv").read_text().splitlines()[1].split(",")[1:]
    again = (tmp_path / "report.csv").read_text().splitlines()[1].split(",")[1:]
    assert first == again


def test_mask_command_manifest(tmp_path, small_dataset):
    assert run(["mask", "--data", str(small_dataset.root), "--seed", "3",
                "--run-dir", str(tmp_path)]) == 0
    with open(tmp_path / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(small_dataset)
    assert set(rows[0]) == {"source", "output", "color", "seed"}
    assert all((tmp_path / r["output"]).exists() for r in rows)
    assert all(len(r["color"].split()) == 3 for r in rows)
    again = tmp_path / "again"
    assert run(["mask", "--data", str(small_dataset.root), "--seed", "3",
                "--run-dir", str(again)]) == 0
    assert (again / "manifest.csv").read_text() == (tmp_path / "manifest.csv").read_text()


def test_env_seed_override(tmp_path, small_dataset, monkeypatch):
    monkeypatch.setenv("MASKDISTILL_SEED", "11")
    assert run(["mask", "--data", str(small_dataset.root), "--run-dir", str(tmp_path)]) == 0
    assert "seed = 11" in (tmp_path / "config.cfg").read_text()


def test_console_script_exit_status(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "maskdistill.cli", "report", "--scores",
                           str(tmp_path / "none.csv"), "--run-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert last_line(proc.stderr).startswith("error: io: ")

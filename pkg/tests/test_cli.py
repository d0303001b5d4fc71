import csv
import json

import numpy as np
import pytest

from sfdlab import checkpoint as ckpt
from sfdlab.cli import main
from sfdlab.config import load
from sfdlab.sampling import read_csv

TINY = ["model.hidden=[16, 16]", "model.class_dim=4", "model.time_dim=8",
        "model.warmup_steps=40", "model.warmup_batch_size=64",
        "train.steps=20", "train.batch_size=16", "train.checkpoint_interval=10",
        "eval.interval=10", "eval.n_samples=300", "eval.pr_samples=100", "eval.floor_reps=5",
        "io.samples_per_class=50"]


def _sets(extra=()):
    out = []
    for s in [*TINY, *extra]:
        out += ["--set", s]
    return out


def _run(tmp_path, name, extra=(), mode=None):
    d = tmp_path / name
    argv = ["-q", "run", "--out-dir", str(d), *_sets(extra)]
    if mode:
        argv += ["--mode", mode]
    assert main(argv) == 0
    return d


@pytest.fixture(autouse=True)
def _no_env(monkeypatch):
    monkeypatch.delenv("SFD_SEED", raising=False)
    monkeypatch.delenv("SFD_OUTPUT_ROOT", raising=False)


def test_verify_json(capsys):
    code = main(["-q", "verify", "--json", "--identity-samples", "2000"])
    report = json.loads(capsys.readouterr().out)
    assert code == (0 if report["passed"] else 1)
    names = [c["name"] for c in report["checks"]]
    assert "data_free:trainer" in names and "tweedie_identity" in names
    assert sum(n.startswith("fisher_identity") for n in names) == 30
    assert all(c["passed"] for c in report["checks"] if c["name"].startswith(("grad:", "tweedie",
                                                                              "data_free")))
    assert set(report["checks"][0]) == {"name", "passed", "value", "tolerance", "detail"}


def test_run_directory_layout(tmp_path, capsys):
    d = _run(tmp_path, "a")
    for f in ("config.toml", "run.json", "metrics.jsonl", "samples.csv", "summary.json",
              "checkpoints/state.ckpt"):
        assert (d / f).exists(), f
    recs = [json.loads(line) for line in (d / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [0, 10, 20]
    assert {"stage", "step", "kimg", "loss_psi", "loss_theta", "ua", "override_rate",
            "precision", "recall", "frechet_remaining"} <= set(recs[-1])
    assert recs[0]["loss_psi"] is None
    pts, lab = read_csv(d / "samples.csv")
    assert pts.shape == (200, 2) and np.bincount(lab).tolist() == [50] * 4
    summary = json.loads((d / "summary.json").read_text())
    assert set(summary["frechet_floor"]) == {"1", "2", "3"}
    assert summary["steps"] == {"joint": 20}
    assert load(d / "config.toml").train.steps == 20
    assert json.loads(capsys.readouterr().out.strip().split("\n", 0)[0])["step"] == 20


def test_same_seed_byte_identical_metrics(tmp_path):
    a, b = _run(tmp_path, "a"), _run(tmp_path, "b")
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    c = _run(tmp_path, "c", ["train.seed=3"])
    assert (a / "metrics.jsonl").read_bytes() != (c / "metrics.jsonl").read_bytes()


def test_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("SFD_SEED", "3")
    d = _run(tmp_path, "e")
    assert json.loads((d / "run.json").read_text())["seed"] == 3


def test_resume_reproduces_run(tmp_path):
    full = _run(tmp_path, "full")
    part = _run(tmp_path, "part", ["train.steps=10"])
    # stretch the stored budget, then continue from the step-10 checkpoint
    cfg_path = part / "config.toml"
    cfg_path.write_text(cfg_path.read_text().replace("steps = 10\n", "steps = 20\n"))
    assert main(["-q", "run", "--resume", str(part / "checkpoints" / "state.ckpt")]) == 0
    assert (full / "metrics.jsonl").read_bytes() == (part / "metrics.jsonl").read_bytes()
    sa = json.loads((full / "summary.json").read_text())
    sb = json.loads((part / "summary.json").read_text())
    assert sa == sb


def test_resume_missing_checkpoint(tmp_path, capsys):
    assert main(["-q", "run", "--resume", str(tmp_path / "nope.ckpt")]) == 2
    assert "cannot resume" in capsys.readouterr().err


def test_export_plots(tmp_path):
    a = _run(tmp_path, "joint")
    b = _run(tmp_path, "kl", mode="kl")
    out = tmp_path / "plots"
    assert main(["-q", "export-plots", str(a), str(b), "--out", str(out)]) == 0
    with open(out / "ua_curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    steps = [int(r["global_step"]) for r in rows]
    assert steps == sorted(steps)
    assert (out / "frechet_curve.csv").read_text().splitlines()[0] == \
        "global_step,stage,step,kimg,frechet_1,frechet_2,frechet_3,frechet_remaining,precision,recall"
    head = (out / "comparison.csv").read_text().splitlines()
    assert head[0] == "global_step,ua_joint,frechet_joint,ua_kl,frechet_kl" and len(head) == 4


def test_export_two_stage_global_steps(tmp_path):
    d = _run(tmp_path, "two", ["train.distill_steps=10", "train.forget_steps=10"], mode="two-stage")
    assert main(["-q", "export-plots", str(d)]) == 0
    with open(d / "ua_curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["stage"], int(r["global_step"])) for r in rows] == \
        [("distill", 0), ("distill", 10), ("forget", 10), ("forget", 20)]
    assert (tmp_path / "two" / "checkpoints" / "state.ckpt.distill").exists()


def test_export_without_metrics(tmp_path, capsys):
    assert main(["-q", "export-plots", str(tmp_path)]) == 2
    assert "no metrics.jsonl" in capsys.readouterr().err


def test_eval_checkpoint(tmp_path, capsys):
    d = _run(tmp_path, "a")
    capsys.readouterr()
    assert main(["-q", "eval", str(d / "checkpoints" / "state.ckpt"), "--json"]) == 0
    rec = json.loads(capsys.readouterr().out)
    last = json.loads((d / "metrics.jsonl").read_text().splitlines()[-1])
    assert rec["ua"] == last["ua"] and rec["frechet_1"] == last["frechet_1"]


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nsteps = -1\nbogus = 2\n")
    assert main(["-q", "run", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "train.steps" in err and "train.bogus" in err


def test_pretrain_and_use_teacher(tmp_path, capsys):
    out = tmp_path / "t.ckpt"
    argv = ["-q", "pretrain", "--out", str(out), *_sets(["teacher.pretrain.steps=30",
                                                         "teacher.pretrain.batch_size=32"])]
    assert main(argv) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["checkpoint"] == str(out) and report["t_range"] == [206, 543]
    arrays, meta = ckpt.load(out)
    assert meta["kind"] == "pretrained_teacher" and meta["pretrain"]["steps"] == 30
    # same seed, same weights
    assert main([*argv[:3], str(tmp_path / "u.ckpt"), *argv[4:]]) == 0
    np.testing.assert_array_equal(arrays["params"], ckpt.load(tmp_path / "u.ckpt")[0]["params"])
    d = _run(tmp_path, "pre", ["teacher.backend=pretrained", f'teacher.checkpoint="{out}"'])
    assert (d / "summary.json").exists()

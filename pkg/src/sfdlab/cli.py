"""Command line: verify | pretrain | run | export-plots | eval.

Environment: ``SFD_SEED`` overrides ``train.seed`` and ``SFD_OUTPUT_ROOT``
overrides ``io.output_root``.  ``--set section.key=value`` overrides any
config key.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .checkpoint import CheckpointError
from .eval import Evaluator, calibrate_frechet_floor, first_step, with_global_steps
from .gmm import GmmTeacher
from .models import CondMlp, MlpConfig
from .pretrain import PretrainDiverged, dsm_pretrain, save_teacher
from .sampling import sample, write_csv
from .trainer import Trainer, TrainingAborted, load_state, phase_steps, phases_for

log = logging.getLogger("sfdlab")

METRICS = "metrics.jsonl"
STATE = "state.ckpt"
# leading keys of every metrics.jsonl line; the rest (frechet_*) follow sorted
RECORD_ORDER = ("stage", "step", "kimg", "loss_psi", "loss_theta", "ua", "override_rate",
                "precision", "recall")


class CliError(RuntimeError):
    """A user-facing failure with a one-line message and exit status 2."""


# -- config plumbing ---------------------------------------------------------------

def resolve_config(path=None, overrides=(), mode=None, environ=None):
    config = cfgmod.load(path) if path else cfgmod.RunConfig()
    if overrides:
        config = cfgmod.apply_overrides(config, overrides)
    config = cfgmod.apply_env(config, os.environ if environ is None else environ)
    if mode:
        config = cfgmod.apply_overrides(config, [f'train.mode="{mode}"'])
    return config


def make_evaluator(config, trainer):
    ev = config.eval
    return Evaluator(config.train.spec, trainer.schedule, trainer.net, trainer.roles,
                     n_samples=ev.n_samples, seed=ev.seed, k=ev.k, pr_samples=ev.pr_samples)


def frechet_floors(config):
    """Per remaining class repeated-draw Frechet floor at the evaluation sample size."""
    ev, tr = config.eval, config.train
    rng = np.random.default_rng(ev.seed + 1)
    return {c: calibrate_frechet_floor(tr.spec, c, ev.n_samples, rng, ev.floor_reps,
                                       ev.floor_quantile)
            for c in tr.roles.remaining}


# -- verify ------------------------------------------------------------------------------

def cmd_verify(args):
    from .verify import run_all
    results = run_all(seed=args.seed, identity_n=args.identity_samples)
    ok = all(r.passed for r in results)
    if args.json:
        print(json.dumps({"passed": ok, "checks": [r.as_dict() for r in results]}, indent=2))
    else:
        width = max(len(r.name) for r in results)
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  "
                  f"value={r.value:.3e}  tol={r.tolerance:.1e}  {r.detail}")
        print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return 0 if ok else 1


def _checkpoint_config(ckpt_path, doc):
    """The run directory's config.toml when the checkpoint sits in one, else the embedded copy."""
    stored = Path(ckpt_path).resolve().parent.parent / "config.toml"
    if stored.exists():
        return cfgmod.load(stored)
    if doc is None:
        raise CliError(f"{ckpt_path} carries no configuration; pass --config")
    return cfgmod.config_from_dict(doc)


# -- pretrain -----------------------------------------------------------------------------

def pretrain_accuracy(net, params, spec, schedule, rng, probes=100):
    """Max L2 errors of posterior mean and score against the closed form at mid-range t."""
    teacher = GmmTeacher(spec, schedule)
    span = schedule.t_max - schedule.t_min
    lo = schedule.t_min + span // 4
    hi = lo + span // 2
    c = rng.integers(0, spec.num_classes, size=probes)
    t = rng.integers(lo, hi + 1, size=probes)
    x = np.concatenate([sample(spec, int(k), 1, rng) for k in c])
    z = schedule.perturb(x, t, rng.standard_normal(x.shape))
    pred = net(z, c, t, params)
    true = np.concatenate([teacher.posterior_mean(z[i:i + 1], c[i], t[i]) for i in range(probes)])
    true_s = np.concatenate([teacher.diffused_score(z[i:i + 1], c[i], t[i]) for i in range(probes)])
    mean_err = np.linalg.norm(pred - true, axis=1)
    score_err = np.linalg.norm(schedule.mean_to_score(z, pred, t) - true_s, axis=1)
    return {"mean_max": float(mean_err.max()), "mean_rms": float(np.sqrt(np.mean(mean_err ** 2))),
            "score_max": float(score_err.max()),
            "score_rms": float(np.sqrt(np.mean(score_err ** 2))), "t_range": [int(lo), int(hi)]}


def cmd_pretrain(args):
    config = resolve_config(args.config, args.set)
    tr, pre = config.train, config.pretrain
    schedule = tr.schedule.build()
    net = CondMlp(MlpConfig(tr.spec.num_classes, tr.model.hidden, tr.model.class_dim,
                            tr.model.time_dim, tr.schedule.T))
    out = Path(args.out or pre.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    log.info("DSM pretraining for %d steps -> %s", pre.steps, out)
    try:
        params, losses = dsm_pretrain(net, tr.spec, schedule, np.random.default_rng(pre.seed),
                                      pre.steps, pre.batch_size, pre.lr,
                                      ema_decay=pre.ema_decay)
    except PretrainDiverged as exc:
        raise CliError(str(exc)) from exc
    acc = pretrain_accuracy(net, params, tr.spec, schedule, np.random.default_rng(pre.seed + 1))
    save_teacher(out, net, params, {"pretrain": cfgmod.config_to_dict(config)["teacher"]["pretrain"],
                                    "final_loss": float(np.mean(losses[-100:])), "accuracy": acc})
    print(json.dumps({"checkpoint": str(out), **acc}, indent=2))
    return 0


# -- run ----------------------------------------------------------------------------------

def metric_line(rec):
    """One JSON line with a fixed key order, so resumed runs write the same bytes."""
    keys = [k for k in RECORD_ORDER if k in rec] + sorted(k for k in rec if k not in RECORD_ORDER)
    return json.dumps({k: rec[k] for k in keys}) + "\n"


def _append(path, rec):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(metric_line(rec))


def cmd_run(args):
    state = None
    if args.resume:
        try:
            state, doc = load_state(args.resume)
        except (CheckpointError, OSError) as exc:
            raise CliError(f"cannot resume from {args.resume}: {exc}") from exc
        run_dir = Path(args.resume).resolve().parent.parent
        config = _checkpoint_config(args.resume, doc)
    else:
        config = resolve_config(args.config, args.set, args.mode)
        run_dir = Path(args.out_dir) if args.out_dir else Path(config.io.output_root) / config.run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    cfgmod.save(run_dir / "config.toml", config)
    (run_dir / "run.json").write_text(json.dumps(
        {"version": __version__, "seed": config.train.seed, "mode": config.train.mode,
         "python": sys.version.split()[0], "numpy": np.__version__}, indent=2) + "\n")

    trainer = Trainer(config.train)
    evaluator = make_evaluator(config, trainer)
    metrics = run_dir / METRICS
    # the metric file always mirrors the log carried by the state
    metrics.write_text("".join(metric_line(r) for r in (state.log if state else [])))

    def on_record(rec):
        _append(metrics, rec)
        log.info("%s step %d  ua=%.4f  frechet=%.2e", rec["stage"], rec["step"], rec["ua"],
                 rec["frechet_remaining"])

    started = time.time()
    try:
        state = trainer.run(state, evaluator, str(run_dir / "checkpoints" / STATE), on_record)
    except TrainingAborted as exc:
        raise CliError(str(exc)) from exc
    log.info("training finished in %.1f s", time.time() - started)

    params = state.eval_params()
    n = min(config.io.samples_per_class, config.eval.n_samples)
    classes = range(config.train.spec.num_classes)
    pts = np.concatenate([evaluator.generate(params, c, n) for c in classes])
    write_csv(run_dir / "samples.csv", pts, np.repeat(np.arange(len(classes)), n))
    summary = build_summary(config, state.log, frechet_floors(config))
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary["final"], indent=2))
    return 0


def build_summary(config, records, floors):
    tr = config.train
    final = records[-1]
    glog = with_global_steps(records)
    steps = {p.name: phase_steps(tr, p) for p in phases_for(tr)}
    return {
        "version": __version__, "mode": tr.mode, "seed": tr.seed, "steps": steps,
        "kimg": sum(steps.values()) * tr.batch_size / 1000,
        "final": {k: v for k, v in final.items() if k not in ("loss_psi", "loss_theta")},
        "frechet_floor": {str(c): f for c, f in floors.items()},
        "frechet_within_2x_floor": {str(c): final[f"frechet_{c}"] <= 2 * f
                                    for c, f in floors.items()},
        "ua_onset_global_step": first_step(glog, "ua", lambda v: v > 0.05, step_key="global_step"),
        "ua95_global_step": first_step(glog, "ua", lambda v: v >= 0.95, step_key="global_step"),
    }


# -- export-plots ------------------------------------------------------------------------

def read_metrics(run_dir):
    path = Path(run_dir) / METRICS
    if not path.exists():
        raise CliError(f"no {METRICS} in {run_dir}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def export_curves(run_dir, out_dir):
    recs = with_global_steps(read_metrics(run_dir))
    if not recs:
        raise CliError(f"{METRICS} in {run_dir} holds no records")
    fr_keys = sorted(k for k in recs[0] if k.startswith("frechet_"))
    base = ["global_step", "stage", "step", "kimg"]
    lead = lambda r: [r["global_step"], r["stage"], r["step"], r["kimg"]]
    _write_rows(out_dir / "ua_curve.csv", base + ["ua", "override_rate"],
                [lead(r) + [r["ua"], r["override_rate"]] for r in recs])
    _write_rows(out_dir / "frechet_curve.csv", base + fr_keys + ["precision", "recall"],
                [lead(r) + [r[k] for k in fr_keys] + [r["precision"], r["recall"]] for r in recs])
    _write_rows(out_dir / "loss_curves.csv", base + ["loss_psi", "loss_theta"],
                [lead(r) + ["" if r[k] is None else r[k] for k in ("loss_psi", "loss_theta")]
                 for r in recs])
    return recs


def cmd_export_plots(args):
    out = Path(args.out or args.run_dirs[0])
    out.mkdir(parents=True, exist_ok=True)
    if len(args.run_dirs) > 2:
        raise CliError("export-plots takes one run directory, or two for a comparison")
    first = export_curves(args.run_dirs[0], out)
    if len(args.run_dirs) == 2:
        a = {r["global_step"]: r for r in first}
        b = {r["global_step"]: r for r in with_global_steps(read_metrics(args.run_dirs[1]))}
        names = [Path(d).name for d in args.run_dirs]
        cols = lambda r: ["", ""] if r is None else [r["ua"], r["frechet_remaining"]]
        _write_rows(out / "comparison.csv",
                    ["global_step", f"ua_{names[0]}", f"frechet_{names[0]}",
                     f"ua_{names[1]}", f"frechet_{names[1]}"],
                    [[s] + cols(a.get(s)) + cols(b.get(s)) for s in sorted(set(a) | set(b))])
    print(f"wrote CSV files to {out}")
    return 0


# -- eval ---------------------------------------------------------------------------------

def cmd_eval(args):
    try:
        state, doc = load_state(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        raise CliError(f"cannot read {args.checkpoint}: {exc}") from exc
    config = cfgmod.load(args.config) if args.config else _checkpoint_config(args.checkpoint, doc)
    trainer = Trainer(config.train)
    rec = make_evaluator(config, trainer)(state.eval_params(), state.step, state.stage)
    floors = frechet_floors(config)
    rec.update({"stage": state.stage, "step": state.step,
                "frechet_floor": {str(c): f for c, f in floors.items()}})
    print(json.dumps(rec, indent=2 if not args.json else None))
    return 0


# -- entry point --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="sfd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="identity, Tweedie and gradient checks")
    v.add_argument("--json", action="store_true")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--identity-samples", type=int, default=1_000_000)
    v.set_defaults(func=cmd_verify)

    def config_args(sp):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")

    pt = sub.add_parser("pretrain", help="DSM-pretrain an MLP teacher on mixture samples")
    config_args(pt)
    pt.add_argument("--out", help="checkpoint path (default: teacher.pretrain.output)")
    pt.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("run", help="train a generator")
    config_args(r)
    r.add_argument("--mode", choices=("joint", "two-stage", "kl", "distill-only"))
    r.add_argument("--out-dir", help="run directory (default: <output_root>/<run_name>)")
    r.add_argument("--resume", metavar="CKPT", help="continue from a state checkpoint")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("export-plots", help="CSV curves from one or two run directories")
    e.add_argument("run_dirs", nargs="+")
    e.add_argument("--out", help="output directory (default: the first run directory)")
    e.set_defaults(func=cmd_export_plots)

    ev = sub.add_parser("eval", help="re-evaluate a state checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--config", help="override the config stored in the checkpoint")
    ev.add_argument("--json", action="store_true")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

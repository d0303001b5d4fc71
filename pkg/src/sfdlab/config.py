"""TOML run configuration.

A run file has the sections ``[teacher]`` (with ``[[teacher.classes]]`` and
``[teacher.pretrain]``), ``[schedule]``, ``[model]``, ``[loss]``, ``[train]``,
``[eval]`` and ``[io]``.  Serialization always writes every key, so a
dumped file documents all defaults.  Parsing starts from the defaults,
rejects unknown sections and keys, checks value types, and reports every
problem in one :class:`ConfigError`.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import tomli
import tomli_w

from .gmm import GmmSpec
from .losses import LossWeights
from .models import MlpConfig, WarmupConfig
from .trainer import MODES, ScheduleConfig, SfdConfig

TEACHER_BACKENDS = ("analytic", "pretrained")


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 10_000      # generated and reference points per class
    seed: int = 1234             # fixed noise / reference draws shared by all snapshots
    k: int = 3
    pr_samples: int = 3000       # pooled remaining-class points for precision/recall
    floor_reps: int = 50
    floor_quantile: float = 0.95


@dataclass(frozen=True)
class PretrainConfig:
    """DSM pretraining of an MLP teacher on samples of the mixture."""

    steps: int = 12000
    batch_size: int = 512
    lr: float = 3e-3
    ema_decay: float = 0.999
    seed: int = 0
    output: str = "teacher.ckpt"


@dataclass(frozen=True)
class IoConfig:
    output_root: str = "runs"
    run_name: str = ""           # empty: "<mode>-seed<seed>"
    samples_per_class: int = 1000


@dataclass(frozen=True)
class RunConfig:
    train: SfdConfig = field(default_factory=SfdConfig)
    eval: EvalConfig = EvalConfig()
    pretrain: PretrainConfig = PretrainConfig()
    io: IoConfig = IoConfig()

    @property
    def run_name(self):
        return self.io.run_name or f"{self.train.mode}-seed{self.train.seed}"


class ConfigError(ValueError):
    """All validation problems found in one configuration document."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


# -- to sections ------------------------------------------------------------------

def _sched_section(s):
    return {"T": s.T, "beta_start": s.beta_start, "beta_end": s.beta_end,
            "t_min": s.t_min, "t_max": s.t_max, "sigma_init": s.sigma_init}


def config_to_dict(config):
    """Nested plain-python document for a :class:`RunConfig` (or a bare :class:`SfdConfig`)."""
    if isinstance(config, SfdConfig):
        config = RunConfig(train=config)
    tr = config.train
    spec = tr.spec.to_dict()
    w, m, wu, ev = tr.weights, tr.model, tr.warmup, config.eval
    return {
        "teacher": {
            "backend": tr.teacher,
            "checkpoint": tr.teacher_checkpoint,
            "forget_class": tr.forget_class,
            "override_class": tr.override_class,
            "priors": spec["priors"],
            "classes": spec["classes"],
            "pretrain": {"steps": config.pretrain.steps, "batch_size": config.pretrain.batch_size,
                         "lr": config.pretrain.lr, "ema_decay": config.pretrain.ema_decay,
                         "seed": config.pretrain.seed,
                         "output": config.pretrain.output},
        },
        "schedule": _sched_section(tr.schedule),
        "model": {"hidden": list(m.hidden), "class_dim": m.class_dim, "time_dim": m.time_dim,
                  "warmup_steps": wu.steps, "warmup_batch_size": wu.batch_size,
                  "warmup_lr": wu.lr, "warmup_box": wu.box},
        "loss": {"lambda_psi": w.lambda_psi, "mu_psi": w.mu_psi, "lambda_theta": w.lambda_theta,
                 "mu_theta": w.mu_theta, "alpha": w.alpha},
        "train": {"mode": tr.mode, "lr_theta": tr.lr_theta, "lr_psi": tr.lr_psi,
                  "beta1": tr.beta1, "beta2": tr.beta2, "adam_eps": tr.adam_eps,
                  "batch_size": tr.batch_size, "steps": tr.steps,
                  "distill_steps": tr.distill_steps, "forget_steps": tr.forget_steps,
                  "ema": tr.ema, "ema_decay": tr.ema_decay,
                  "checkpoint_interval": tr.checkpoint_interval, "seed": tr.seed},
        "eval": {"interval": tr.eval_interval, "n_samples": ev.n_samples, "seed": ev.seed,
                 "k": ev.k, "pr_samples": ev.pr_samples, "floor_reps": ev.floor_reps,
                 "floor_quantile": ev.floor_quantile},
        "io": {"output_root": config.io.output_root, "run_name": config.io.run_name,
               "samples_per_class": config.io.samples_per_class},
    }


# -- from sections ----------------------------------------------------------------

def _kind_ok(value, default):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


def _merge(defaults, given, path, problems):
    out = copy.deepcopy(defaults)
    if not isinstance(given, dict):
        problems.append(f"{path or 'document'}: expected a table")
        return out
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            problems.append(f"{where}: unknown key")
        elif isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, where, problems)
        elif not _kind_ok(value, defaults[key]):
            problems.append(f"{where}: expected {type(defaults[key]).__name__}, "
                            f"got {type(value).__name__} {value!r}")
        else:
            out[key] = float(value) if isinstance(defaults[key], float) else value
    return out


def _build(doc, problems):
    t, s, m, lo, tr, ev, io = (doc[k] for k in
                               ("teacher", "schedule", "model", "loss", "train", "eval", "io"))

    def attempt(label, fn):
        try:
            return fn()
        except (ValueError, TypeError, KeyError) as exc:
            problems.append(f"{label}: {exc}")
            return None

    spec = attempt("teacher.classes", lambda: GmmSpec.from_dict(
        {"priors": t["priors"], "classes": t["classes"]}))
    schedule = ScheduleConfig(**s)
    attempt("schedule", schedule.build)
    weights = attempt("loss", lambda: LossWeights(**lo))
    if t["backend"] not in TEACHER_BACKENDS:
        problems.append(f"teacher.backend: must be one of {TEACHER_BACKENDS}")
    if t["backend"] == "pretrained" and not t["checkpoint"]:
        problems.append("teacher.checkpoint: required when backend = 'pretrained'")
    if tr["mode"] not in MODES:
        problems.append(f"train.mode: must be one of {MODES}")
    for key in ("batch_size", "steps", "distill_steps", "forget_steps"):
        if tr[key] < 1:
            problems.append(f"train.{key}: must be >= 1")
    for key in ("lr_theta", "lr_psi"):
        if not tr[key] > 0:
            problems.append(f"train.{key}: must be > 0")
    if tr["checkpoint_interval"] < 0:
        problems.append("train.checkpoint_interval: must be >= 0")
    if not (0.0 <= tr["ema_decay"] < 1.0):
        problems.append("train.ema_decay: must be in [0, 1)")
    if not (0.0 <= tr["beta1"] < 1.0 and 0.0 <= tr["beta2"] < 1.0):
        problems.append("train.beta1/beta2: must be in [0, 1)")
    pre = t["pretrain"]
    if pre["steps"] < 1 or pre["batch_size"] < 1 or not pre["lr"] > 0:
        problems.append("teacher.pretrain: steps and batch_size must be >= 1, lr > 0")
    if not (0.0 <= pre["ema_decay"] < 1.0):
        problems.append("teacher.pretrain.ema_decay: must be in [0, 1)")
    if ev["interval"] < 1:
        problems.append("eval.interval: must be >= 1")
    if ev["n_samples"] < 2 or ev["pr_samples"] < 2:
        problems.append("eval.n_samples/pr_samples: must be >= 2")
    if not 0.0 < ev["floor_quantile"] <= 1.0:
        problems.append("eval.floor_quantile: must be in (0, 1]")
    if not m["hidden"] or not all(isinstance(h, int) and h > 0 for h in m["hidden"]):
        problems.append("model.hidden: must be a non-empty list of positive integers")
    if m["time_dim"] < 2 or m["time_dim"] % 2:
        problems.append("model.time_dim: must be a positive even integer")
    if problems:
        return None
    model = MlpConfig(spec.num_classes, tuple(m["hidden"]), m["class_dim"], m["time_dim"], s["T"])
    warmup = WarmupConfig(m["warmup_steps"], m["warmup_batch_size"], m["warmup_lr"], m["warmup_box"])
    train = attempt("train", lambda: SfdConfig(
        mode=tr["mode"], weights=weights, lr_theta=tr["lr_theta"], lr_psi=tr["lr_psi"],
        beta1=tr["beta1"], beta2=tr["beta2"], adam_eps=tr["adam_eps"],
        batch_size=tr["batch_size"], steps=tr["steps"], distill_steps=tr["distill_steps"],
        forget_steps=tr["forget_steps"], ema=tr["ema"], ema_decay=tr["ema_decay"],
        eval_interval=ev["interval"], checkpoint_interval=tr["checkpoint_interval"],
        seed=tr["seed"], schedule=schedule, spec=spec, forget_class=t["forget_class"],
        override_class=t["override_class"], model=model, warmup=warmup,
        teacher=t["backend"], teacher_checkpoint=t["checkpoint"]))
    if problems:
        return None
    evc = EvalConfig(**{k: v for k, v in ev.items() if k != "interval"})
    return RunConfig(train, evc, PretrainConfig(**t["pretrain"]), IoConfig(**io))


def config_from_dict(doc):
    """Validate a nested document (e.g. parsed TOML) into a :class:`RunConfig`."""
    problems = []
    merged = _merge(config_to_dict(RunConfig()), doc, "", problems)
    # a user-supplied class list replaces the default one wholesale
    if isinstance(doc.get("teacher"), dict) and "classes" in doc["teacher"]:
        classes = doc["teacher"]["classes"]
        for i, entry in enumerate(classes if isinstance(classes, list) else []):
            extra = set(entry) - {"weights", "means", "covs"} if isinstance(entry, dict) else set()
            for key in sorted(extra):
                problems.append(f"teacher.classes[{i}].{key}: unknown key")
    config = _build(merged, problems)
    if problems:
        raise ConfigError(problems)
    return config


# -- text ---------------------------------------------------------------------------

def dumps(config):
    return tomli_w.dumps(config_to_dict(config))


def loads(text):
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"TOML syntax: {exc}"]) from None
    return config_from_dict(doc)


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def save(path, config):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(config))


def apply_overrides(config, assignments):
    """Apply ``section.key=value`` strings (values in TOML syntax, bare words taken as strings)."""
    doc = config_to_dict(config)
    problems = []
    for item in assignments:
        path, sep, raw = item.partition("=")
        if not sep:
            problems.append(f"override {item!r}: expected section.key=value")
            continue
        try:
            value = tomli.loads(f"v = {raw.strip()}")["v"]
        except tomli.TOMLDecodeError:
            value = raw.strip()
        keys = path.strip().split(".")
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                problems.append(f"override {item!r}: {k} is not a table")
                break
        else:
            node[keys[-1]] = value
    if problems:
        raise ConfigError(problems)
    return config_from_dict(doc)


def apply_env(config, environ):
    """SFD_SEED and SFD_OUTPUT_ROOT override train.seed and io.output_root."""
    problems = []
    if environ.get("SFD_SEED"):
        try:
            config = replace(config, train=replace(config.train, seed=int(environ["SFD_SEED"])))
        except ValueError:
            problems.append(f"SFD_SEED: not an integer: {environ['SFD_SEED']!r}")
    if environ.get("SFD_OUTPUT_ROOT"):
        config = replace(config, io=replace(config.io, output_root=environ["SFD_OUTPUT_ROOT"]))
    if problems:
        raise ConfigError(problems)
    return config


"""Alternating fake-score / generator training (joint, two-stage and KL modes).

The training loop only talks to the teacher through its score / posterior
mean interface.  Evaluation (which needs teacher samples) is injected as a
callback so this module never imports the sampling code.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import AdamState, NumericError, adam_step
from .gmm import ClassRoles, GmmSpec, GmmTeacher, default_spec
from .losses import Batch, LossWeights, psi_update_loss, theta_update_loss
from .models import (AnalyticTeacher, CondMlp, MlpConfig, PretrainedTeacher, WarmupConfig,
                     ema_update, generator_forward, init_networks)
from .schedule import build_schedule

MODES = ("joint", "two-stage", "kl", "distill-only")


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    t_min: int = 38
    t_max: int = 712
    sigma_init: float = 2.5

    def build(self):
        return build_schedule(self.T, self.beta_start, self.beta_end, self.t_min, self.t_max,
                              self.sigma_init)


@dataclass(frozen=True)
class SfdConfig:
    mode: str = "joint"
    weights: LossWeights = LossWeights()
    lr_theta: float = 1e-4
    lr_psi: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    steps: int = 20000
    distill_steps: int = 10000
    forget_steps: int = 5000
    ema: bool = True
    ema_decay: float = 0.999
    eval_interval: int = 250
    checkpoint_interval: int = 1000
    seed: int = 0
    schedule: ScheduleConfig = ScheduleConfig()
    spec: GmmSpec = field(default_factory=default_spec)
    forget_class: int = 0
    override_class: int = 1
    model: MlpConfig = None
    warmup: WarmupConfig = WarmupConfig()
    teacher: str = "analytic"
    teacher_checkpoint: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.model is None:
            object.__setattr__(self, "model", MlpConfig(self.spec.num_classes, T=self.schedule.T))
        self.roles  # validates class indices

    @property
    def roles(self):
        return ClassRoles(self.forget_class, self.override_class, self.spec.num_classes)

    @property
    def kimgs(self):
        return self.steps * self.batch_size / 1000


@dataclass(frozen=True)
class Phase:
    """Loss weighting and sampling rule for one stretch of training."""

    name: str
    weights: LossWeights
    forgetting: bool      # draw a c_f batch alongside the remaining batch
    all_classes: bool     # distillation over every class (no forgetting term)
    ema: bool
    loss: str = "sfd"


def phases_for(config):
    w = config.weights
    if config.mode == "joint":
        return [Phase("joint", w, True, False, config.ema)]
    if config.mode == "kl":
        return [Phase("kl", w, True, False, config.ema, loss="kl")]
    distill = Phase("distill", replace(w, mu_psi=0.0, mu_theta=0.0), False, True, config.ema)
    if config.mode == "distill-only":
        return [distill]
    forget = Phase("forget", replace(w, lambda_psi=1.0, mu_psi=1.0, lambda_theta=1.0, mu_theta=1.0),
                   True, False, False)
    return [distill, forget]


def phase_steps(config, phase):
    if config.mode == "two-stage":
        return config.distill_steps if phase.name == "distill" else config.forget_steps
    return config.steps


@dataclass
class RunState:
    step: int
    stage: str
    theta: np.ndarray
    psi: np.ndarray
    adam_theta: AdamState
    adam_psi: AdamState
    ema: np.ndarray | None
    rng: np.random.Generator
    log: list = field(default_factory=list)
    pending: dict = field(default_factory=lambda: {"loss_psi": [], "loss_theta": []})

    def eval_params(self):
        return self.ema if self.ema is not None else self.theta


class TrainingAborted(RuntimeError):
    pass


def build_teacher(config, schedule):
    if config.teacher == "analytic":
        return AnalyticTeacher(GmmTeacher(config.spec, schedule))
    if config.teacher == "pretrained":
        arrays, meta = ckpt.load(config.teacher_checkpoint)
        if meta.get("kind") != "pretrained_teacher":
            raise ckpt.CheckpointError(f"{config.teacher_checkpoint} does not hold a pretrained teacher")
        net = CondMlp(MlpConfig.from_dict(meta["model"]))
        return PretrainedTeacher(net, arrays["params"], schedule)
    raise ValueError(f"unknown teacher backend {config.teacher!r}")


class Trainer:
    """Holds the immutable pieces of a run: schedule, network, teacher."""

    def __init__(self, config, teacher=None):
        self.config = config
        self.schedule = config.schedule.build()
        self.net = CondMlp(config.model)
        self.teacher = teacher if teacher is not None else build_teacher(config, self.schedule)
        self.roles = config.roles

    def _adam(self, lr):
        c = self.config
        return AdamState.zeros(self.net.num_params, lr=lr, beta1=c.beta1, beta2=c.beta2, eps=c.adam_eps)

    def init_state(self):
        rng = np.random.default_rng(self.config.seed)
        theta, psi = init_networks(self.net, self.teacher, self.schedule, rng, self.config.warmup)
        phase = phases_for(self.config)[0]
        return RunState(0, phase.name, theta, psi, self._adam(self.config.lr_theta),
                        self._adam(self.config.lr_psi), theta.copy() if phase.ema else None, rng)

    def start_phase(self, state, phase):
        """Fresh optimizers and step counter for a new stage; networks carry over."""
        state.stage = phase.name
        state.step = 0
        state.adam_theta = self._adam(self.config.lr_theta)
        state.adam_psi = self._adam(self.config.lr_psi)
        state.ema = state.theta.copy() if phase.ema else None
        return state

    def generate(self, noise, classes, theta_leaves):
        return generator_forward(self.net, self.schedule, noise, classes, theta_leaves)

    def sample_block(self, rng, theta, phase):
        """One sampling block; generator outputs are computed without gradient."""
        B = self.config.batch_size
        sch = self.schedule
        if phase.all_classes:
            c_r = rng.integers(0, self.net.config.num_classes)
        else:
            c_r = rng.choice(self.roles.remaining)
        n_r = sch.sigma_init * rng.standard_normal((B, 2))
        n_f = sch.sigma_init * rng.standard_normal((B, 2)) if phase.forgetting else None
        eps_r = rng.standard_normal((B, 2))
        eps_f = rng.standard_normal((B, 2)) if phase.forgetting else None
        s = sch.sample_timestep(rng, B)
        t = sch.sample_timestep(rng, B) if phase.forgetting else None
        rem = Batch(np.full(B, int(c_r)), n_r, s, eps_r)
        fgt = Batch(np.full(B, self.roles.forget), n_f, t, eps_f) if phase.forgetting else None
        return rem, fgt

    def _fill(self, theta, rem, fgt):
        halves = [b for b in (rem, fgt) if b is not None]
        leaves = self.net.leaves(theta, requires_grad=False)
        x = self.generate(np.concatenate([b.noise for b in halves]),
                          np.concatenate([b.classes for b in halves]), leaves).data
        start = 0
        for b in halves:
            b.x = x[start:start + len(b)]
            b.z = self.schedule.perturb(b.x, b.t, b.eps)
            start += len(b)

    def train_step(self, state, phase):
        """One fake-score update followed by one generator update, each on fresh draws."""
        net, rng = self.net, state.rng
        rem, fgt = self.sample_block(rng, state.theta, phase)
        self._fill(state.theta, rem, fgt)
        psi_leaves = net.leaves(state.psi)
        loss_psi = psi_update_loss(net, psi_leaves, rem, fgt, phase.weights, self.schedule)
        ad.backward(loss_psi)
        state.psi = adam_step(state.psi, net.flat_grad(psi_leaves), state.adam_psi)

        rem, fgt = self.sample_block(rng, state.theta, phase)
        theta_leaves = net.leaves(state.theta)
        frozen_psi = net.leaves(state.psi, requires_grad=False)
        loss_theta = theta_update_loss(net, self.generate, theta_leaves, frozen_psi, self.teacher,
                                       rem, fgt, self.roles, phase.weights, self.schedule,
                                       mode=phase.loss)
        ad.backward(loss_theta)
        state.theta = adam_step(state.theta, net.flat_grad(theta_leaves), state.adam_theta)
        if state.ema is not None:
            state.ema = ema_update(state.ema, state.theta, self.config.ema_decay)
        state.step += 1
        state.pending["loss_psi"].append(loss_psi.item())
        state.pending["loss_theta"].append(loss_theta.item())
        return loss_psi.item(), loss_theta.item()

    def record(self, state, evaluator):
        rec = {"stage": state.stage, "step": state.step,
               "kimg": state.step * self.config.batch_size / 1000}
        for key, vals in state.pending.items():
            rec[key] = float(np.mean(vals)) if vals else None
            vals.clear()
        if evaluator is not None:
            rec.update(evaluator(state.eval_params(), state.step, state.stage))
        state.log.append(rec)
        return rec

    def run_phase(self, state, phase, steps, evaluator=None, checkpoint_path=None, on_record=None):
        interval = self.config.eval_interval
        if state.step == 0 and not any(r["stage"] == phase.name for r in state.log):
            rec = self.record(state, evaluator)
            if on_record:
                on_record(rec)
        while state.step < steps:
            try:
                self.train_step(state, phase)
            except NumericError as exc:
                raise TrainingAborted(
                    f"{exc} during {phase.name} step {state.step}; last checkpoint: {checkpoint_path}"
                ) from exc
            if state.step % interval == 0 or state.step == steps:
                rec = self.record(state, evaluator)
                if on_record:
                    on_record(rec)
            ci = self.config.checkpoint_interval
            if checkpoint_path and ci and state.step % ci == 0:
                save_state(checkpoint_path, state, self.config)
        return state

    def run(self, state=None, evaluator=None, checkpoint_path=None, on_record=None):
        """Run every phase of the configured mode, resuming from ``state`` if given."""
        phases = phases_for(self.config)
        if state is None:
            state = self.init_state()
        names = [p.name for p in phases]
        for i, phase in enumerate(phases[names.index(state.stage):]):
            if state.stage != phase.name:
                if checkpoint_path:
                    save_state(f"{checkpoint_path}.{state.stage}", state, self.config)
                self.start_phase(state, phase)
            self.run_phase(state, phase, phase_steps(self.config, phase), evaluator,
                           checkpoint_path, on_record)
        if checkpoint_path:
            save_state(checkpoint_path, state, self.config)
        return state


def run_joint(config, **kw):
    if config.mode != "joint":
        config = replace(config, mode="joint")
    return Trainer(config, kw.pop("teacher", None)).run(**kw)


def run_two_stage(config, **kw):
    if config.mode != "two-stage":
        config = replace(config, mode="two-stage")
    return Trainer(config, kw.pop("teacher", None)).run(**kw)


def run_kl(config, **kw):
    if config.mode != "kl":
        config = replace(config, mode="kl")
    return Trainer(config, kw.pop("teacher", None)).run(**kw)


# -- persistence -----------------------------------------------------------------

def _adam_meta(s):
    return {"step": s.step, "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps}


def state_to_container(state, config=None):
    arrays = {"theta": state.theta, "psi": state.psi,
              "adam_theta_m": state.adam_theta.m, "adam_theta_v": state.adam_theta.v,
              "adam_psi_m": state.adam_psi.m, "adam_psi_v": state.adam_psi.v}
    if state.ema is not None:
        arrays["ema"] = state.ema
    meta = {"kind": "run_state", "step": state.step, "stage": state.stage,
            "adam_theta": _adam_meta(state.adam_theta), "adam_psi": _adam_meta(state.adam_psi),
            "rng": state.rng.bit_generator.state, "log": state.log,
            "pending": state.pending}
    if config is not None:
        from .config import config_to_dict
        meta["config"] = config_to_dict(config)
    return arrays, meta


def save_state(path, state, config=None):
    arrays, meta = state_to_container(state, config)
    ckpt.save(path, arrays, meta)


def load_state(path):
    arrays, meta = ckpt.load(path)
    if meta.get("kind") != "run_state":
        raise ckpt.CheckpointError(f"{path} does not hold a training state")
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    adam_t = AdamState(arrays["adam_theta_m"], arrays["adam_theta_v"], **meta["adam_theta"])
    adam_p = AdamState(arrays["adam_psi_m"], arrays["adam_psi_v"], **meta["adam_psi"])
    state = RunState(meta["step"], meta["stage"], arrays["theta"], arrays["psi"], adam_t, adam_p,
                     arrays.get("ema"), rng, meta["log"], meta["pending"])
    return state, meta.get("config")

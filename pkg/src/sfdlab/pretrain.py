"""Denoising score matching of an MLP teacher on mixture samples.

This is the only training code that draws samples of the data
distribution.  It produces the checkpoint behind the ``pretrained``
teacher backend; the distillation trainer never imports it.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import AdamState, NumericError, adam_step
from .models import CondMlp, MlpConfig, PretrainedTeacher, ema_update
from .sampling import sample


class PretrainDiverged(RuntimeError):
    pass


def dsm_pretrain(net, spec, schedule, rng, steps=12000, batch_size=512, lr=3e-3, t_range=None,
                 ema_decay=0.999):
    """Fit ``net`` as an x-predictor by plain x-space DSM on fresh mixture draws.

    Every step draws classes uniformly, clean points from the mixture and
    timesteps uniformly on ``t_range`` (default: the distillation window).
    The learning rate follows a cosine decay to zero.  Returns
    (EMA params, per-step losses); ``ema_decay=0`` returns the raw iterate.
    """
    lo, hi = t_range if t_range is not None else (schedule.t_min, schedule.t_max)
    params = net.init_params(rng)
    ema = params.copy()
    state = AdamState.zeros(net.num_params, lr=lr, beta1=0.9, beta2=0.999)
    K = spec.num_classes
    losses = np.empty(steps)
    for step in range(steps):
        c = np.sort(rng.integers(0, K, size=batch_size))
        counts = np.bincount(c, minlength=K)
        x = np.concatenate([sample(spec, k, int(counts[k]), rng) for k in range(K)])
        t = rng.integers(lo, hi + 1, size=batch_size)
        z = schedule.perturb(x, t, rng.standard_normal(x.shape))
        leaves = net.leaves(params)
        try:
            out = net.forward(z, c, t, leaves)
            loss = ad.mean(ad.sum(ad.square(ad.sub(out, x)), axis=1))
            ad.backward(loss)
            state.lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / steps))
            params = adam_step(params, net.flat_grad(leaves), state)
            ema = ema_update(ema, params, ema_decay)
        except NumericError as exc:
            raise PretrainDiverged(f"DSM pretraining diverged at step {step}: {exc}") from exc
        losses[step] = loss.item()
    return ema, losses


def save_teacher(path, net, params, extra=None):
    meta = {"kind": "pretrained_teacher", "model": net.config.to_dict(), **(extra or {})}
    ckpt.save(path, {"params": params}, meta)


def load_teacher(path, schedule):
    """A :class:`PretrainedTeacher` from a checkpoint written by :func:`save_teacher`."""
    arrays, meta = ckpt.load(path)
    if meta.get("kind") != "pretrained_teacher":
        raise ckpt.CheckpointError(f"{path} does not hold a pretrained teacher")
    net = CondMlp(MlpConfig.from_dict(meta["model"]))
    return PretrainedTeacher(net, arrays["params"], schedule)

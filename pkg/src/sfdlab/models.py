"""Conditional MLPs for the generator and the fake score network, and teacher backends."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step


@dataclass(frozen=True)
class MlpConfig:
    num_classes: int
    hidden: tuple = (128, 128, 128)
    class_dim: int = 16
    time_dim: int = 16
    T: int = 1000

    def to_dict(self):
        return {"num_classes": self.num_classes, "hidden": list(self.hidden),
                "class_dim": self.class_dim, "time_dim": self.time_dim, "T": self.T}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def time_embedding(t, T, dim):
    """Sinusoidal features of t/T, (n, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=float)) / T
    freqs = np.exp(np.linspace(0.0, np.log(200.0), dim // 2))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class CondMlp:
    """x-prediction MLP on [z | class embedding | time embedding] with SiLU activations.

    Parameters live in one flat float64 vector; ``layout`` maps names to
    slices of it.
    """

    def __init__(self, config):
        self.config = config
        widths = [2 + config.class_dim + config.time_dim, *config.hidden, 2]
        shapes = [("class_emb", (config.num_classes, config.class_dim))]
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            shapes += [(f"W{i}", (fan_in, fan_out)), (f"b{i}", (fan_out,))]
        self.layout = []
        offset = 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            self.layout.append((name, shape, offset, size))
            offset += size
        self.num_params = offset
        self.num_layers = len(widths) - 1

    def init_params(self, rng):
        flat = np.empty(self.num_params)
        for name, shape, off, size in self.layout:
            if name == "class_emb":
                vals = rng.standard_normal(shape)
            elif name.startswith("W"):
                vals = rng.standard_normal(shape) / np.sqrt(shape[0])
            else:
                vals = np.zeros(shape)
            flat[off:off + size] = vals.reshape(-1)
        return flat

    def leaves(self, flat, requires_grad=True):
        if flat.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got shape {flat.shape}")
        return {name: Tensor(flat[off:off + size].reshape(shape), requires_grad=requires_grad)
                for name, shape, off, size in self.layout}

    def flat_grad(self, leaves):
        g = np.zeros(self.num_params)
        for name, shape, off, size in self.layout:
            if leaves[name].grad is not None:
                g[off:off + size] = leaves[name].grad.reshape(-1)
        return g

    def forward(self, z, c, t, leaves):
        """Returns a Tensor (n, 2); ``z`` may be an array or a Tensor, ``c``/``t`` ints or arrays."""
        z = ad.as_tensor(z)
        n = z.shape[0]
        cfg = self.config
        onehot = np.zeros((n, cfg.num_classes))
        onehot[np.arange(n), np.broadcast_to(np.asarray(c), (n,))] = 1.0
        temb = time_embedding(np.broadcast_to(np.asarray(t), (n,)), cfg.T, cfg.time_dim)
        h = ad.concat([z, ad.matmul(onehot, leaves["class_emb"]), temb], axis=1)
        for i in range(self.num_layers):
            h = ad.add(ad.matmul(h, leaves[f"W{i}"]), leaves[f"b{i}"])
            if i < self.num_layers - 1:
                h = ad.silu(h)
        return h

    def __call__(self, z, c, t, flat):
        return self.forward(z, c, t, self.leaves(flat, requires_grad=False)).data


def generator_forward(net, schedule, noise, c, leaves):
    """One-step generator: the shared MLP evaluated at t_init.

    ``noise`` is already scaled by sigma_init.  It is moved to the VP input
    scale with a_{t_init}, which is the usual c_in preconditioning.
    """
    a_init, _ = schedule.coeffs(schedule.t_init)
    return net.forward(a_init * np.asarray(noise), c, schedule.t_init, leaves)


def fake_mean_forward(net, z, c, t, leaves):
    return net.forward(z, c, t, leaves)


# -- teacher backends ---------------------------------------------------------

class AnalyticTeacher:
    """Pretrained-score stand-in built on a closed-form mixture.

    Only exposes score / posterior-mean queries.  The mixture parameters are
    held by a :class:`~sfdlab.gmm.GmmTeacher`, which has no sampling method.
    """

    kind = "analytic"

    def __init__(self, gmm_teacher):
        self._gmm = gmm_teacher
        self.schedule = gmm_teacher.schedule
        self.num_classes = gmm_teacher.num_classes

    def _grouped(self, fn, z, c, t, shape):
        n = z.shape[0]
        c = np.broadcast_to(np.asarray(c), (n,))
        t = np.broadcast_to(np.asarray(t), (n,))
        out = np.empty((n, *shape))
        for k in np.unique(c):
            sel = c == k
            out[sel] = fn(z[sel], int(k), t[sel])
        return out

    def posterior_mean(self, z, c, t):
        """x_phi(z, c, t) as a Tensor; gradients flow into ``z`` through the exact Jacobian."""
        z = ad.as_tensor(z)
        value = self._grouped(self._gmm.posterior_mean, z.data, c, t, (2,))
        if not z.requires_grad:
            return Tensor(value)
        J = self._grouped(self._gmm.posterior_mean_jacobian, z.data, c, t, (2, 2))
        return ad.linear_map(z, value, lambda g: np.einsum("ni,nij->nj", g, J), op="teacher_mean")

    def posterior_mean_value(self, z, c, t):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self._grouped(self._gmm.posterior_mean, z, c, t, (2,))

    def score(self, z, c, t):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self._grouped(self._gmm.diffused_score, z, c, t, (2,))


class PretrainedTeacher:
    """Frozen CondMlp playing the pretrained score network."""

    kind = "pretrained"

    def __init__(self, net, params, schedule):
        self.net = net
        self.params = np.array(params, dtype=float)
        self.schedule = schedule
        self.num_classes = net.config.num_classes
        self._leaves = net.leaves(self.params, requires_grad=False)

    def posterior_mean(self, z, c, t):
        return self.net.forward(z, c, t, self._leaves)

    def posterior_mean_value(self, z, c, t):
        return self.net.forward(z, c, t, self._leaves).data

    def score(self, z, c, t):
        return self.schedule.mean_to_score(z, self.posterior_mean_value(z, c, t), t)


# -- initialisation ------------------------------------------------------------

@dataclass(frozen=True)
class WarmupConfig:
    steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    box: float = 4.0  # half-width of the uniform reference box for clean locations


def warmup_to_teacher(net, teacher, schedule, rng, config=WarmupConfig(), params=None):
    """Regress an MLP onto the teacher's posterior mean without any data.

    Query points are ``a_t u + sigma_t eps`` with ``u`` uniform on a box, so
    the only thing touched is the teacher's mean/score oracle.  Returns the
    fitted parameters and the loss history.
    """
    flat = net.init_params(rng) if params is None else params.copy()
    state = AdamState.zeros(net.num_params, lr=config.lr, beta1=0.9, beta2=0.999)
    t_lo = min(schedule.t_min, 1)
    losses = []
    for step in range(config.steps):
        n = config.batch_size
        c = rng.integers(0, net.config.num_classes, size=n)
        t = rng.integers(t_lo, schedule.t_max + 1, size=n)
        u = rng.uniform(-config.box, config.box, size=(n, 2))
        z = schedule.perturb(u, t, rng.standard_normal((n, 2)))
        target = teacher.posterior_mean_value(z, c, t)
        leaves = net.leaves(flat)
        out = net.forward(z, c, t, leaves)
        loss = ad.mean(ad.sum(ad.square(ad.sub(out, target)), axis=1))
        ad.backward(loss)
        # cosine decay keeps the final fit tight
        state.lr = config.lr * 0.5 * (1 + np.cos(np.pi * step / config.steps))
        flat = adam_step(flat, net.flat_grad(leaves), state)
        losses.append(loss.item())
    return flat, np.array(losses)


def init_networks(net, teacher, schedule, rng, warmup=WarmupConfig()):
    """(theta_0, psi_0): both start from the teacher, as the generator and fake net share one architecture."""
    if isinstance(teacher, PretrainedTeacher):
        if teacher.net.layout != net.layout:
            raise ValueError("pretrained teacher architecture does not match the student networks")
        phi = teacher.params
    else:
        phi, _ = warmup_to_teacher(net, teacher, schedule, rng, warmup)
    return phi.copy(), phi.copy()


def ema_update(ema_params, params, decay):
    if not 0.0 <= decay < 1.0:
        raise ValueError("EMA decay must be in [0, 1)")
    return decay * ema_params + (1.0 - decay) * params

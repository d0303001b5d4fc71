"""Distillation / forgetting losses on x-prediction networks.

All per-sample errors are squared L2 over the data dimension; batch
reductions are means.  ``schedule`` supplies a_t and sigma_t.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, stop_gradient

OMEGA_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_psi: float = 1.0
    mu_psi: float = 0.01
    lambda_theta: float = 1.0
    mu_theta: float = 0.01
    alpha: float = 1.2
    dim: int = 2

    def __post_init__(self):
        if min(self.lambda_psi, self.mu_psi, self.lambda_theta, self.mu_theta) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass
class Batch:
    """One half of a sampling block."""

    classes: np.ndarray   # labels the generator was conditioned on
    noise: np.ndarray     # sigma_init-scaled generator input
    t: np.ndarray
    eps: np.ndarray
    x: object = None      # generator output, array or Tensor
    z: object = None

    def __len__(self):
        return len(self.classes)


def _col(v):
    return np.asarray(v, dtype=float).reshape(-1, 1)


def dsm_gamma(t, schedule):
    """gamma_t = sigma^4 / a^2, which makes the DSM weight a^2/sigma^4 * gamma_t equal one."""
    a, s = schedule.coeffs(np.atleast_1d(t))
    return s ** 4 / a ** 2


def dsm_loss(x_psi, x_target, t, schedule, gamma=None):
    """Mean of gamma_t * a^2/sigma^4 * ||x_psi - x||^2."""
    a, s = schedule.coeffs(np.atleast_1d(t))
    gamma = dsm_gamma(t, schedule) if gamma is None else _col(gamma)
    w = np.broadcast_to(gamma * a * a / s ** 4, (np.shape(x_psi)[0], 1))
    err = ad.sum(ad.square(ad.sub(x_psi, x_target)), axis=1)
    return ad.mean(ad.mul(err, w[:, 0]))


def omega(x_phi, x, t, schedule, dim=2):
    """omega_t = sigma^4/a^2 * C / ||x_phi - x||_1, evaluated on stopped values; returns (n,)."""
    x_phi = x_phi.data if isinstance(x_phi, Tensor) else np.asarray(x_phi)
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    a, s = schedule.coeffs(np.atleast_1d(t))
    l1 = np.maximum(np.abs(x_phi - x).sum(axis=1), OMEGA_FLOOR)
    return (s ** 4 / a ** 2)[:, 0] * dim / l1


def sfd_naive(score_phi, score_psi, w):
    """Mean of w * ||s_phi(z, c1) - s_psi(z, c2)||^2."""
    err = ad.sum(ad.square(ad.sub(score_phi, score_psi)), axis=1)
    return ad.mean(ad.mul(err, np.broadcast_to(np.asarray(w, dtype=float), err.shape)))


def sfd_inner_product(x_phi, x_psi, x, t, schedule, w):
    """Equivalent form of the naive loss: w a^2/sigma^4 (x_phi - x_psi)^T (x_phi - x)."""
    snr = schedule.snr_weight(np.atleast_1d(t))[:, 0]
    terms = ad.dot(ad.sub(x_phi, x_psi), ad.sub(x_phi, x))
    return ad.mean(ad.mul(terms, np.broadcast_to(w * snr, terms.shape)))


def sfd_hybrid_terms(x_phi, x_psi, x, t, alpha, schedule, w=None, dim=2):
    """Per-sample hybrid loss, (n,) Tensor.

    (1 - alpha) w a^2/sigma^4 ||x_phi - x_psi||^2 + w a^2/sigma^4 (x_phi - x_psi)^T (x_psi - x)
    with ``w`` defaulting to the stop-gradient omega_t.
    """
    if w is None:
        w = omega(x_phi, x, t, schedule, dim)
    coef = np.broadcast_to(np.asarray(w, dtype=float) * schedule.snr_weight(np.atleast_1d(t))[:, 0],
                           (np.shape(x)[0],))
    diff = ad.sub(x_phi, x_psi)
    inner = ad.dot(diff, ad.sub(x_psi, x))
    if alpha == 1.0:
        # coefficient (1 - alpha) is exactly zero
        return ad.mul(inner, coef)
    sq = ad.sum(ad.square(diff), axis=1)
    return ad.mul(ad.add(ad.scale(sq, 1.0 - alpha), inner), coef)


def sfd_hybrid(x_phi, x_psi, x, t, alpha, schedule, w=None, dim=2):
    return ad.mean(sfd_hybrid_terms(x_phi, x_psi, x, t, alpha, schedule, w, dim))


def half_weights(n_r, n_f, lam, mu):
    """Per-sample factors turning a sum over a stacked (remaining, forgetting) batch
    into lam * mean_r + mu * mean_f."""
    parts = [np.full(n_r, lam / n_r)] if n_r else []
    if n_f:
        parts.append(np.full(n_f, mu / n_f))
    return np.concatenate(parts) if parts else np.zeros(0)


def psi_update_loss(net, psi_leaves, remaining, forgetting, weights, schedule):
    """lambda_psi gamma(s)||x_psi(z_r)-x_r||^2 + mu_psi gamma(t)||x_psi(z_f)-x_f||^2.

    Generator outputs are plain arrays here, so nothing reaches theta.
    """
    halves = [b for b in (remaining, forgetting) if b is not None and len(b)]
    z = np.concatenate([b.z for b in halves])
    x = np.concatenate([b.x for b in halves])
    c = np.concatenate([b.classes for b in halves])
    t = np.concatenate([b.t for b in halves])
    n_f = len(forgetting) if forgetting is not None else 0
    per = half_weights(len(remaining), n_f, weights.lambda_psi, weights.mu_psi)[: len(c)]
    x_psi = net.forward(z, c, t, psi_leaves)
    a, s = schedule.coeffs(t)
    w = dsm_gamma(t, schedule)[:, 0] * (a * a / s ** 4)[:, 0] * per
    err = ad.sum(ad.square(ad.sub(x_psi, x)), axis=1)
    return ad.sum(ad.mul(err, w))


def perturb_tensor(x, t, eps, schedule):
    a, s = schedule.coeffs(np.atleast_1d(t))
    return ad.add(ad.mul(x, a), s * eps)


def theta_update_loss(net, generator, theta_leaves, psi_leaves, teacher, remaining, forgetting,
                      roles, weights, schedule, mode="sfd", frozen=None):
    """lambda_theta * hybrid(c_r, c_r) + mu_theta * hybrid(c_o, c_f).

    ``generator(noise, classes, leaves)`` returns the generator Tensor.  The
    teacher is queried with the remaining class for the distillation half
    and with the override class for the forgetting half.  ``mode='kl'``
    swaps the hybrid loss for the straight-through KL surrogate.

    ``frozen`` is an optional dict caching the stop-gradient quantities
    (omega weights, KL upstream gradient).  An empty dict is filled on the
    first call and reused afterwards, which lets finite differences treat
    them as the constants the backward pass sees.
    """
    halves = [b for b in (remaining, forgetting) if b is not None and len(b)]
    noise = np.concatenate([b.noise for b in halves])
    c_gen = np.concatenate([b.classes for b in halves])
    t = np.concatenate([b.t for b in halves])
    eps = np.concatenate([b.eps for b in halves])
    c_teacher = c_gen.copy()
    if forgetting is not None and len(forgetting):
        c_teacher[len(remaining):] = roles.override
    n_f = len(forgetting) if forgetting is not None else 0
    per = half_weights(len(remaining), n_f, weights.lambda_theta, weights.mu_theta)[: len(c_gen)]

    x = generator(noise, c_gen, theta_leaves)
    if mode == "kl":
        z = perturb_tensor(stop_gradient(x), t, eps, schedule)
        x_phi = teacher.posterior_mean(z, c_teacher, t)
        x_psi = net.forward(z, c_gen, t, psi_leaves)
        if frozen is None or "upstream" not in frozen:
            g = sfd_kl_upstream(x_phi.data, x_psi.data, x.data, z.data, t, schedule, weights.dim)
            if frozen is not None:
                frozen["upstream"] = g
        return sfd_kl_surrogate(x, per, upstream=g if frozen is None else frozen["upstream"])
    z = perturb_tensor(x, t, eps, schedule)
    x_phi = teacher.posterior_mean(z, c_teacher, t)
    x_psi = net.forward(z, c_gen, t, psi_leaves)
    if frozen is None or "w" not in frozen:
        w = omega(x_phi, x, t, schedule, weights.dim)
        if frozen is not None:
            frozen["w"] = w
    else:
        w = frozen["w"]
    terms = sfd_hybrid_terms(x_phi, x_psi, x, t, weights.alpha, schedule, w=w, dim=weights.dim)
    return ad.sum(ad.mul(terms, per))


def sfd_kl_upstream(x_phi, x_psi, x, z, t, schedule, dim=2):
    """omega_t a_t (s_psi(z, c2) - s_phi(z, c1)), the gradient pushed into x, (n, 2)."""
    score_phi = schedule.mean_to_score(z, x_phi, np.atleast_1d(t))
    score_psi = schedule.mean_to_score(z, x_psi, np.atleast_1d(t))
    a, _ = schedule.coeffs(np.atleast_1d(t))
    w = omega(x_phi, x, t, schedule, dim)[:, None]
    return w * a * (score_psi - score_phi)


def sfd_kl_surrogate(x, per_sample, upstream):
    """Scalar whose gradient w.r.t. ``x`` is ``per_sample * upstream`` row by row.

    ``upstream`` comes from :func:`sfd_kl_upstream`; its value is meaningless
    as a loss, only the gradient is used.
    """
    g = np.asarray(upstream) * np.asarray(per_sample)[:, None]
    return ad.sum(ad.mul(x, stop_gradient(g)))

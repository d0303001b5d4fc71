"""Discrete variance-preserving diffusion schedule and Tweedie conversions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Schedule:
    T: int
    beta: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    t_min: int
    t_max: int
    t_init: int
    sigma_init: float

    def coeffs(self, t):
        """(a_t, sigma_t) for an int or integer array ``t``; arrays come back as (n, 1) columns."""
        t = np.asarray(t)
        if np.any((t < 0) | (t >= self.T)):
            raise ValueError(f"timestep out of range [0, {self.T})")
        if t.ndim == 0:
            return float(self.a[t]), float(self.sigma[t])
        return self.a[t][:, None], self.sigma[t][:, None]

    def sample_timestep(self, rng, size=None):
        """Uniform integer draw(s) from [t_min, t_max], inclusive."""
        return rng.integers(self.t_min, self.t_max + 1, size=size)

    def perturb(self, x, t, eps):
        a, s = self.coeffs(t)
        return a * np.asarray(x) + s * np.asarray(eps)

    def score_to_mean(self, z, score, t):
        a, s = self.coeffs(t)
        return (np.asarray(z) + s * s * np.asarray(score)) / a

    def mean_to_score(self, z, x_hat, t):
        a, s = self.coeffs(t)
        return (a * np.asarray(x_hat) - np.asarray(z)) / (s * s)

    def snr_weight(self, t):
        """a_t^2 / sigma_t^4, the factor in front of x-space squared errors."""
        a, s = self.coeffs(t)
        return a * a / s ** 4


def build_schedule(T=1000, beta_start=1e-4, beta_end=2e-2, t_min=38, t_max=712, sigma_init=2.5):
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 0 <= t_min <= t_max < T:
        raise ValueError(f"need 0 <= t_min <= t_max < T, got t_min={t_min}, t_max={t_max}, T={T}")
    if sigma_init <= 0:
        raise ValueError("sigma_init must be positive")
    beta = np.linspace(beta_start, beta_end, T)
    a = np.sqrt(np.cumprod(1.0 - beta))
    # from a^2 directly so a^2 + sigma^2 == 1 holds to rounding
    sigma = np.sqrt(1.0 - a * a)
    # time embedding of the generator should match the noise it is fed
    window = np.arange(t_min + 1, t_max + 1)
    if window.size == 0:
        raise ValueError("t_init needs t_min < t_max")
    t_init = int(window[np.argmin(np.abs(sigma[window] / a[window] - sigma_init))])
    return Schedule(T, beta, a, sigma, t_min, t_max, t_init, float(sigma_init))

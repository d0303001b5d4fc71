"""Class-conditional 2D Gaussian mixtures with closed-form diffused quantities.

Under ``z = a x + sigma eps`` a mixture component N(mu, S) becomes
N(a mu, a^2 S + sigma^2 I), so scores, posterior means and their Jacobians
are all available exactly.  Nothing in this module draws samples; that lives
in :mod:`sfdlab.sampling` and is kept off the training path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)


def logsumexp(x, axis=0, keepdims=False):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class GmmSpec:
    """Per-class mixture parameters.

    ``weights[c]`` is (m_c,), ``means[c]`` is (m_c, 2) and ``covs[c]`` is
    (m_c, 2, 2); ``priors`` is (K,).
    """

    weights: tuple
    means: tuple
    covs: tuple
    priors: np.ndarray

    def __post_init__(self):
        K = len(self.weights)
        if not (len(self.means) == len(self.covs) == K == len(self.priors)):
            raise ValueError("weights, means, covs and priors must list the same number of classes")
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=float) for w in self.weights))
        object.__setattr__(self, "means", tuple(np.asarray(m, dtype=float).reshape(-1, 2) for m in self.means))
        object.__setattr__(self, "covs", tuple(np.asarray(s, dtype=float).reshape(-1, 2, 2) for s in self.covs))
        object.__setattr__(self, "priors", np.asarray(self.priors, dtype=float))
        if abs(self.priors.sum() - 1.0) > 1e-12 or np.any(self.priors < 0):
            raise ValueError("class priors must lie on the simplex")
        for c in range(K):
            w, m, s = self.weights[c], self.means[c], self.covs[c]
            if not (len(w) == len(m) == len(s)):
                raise ValueError(f"class {c}: component counts disagree")
            if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
                raise ValueError(f"class {c}: component weights must sum to 1")
            if not np.allclose(s, np.swapaxes(s, 1, 2)) or np.any(np.linalg.eigvalsh(s) <= 0):
                raise ValueError(f"class {c}: covariances must be symmetric positive definite")

    @property
    def num_classes(self):
        return len(self.weights)

    def class_mean(self, c):
        return self.weights[c] @ self.means[c]

    def class_cov(self, c):
        mu = self.class_mean(c)
        d = self.means[c] - mu
        return np.einsum("k,kij->ij", self.weights[c], self.covs[c] + d[:, :, None] * d[:, None, :])

    def to_dict(self):
        return {
            "priors": self.priors.tolist(),
            "classes": [
                {"weights": self.weights[c].tolist(),
                 "means": self.means[c].tolist(),
                 "covs": self.covs[c].tolist()}
                for c in range(self.num_classes)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        classes = d["classes"]
        return cls(
            weights=tuple(c["weights"] for c in classes),
            means=tuple(c["means"] for c in classes),
            covs=tuple(c["covs"] for c in classes),
            priors=d["priors"],
        )


def default_spec():
    """Four isotropic classes on the corners of a square, uniform priors."""
    corners = [(2.0, 2.0), (-2.0, 2.0), (-2.0, -2.0), (2.0, -2.0)]
    return GmmSpec(
        weights=tuple([1.0] for _ in corners),
        means=tuple([m] for m in corners),
        covs=tuple([0.25 * np.eye(2)] for _ in corners),
        priors=np.full(4, 0.25),
    )


def random_spec(rng, num_classes=2, max_components=3, spread=3.0):
    """Random mixture spec for property tests."""
    weights, means, covs = [], [], []
    for _ in range(num_classes):
        m = int(rng.integers(1, max_components + 1))
        weights.append(rng.dirichlet(np.ones(m)))
        means.append(rng.uniform(-spread, spread, size=(m, 2)))
        A = rng.normal(size=(m, 2, 2)) * 0.5
        covs.append(A @ np.swapaxes(A, 1, 2) + 0.05 * np.eye(2))
    return GmmSpec(tuple(weights), tuple(means), tuple(covs), rng.dirichlet(np.ones(num_classes)))


@dataclass(frozen=True)
class ClassRoles:
    forget: int
    override: int
    num_classes: int
    sampling_probs: np.ndarray = None  # D_s; uniform over all classes when None

    def __post_init__(self):
        if not 0 <= self.forget < self.num_classes:
            raise ValueError(f"forget class {self.forget} out of range")
        if self.override == self.forget or not 0 <= self.override < self.num_classes:
            raise ValueError("override class must be a remaining class")
        probs = self.sampling_probs
        if probs is None:
            probs = np.full(self.num_classes, 1.0 / self.num_classes)
        probs = np.asarray(probs, dtype=float)
        if probs.shape != (self.num_classes,) or np.any(probs <= 0) or abs(probs.sum() - 1) > 1e-12:
            raise ValueError("sampling distribution must put positive mass on every class")
        object.__setattr__(self, "sampling_probs", probs)

    @property
    def remaining(self):
        return [c for c in range(self.num_classes) if c != self.forget]


def _inv2(C):
    """Batched 2x2 inverse and log-determinant."""
    det = C[..., 0, 0] * C[..., 1, 1] - C[..., 0, 1] * C[..., 1, 0]
    inv = np.empty_like(C)
    inv[..., 0, 0] = C[..., 1, 1]
    inv[..., 1, 1] = C[..., 0, 0]
    inv[..., 0, 1] = -C[..., 0, 1]
    inv[..., 1, 0] = -C[..., 1, 0]
    return inv / det[..., None, None], np.log(det)


def _as_column(v, n):
    v = np.asarray(v, dtype=float)
    return np.broadcast_to(v.reshape(-1) if v.ndim else v, (n,))


def mixture_terms(spec, z, c, a, sigma, hessian=False):
    """Log density, score, posterior mean (and optionally Hessian of log p) of class ``c``.

    ``z`` is (n, 2); ``a`` and ``sigma`` are scalars or length-n arrays.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = z.shape[0]
    a = _as_column(a, n)
    s2 = _as_column(sigma, n) ** 2
    eye = np.eye(2)
    logits, Pds, Ps, comp_means = [], [], [], []
    for w, mu, S in zip(spec.weights[c], spec.means[c], spec.covs[c]):
        C = (a * a)[:, None, None] * S + s2[:, None, None] * eye
        P, logdet = _inv2(C)
        d = z - a[:, None] * mu
        Pd = np.einsum("nij,nj->ni", P, d)
        logits.append(np.log(w) - 0.5 * np.einsum("ni,ni->n", d, Pd) - LOG_2PI - 0.5 * logdet)
        Pds.append(Pd)
        Ps.append(P)
        comp_means.append(mu + a[:, None] * (Pd @ S.T))
    logits = np.stack(logits)                      # (m, n)
    log_p = logsumexp(logits, axis=0)
    r = np.exp(logits - log_p)                     # responsibilities
    Pds = np.stack(Pds)                            # (m, n, 2)
    score = -np.einsum("kn,kni->ni", r, Pds)
    post_mean = np.einsum("kn,kni->ni", r, np.stack(comp_means))
    if not hessian:
        return log_p, score, post_mean
    outer = Pds[..., :, None] * Pds[..., None, :]
    H = np.einsum("kn,knij->nij", r, outer - np.stack(Ps)) - score[:, :, None] * score[:, None, :]
    return log_p, score, post_mean, H


class GmmTeacher:
    """Closed-form stand-in for both the data distribution and the pretrained score net."""

    def __init__(self, spec, schedule):
        self.spec = spec
        self.schedule = schedule

    @property
    def num_classes(self):
        return self.spec.num_classes

    def _terms(self, z, c, t, hessian=False):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        a, s = self.schedule.coeffs(t)
        return mixture_terms(self.spec, z, int(c), np.ravel(a), np.ravel(s), hessian=hessian)

    def diffused_score(self, z, c, t):
        return self._terms(z, c, t)[1]

    def posterior_mean(self, z, c, t):
        return self._terms(z, c, t)[2]

    def log_density(self, z, c, t):
        return self._terms(z, c, t)[0]

    def posterior_mean_jacobian(self, z, c, t):
        """d E[x|z] / dz, (n, 2, 2); symmetric since it is (I + sigma^2 Hess log p) / a."""
        _, _, _, H = self._terms(z, c, t, hessian=True)
        a, s = self.schedule.coeffs(t)
        a = np.ravel(a)[:, None, None] if np.ndim(a) else a
        s = np.ravel(s)[:, None, None] if np.ndim(s) else s
        return (np.eye(2) + s * s * H) / a

    def bayes_classify(self, x):
        """Labels by argmax prior(c) p(x|c) on clean points, plus the class posteriors."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        scores = np.stack([
            np.log(self.spec.priors[c]) + mixture_terms(self.spec, x, c, np.ones(n), np.zeros(n))[0]
            for c in range(self.num_classes)
        ], axis=1)
        post = np.exp(scores - logsumexp(scores, axis=1, keepdims=True))
        # argmax returns the first maximum, i.e. the lowest class index on ties
        return np.argmax(scores, axis=1), post

"""Unlearning / quality metrics on 2D samples and the identity checks behind the losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gmm import GmmTeacher, mixture_terms
from .models import generator_forward
from .sampling import sample

FRECHET_REG = 1e-10


def unlearning_accuracy(samples, teacher, forget, override):
    """(UA, override rate): fractions of ``samples`` not classified as ``forget`` / classified as ``override``."""
    samples = np.atleast_2d(samples)
    if samples.shape[0] == 0:
        raise ValueError("unlearning accuracy needs at least one sample")
    labels, _ = teacher.bayes_classify(samples)
    return float(np.mean(labels != forget)), float(np.mean(labels == override))


def _sqrt_trace_product(S1, S2):
    # tr sqrt(S1 S2) for 2x2 PSD matrices: (sqrt(l1) + sqrt(l2))^2 = tr + 2 sqrt(det)
    M = S1 @ S2
    det = max(np.linalg.det(M), 0.0)
    return np.sqrt(max(np.trace(M) + 2.0 * np.sqrt(det), 0.0))


def frechet_from_moments(mu1, S1, mu2, S2):
    d = np.asarray(mu1) - np.asarray(mu2)
    tr_sqrt = _sqrt_trace_product(np.asarray(S1), np.asarray(S2))
    return float(max(d @ d + np.trace(S1) + np.trace(S2) - 2.0 * tr_sqrt, 0.0))


def frechet_gaussian(samples_a, samples_b):
    """Squared 2-Wasserstein distance between Gaussians fitted to two 2D sample sets."""
    a, b = np.atleast_2d(samples_a), np.atleast_2d(samples_b)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples per set")
    reg = FRECHET_REG * np.eye(a.shape[1])
    return frechet_from_moments(a.mean(0), np.cov(a, rowvar=False) + reg,
                                b.mean(0), np.cov(b, rowvar=False) + reg)


def _pairwise_sq(a, b):
    return np.maximum((a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T, 0.0)


def _coverage(ref, radii, query, chunk=2048):
    inside = np.empty(len(query), dtype=bool)
    r2 = radii ** 2
    for i in range(0, len(query), chunk):
        d2 = _pairwise_sq(query[i:i + chunk], ref)
        inside[i:i + chunk] = np.any(d2 <= r2[None, :], axis=1)
    return inside


def _knn_radii_chunked(points, k, chunk=2048):
    out = np.empty(len(points))
    for i in range(0, len(points), chunk):
        d2 = _pairwise_sq(points[i:i + chunk], points)
        # index 0 of each partitioned row is the point itself
        out[i:i + chunk] = np.sqrt(np.partition(d2, k, axis=1)[:, k])
    return out


def precision_recall_knn(real, fake, k=3):
    """k-NN manifold precision and recall.

    Precision is the fraction of fake points inside some real point's k-NN
    ball; recall swaps the roles.
    """
    real, fake = np.atleast_2d(real), np.atleast_2d(fake)
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("precision/recall need non-empty sets")
    if not 1 <= k < min(len(real), len(fake)):
        raise ValueError(f"k={k} must be in [1, {min(len(real), len(fake)) - 1}]")
    precision = _coverage(real, _knn_radii_chunked(real, k), fake).mean()
    recall = _coverage(fake, _knn_radii_chunked(fake, k), real).mean()
    return float(precision), float(recall)


def calibrate_frechet_floor(spec, c, n, rng, reps=50, quantile=0.95):
    """Quantile of the Frechet distance between two independent n-draws of class ``c``."""
    d = [frechet_gaussian(sample(spec, c, n, rng), sample(spec, c, n, rng)) for _ in range(reps)]
    return float(np.quantile(d, quantile))


@dataclass
class MetricsRecord:
    step: int
    ua: float
    override_rate: float
    frechet: dict
    precision: float
    recall: float

    def as_dict(self):
        out = {"ua": self.ua, "override_rate": self.override_rate,
               "precision": self.precision, "recall": self.recall}
        for c, v in sorted(self.frechet.items()):
            out[f"frechet_{c}"] = v
        out["frechet_remaining"] = float(np.mean(list(self.frechet.values())))
        return out


class Evaluator:
    """Scores a generator parameter vector against teacher samples.

    Generator noise and teacher reference sets are drawn once from
    ``seed`` so that successive evaluations share common random numbers.
    """

    def __init__(self, spec, schedule, net, roles, n_samples=10_000, seed=1234, k=3, pr_samples=None):
        self.spec, self.schedule, self.net, self.roles = spec, schedule, net, roles
        self.teacher = GmmTeacher(spec, schedule)
        self.k = k
        rng = np.random.default_rng(seed)
        self.noise = schedule.sigma_init * rng.standard_normal((n_samples, 2))
        self.reference = {c: sample(spec, c, n_samples, rng) for c in range(spec.num_classes)}
        self.pr_samples = n_samples if pr_samples is None else pr_samples

    def generate(self, params, c, n=None):
        noise = self.noise if n is None else self.noise[:n]
        leaves = self.net.leaves(params, requires_grad=False)
        return generator_forward(self.net, self.schedule, noise, c, leaves).data

    def metrics(self, params, step=0):
        gen = {c: self.generate(params, c) for c in range(self.spec.num_classes)}
        ua, over = unlearning_accuracy(gen[self.roles.forget], self.teacher,
                                       self.roles.forget, self.roles.override)
        frechet = {c: frechet_gaussian(gen[c], self.reference[c]) for c in self.roles.remaining}
        m = self.pr_samples // len(self.roles.remaining)
        real = np.concatenate([self.reference[c][:m] for c in self.roles.remaining])
        fake = np.concatenate([gen[c][:m] for c in self.roles.remaining])
        p, r = precision_recall_knn(real, fake, self.k)
        return MetricsRecord(step, ua, over, frechet, p, r)

    def __call__(self, params, step=0, stage=None):
        return self.metrics(params, step).as_dict()


# -- identity checks ----------------------------------------------------------------

def verify_fisher_identity(teacher_spec, gen_spec, c1, c2, t, n, rng, schedule):
    """Monte-Carlo estimates of E||s_phi - s_gen||^2 and of its inner-product form.

    Draws x from class ``c2`` of ``gen_spec``, z = a x + sigma eps, and uses
    the closed-form score of the diffused generator mixture as s_psi*.
    Returns (lhs, rhs, combined standard error).
    """
    a, s = schedule.coeffs(t)
    x = sample(gen_spec, c2, n, rng)
    z = a * x + s * rng.standard_normal(x.shape)
    _, s_phi, x_phi = mixture_terms(teacher_spec, z, c1, a, s)
    _, s_gen, x_gen = mixture_terms(gen_spec, z, c2, a, s)
    lhs_i = np.sum((s_phi - s_gen) ** 2, axis=1)
    rhs_i = (a * a / s ** 4) * np.sum((x_phi - x_gen) * (x_phi - x), axis=1)
    se = np.sqrt(lhs_i.var(ddof=1) / n + rhs_i.var(ddof=1) / n)
    return float(lhs_i.mean()), float(rhs_i.mean()), float(se)


def verify_tweedie(teacher, z, c, t):
    """Max |E[x|z] - (z + sigma^2 score)/a| over probes."""
    direct = teacher.posterior_mean(z, c, t)
    via_score = teacher.schedule.score_to_mean(z, teacher.diffused_score(z, c, t), t)
    return float(np.max(np.abs(direct - via_score)))


# -- metric-log helpers ---------------------------------------------------------

def first_step(log, key, predicate, stage=None, step_key="step"):
    """Step of the first record (optionally within ``stage``) whose ``key`` satisfies ``predicate``."""
    for rec in log:
        if stage is not None and rec["stage"] != stage:
            continue
        if rec.get(key) is not None and predicate(rec[key]):
            return rec[step_key]
    return None


def with_global_steps(log):
    """Copies of the records with a ``global_step`` that keeps counting across stages."""
    out, offset, last_stage, last_step = [], 0, None, 0
    for rec in log:
        if last_stage is not None and rec["stage"] != last_stage:
            offset += last_step
        last_stage, last_step = rec["stage"], rec["step"]
        out.append({**rec, "global_step": offset + rec["step"]})
    return out

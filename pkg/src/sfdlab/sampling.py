"""Draws from the teacher mixture.

This is the only module that produces data samples.  It is used by
evaluation and by MLP-teacher pretraining, and must never be imported from
the training loop (see ``tests/test_architecture.py``).
"""
import numpy as np


def sample(spec, c, n, rng):
    """``n`` i.i.d. points from class ``c`` of ``spec``."""
    w, mu, S = spec.weights[c], spec.means[c], spec.covs[c]
    comp = rng.choice(len(w), size=n, p=w)
    L = np.linalg.cholesky(S)
    eps = rng.standard_normal((n, 2))
    return mu[comp] + np.einsum("nij,nj->ni", L[comp], eps)


def sample_labelled(spec, n_per_class, rng):
    """Stacked samples of every class with their labels."""
    xs = [sample(spec, c, n_per_class, rng) for c in range(spec.num_classes)]
    labels = np.repeat(np.arange(spec.num_classes), n_per_class)
    return np.concatenate(xs), labels


def sample_diffused(spec, c, n, a, sigma, rng):
    """Draws of ``a x + sigma eps`` with ``x`` from class ``c``."""
    x = sample(spec, c, n, rng)
    return a * x + sigma * rng.standard_normal(x.shape), x


def write_csv(path, points, labels):
    """Sample dump with header ``x,y,class``."""
    points = np.asarray(points)
    with open(path, "w") as fh:
        fh.write("x,y,class\n")
        for (px, py), lab in zip(points, labels):
            fh.write(f"{float(px)!r},{float(py)!r},{int(lab)}\n")


def read_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :2], data[:, 2].astype(int)

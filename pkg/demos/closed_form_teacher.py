"""Closed-form mixture teacher: scores, posterior means and the checks built on them.

    python demos/closed_form_teacher.py
"""
import numpy as np

from sfdlab.eval import verify_fisher_identity, verify_tweedie
from sfdlab.gmm import GmmTeacher, default_spec, random_spec
from sfdlab.sampling import sample
from sfdlab.schedule import build_schedule

sch = build_schedule()
spec = default_spec()
teacher = GmmTeacher(spec, sch)
print(f"schedule: T={sch.T}, window [{sch.t_min}, {sch.t_max}], t_init={sch.t_init}")

# denoise a noisy point from class 3 at a few noise levels
rng = np.random.default_rng(0)
x = sample(spec, 3, 1, rng)
eps = rng.standard_normal(x.shape)
for t in (sch.t_min, sch.t_init, sch.t_max):
    a, s = sch.coeffs(t)
    z = sch.perturb(x, t, eps)
    x_hat = teacher.posterior_mean(z, 3, t)
    print(f"t={t:4d} a={a:.3f} sigma={s:.3f}  z={z[0].round(3)}  E[x|z]={x_hat[0].round(3)}")

# Tweedie: posterior mean and score are two views of one quantity
z = rng.uniform(-10, 10, size=(1000, 2))
print("Tweedie max deviation:", verify_tweedie(teacher, z, 2, rng.integers(0, sch.T, 1000)))

# Bayes labels of fresh draws
pts = np.concatenate([sample(spec, c, 500, rng) for c in range(4)])
labels, _ = teacher.bayes_classify(pts)
print("Bayes accuracy on teacher samples:", np.mean(labels == np.repeat(np.arange(4), 500)))

# Fisher divergence two ways, for one random pair of mixtures
a_spec, b_spec = random_spec(rng), random_spec(rng)
lhs, rhs, se = verify_fisher_identity(a_spec, b_spec, 0, 1, 375, 200_000, rng, sch)
print(f"Fisher identity at t=375: {lhs:.5f} vs {rhs:.5f} (se {se:.5f})")

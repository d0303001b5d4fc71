import numpy as np
import pytest

from sfdlab import autodiff as ad
from sfdlab.gmm import GmmTeacher
from sfdlab.losses import dsm_loss
from sfdlab.models import (AnalyticTeacher, CondMlp, MlpConfig, PretrainedTeacher, WarmupConfig,
                           ema_update, fake_mean_forward, generator_forward, init_networks,
                           time_embedding, warmup_to_teacher)
from sfdlab.sampling import sample

SMALL = MlpConfig(4, hidden=(16, 16), class_dim=4, time_dim=8)


def test_layout_covers_flat_vector():
    net = CondMlp(SMALL)
    sizes = sum(size for *_, size in net.layout)
    assert sizes == net.num_params
    assert net.layout[0][0] == "class_emb"
    assert dict((n, s) for n, s, *_ in net.layout)["W0"] == (2 + 4 + 8, 16)


def test_time_embedding_range():
    e = time_embedding(np.arange(1000), 1000, 16)
    assert e.shape == (1000, 16) and np.all(np.abs(e) <= 1.0)


def test_forward_is_deterministic_and_finite(rng):
    net = CondMlp(SMALL)
    p = net.init_params(rng)
    z = np.random.default_rng(1).uniform(-10, 10, size=(64, 2))
    out = net(z, 2, 500, p)
    assert out.shape == (64, 2) and np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, net(z, 2, 500, p))


def test_generator_finite_for_large_noise(schedule, rng):
    net = CondMlp(SMALL)
    leaves = net.leaves(net.init_params(rng), requires_grad=False)
    noise = np.full((4, 2), 10 * schedule.sigma_init)
    assert np.all(np.isfinite(generator_forward(net, schedule, noise, 1, leaves).data))


def test_leaves_reject_wrong_size():
    with pytest.raises(ValueError):
        CondMlp(SMALL).leaves(np.zeros(3))


def test_generator_param_gradient(schedule, rng):
    net = CondMlp(MlpConfig(3, hidden=(6,), class_dim=2, time_dim=4))
    p = net.init_params(rng)
    noise = schedule.sigma_init * rng.normal(size=(4, 2))
    names = [n for n, *_ in net.layout]
    blocks = net.leaves(p, requires_grad=False)
    fn = lambda ts: ad.sum(ad.square(generator_forward(net, schedule, noise, 1, dict(zip(names, ts)))))
    assert ad.grad_check(fn, [blocks[k].data for k in names]) < 1e-5


def test_analytic_teacher_mean_vjp(schedule, spec, rng):
    teacher = AnalyticTeacher(GmmTeacher(spec, schedule))
    z0 = rng.normal(size=(5, 2))
    c = np.array([0, 1, 1, 2, 3])
    t = np.array([50, 100, 300, 500, 700])
    err = ad.grad_check(lambda v: ad.sum(ad.square(teacher.posterior_mean(v[0], c, t))), [z0])
    assert err < 1e-7


def test_pretrained_copy_is_bit_identical(schedule, spec, rng):
    net = CondMlp(SMALL)
    phi = net.init_params(rng)
    teacher = PretrainedTeacher(net, phi, schedule)
    theta, psi = init_networks(net, teacher, schedule, rng)
    np.testing.assert_array_equal(theta, phi)
    np.testing.assert_array_equal(psi, phi)
    z = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(fake_mean_forward(net, z, 1, 200, net.leaves(psi)).data,
                                  teacher.posterior_mean_value(z, 1, 200))


def test_pretrained_architecture_mismatch(schedule, rng):
    other = CondMlp(MlpConfig(4, hidden=(8,)))
    teacher = PretrainedTeacher(other, other.init_params(rng), schedule)
    with pytest.raises(ValueError):
        init_networks(CondMlp(SMALL), teacher, schedule, rng)


def test_init_is_seed_deterministic(schedule, spec):
    teacher = AnalyticTeacher(GmmTeacher(spec, schedule))
    cfg = WarmupConfig(steps=20, batch_size=32)
    a = init_networks(CondMlp(SMALL), teacher, schedule, np.random.default_rng(5), cfg)
    b = init_networks(CondMlp(SMALL), teacher, schedule, np.random.default_rng(5), cfg)
    np.testing.assert_array_equal(a[0], b[0])


def test_warmup_cuts_dsm_loss_below_tenth(schedule, spec):
    """DSM loss on mixture samples after the data-free warmup vs at random init."""
    net = CondMlp(MlpConfig(4))
    teacher = AnalyticTeacher(GmmTeacher(spec, schedule))
    rng = np.random.default_rng(0)
    init = net.init_params(rng)
    fitted, _ = warmup_to_teacher(net, teacher, schedule, rng, WarmupConfig(steps=1500),
                                  params=init)
    ev = np.random.default_rng(99)
    n = 4000
    c = ev.integers(0, 4, n)
    x = np.concatenate([sample(spec, int(k), 1, ev) for k in c])
    t = schedule.sample_timestep(ev, n)
    z = schedule.perturb(x, t, ev.standard_normal(x.shape))
    loss = lambda p: dsm_loss(net(z, c, t, p), x, t, schedule).item()
    assert loss(fitted) <= 0.1 * loss(init)


def test_ema_update():
    p = np.array([1.0, 2.0])
    np.testing.assert_array_equal(ema_update(np.zeros(2), p, 0.0), p)
    ema = np.zeros(2)
    for _ in range(10):
        ema = ema_update(ema, p, 0.9)
    np.testing.assert_allclose(p - ema, 0.9 ** 10 * p, rtol=1e-12)
    with pytest.raises(ValueError):
        ema_update(ema, p, 1.0)

import shutil

import numpy as np
import pytest
from conftest import tiny_config

from sfdlab import autodiff as ad
from sfdlab.checkpoint import CheckpointError
from sfdlab.eval import Evaluator
from sfdlab.gmm import GmmSpec
from sfdlab.losses import LossWeights, dsm_loss, psi_update_loss
from sfdlab.models import MlpConfig, WarmupConfig
from sfdlab.trainer import (SfdConfig, Trainer, TrainingAborted, load_state, phases_for,
                            run_two_stage, save_state)


def _same_state(a, b):
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.psi, b.psi)
    if a.ema is None:
        assert b.ema is None
    else:
        np.testing.assert_array_equal(a.ema, b.ema)
    assert a.log == b.log


def test_defaults_follow_table8():
    c = SfdConfig()
    assert (c.batch_size, c.lr_theta, c.lr_psi, c.beta1, c.ema_decay) == (128, 1e-4, 1e-4, 0.0, 0.999)
    assert c.kimgs == 2560.0
    with pytest.raises(ValueError):
        SfdConfig(mode="fast")


def test_phases():
    two = phases_for(SfdConfig(mode="two-stage"))
    assert [p.name for p in two] == ["distill", "forget"]
    d, f = two
    assert d.weights.mu_theta == d.weights.mu_psi == 0.0 and d.all_classes and not d.forgetting
    w = f.weights
    assert (w.lambda_psi, w.mu_psi, w.lambda_theta, w.mu_theta) == (1.0, 1.0, 1.0, 1.0)
    assert not f.ema and f.forgetting
    assert phases_for(SfdConfig(mode="kl"))[0].loss == "kl"


def test_same_seed_same_log():
    a = Trainer(tiny_config()).run()
    b = Trainer(tiny_config()).run()
    _same_state(a, b)
    assert [r["step"] for r in a.log] == [0, 10, 20, 30]
    c = Trainer(tiny_config(seed=1)).run()
    assert not np.array_equal(a.theta, c.theta)


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_config(checkpoint_interval=10)
    full = Trainer(cfg).run()

    path = tmp_path / "state.ckpt"
    snap = tmp_path / "mid.ckpt"

    def grab(rec):
        if rec["step"] == 20:
            shutil.copy(path, snap)  # holds the step-10 state at this point

    Trainer(cfg).run(checkpoint_path=str(path), on_record=grab)
    state, saved_cfg = load_state(snap)
    assert state.step == 10 and saved_cfg["train"]["steps"] == 30
    resumed = Trainer(cfg).run(state)
    _same_state(full, resumed)


def test_resume_mid_interval(tmp_path):
    # pending loss buffers survive the round trip
    cfg = tiny_config()
    tr = Trainer(cfg)
    st = tr.init_state()
    phase = phases_for(cfg)[0]
    tr.run_phase(st, phase, 10)
    for _ in range(5):
        tr.train_step(st, phase)
    assert len(st.pending["loss_psi"]) == 5
    save_state(tmp_path / "s.ckpt", st, cfg)
    back, _ = load_state(tmp_path / "s.ckpt")
    _same_state(Trainer(cfg).run(back), Trainer(cfg).run())


def test_load_rejects_other_containers(tmp_path):
    from sfdlab import checkpoint as ckpt
    ckpt.save(tmp_path / "x.ckpt", {"a": np.zeros(2)}, {"kind": "other"})
    with pytest.raises(CheckpointError):
        load_state(tmp_path / "x.ckpt")


def test_nan_aborts_with_step_and_checkpoint(tmp_path):
    tr = Trainer(tiny_config())
    st = tr.init_state()
    st.theta = st.theta.copy()
    st.theta[0] = np.nan
    with pytest.raises(TrainingAborted, match=r"joint step 0; last checkpoint: .*last.ckpt"):
        tr.run(st, checkpoint_path=str(tmp_path / "last.ckpt"))


class RecordingTeacher:
    def __init__(self, inner):
        self.inner = inner
        self.calls = []

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def posterior_mean(self, z, c, t):
        self.calls.append(np.array(c, copy=True))
        return self.inner.posterior_mean(z, c, t)


def test_forgetting_half_queries_override_class():
    cfg = tiny_config(forget_class=2, override_class=3)
    base = Trainer(cfg)
    spy = RecordingTeacher(base.teacher)
    tr = Trainer(cfg, teacher=spy)
    st = tr.init_state()
    tr.train_step(st, phases_for(cfg)[0])
    (c,) = spy.calls
    B = cfg.batch_size
    assert len(c) == 2 * B
    assert np.all(c[B:] == 3)
    assert len(set(c[:B])) == 1 and c[0] in (0, 1)


class BlockSpy(Trainer):
    def __init__(self, cfg):
        super().__init__(cfg)
        self.blocks = []

    def sample_block(self, rng, theta, phase):
        out = super().sample_block(rng, theta, phase)
        self.blocks.append((theta.copy(), out))
        return out


def test_update_order_and_fresh_blocks():
    cfg = tiny_config()
    tr = BlockSpy(cfg)
    st = tr.init_state()
    phase = phases_for(cfg)[0]
    theta0, psi0 = st.theta.copy(), st.psi.copy()

    # replay the fake-score half by hand from a copy of the generator state
    rng = np.random.default_rng()
    rng.bit_generator.state = st.rng.bit_generator.state
    twin = Trainer(cfg, teacher=tr.teacher)
    rem, fgt = twin.sample_block(rng, theta0, phase)
    twin._fill(theta0, rem, fgt)
    leaves = twin.net.leaves(psi0)
    ad.backward(psi_update_loss(twin.net, leaves, rem, fgt, phase.weights, twin.schedule))
    adam = twin._adam(cfg.lr_psi)
    psi1 = ad.adam_step(psi0, twin.net.flat_grad(leaves), adam)

    tr.train_step(st, phase)
    np.testing.assert_array_equal(st.psi, psi1)
    (th_a, (ra, fa)), (th_b, (rb, fb)) = tr.blocks
    # both blocks see the pre-update generator, and every draw is fresh
    np.testing.assert_array_equal(th_a, theta0)
    np.testing.assert_array_equal(th_b, theta0)
    for u, v in ((ra, rb), (fa, fb)):
        assert not np.array_equal(u.noise, v.noise)
        assert not np.array_equal(u.eps, v.eps)
        assert not np.array_equal(u.t, v.t)
    assert not np.array_equal(st.theta, theta0)
    # EMA sees exactly one update
    np.testing.assert_allclose(st.ema, 0.999 * theta0 + 0.001 * st.theta, rtol=0, atol=1e-15)


def test_two_stage_boundary_checkpoint(tmp_path):
    cfg = tiny_config(mode="two-stage")
    path = tmp_path / "state.ckpt"
    full = run_two_stage(cfg, checkpoint_path=str(path))
    assert [r["stage"] for r in full.log] == ["distill"] * 3 + ["forget"] * 3
    assert full.ema is None
    mid, _ = load_state(f"{path}.distill")
    assert (mid.stage, mid.step) == ("distill", cfg.distill_steps)
    _same_state(Trainer(cfg).run(mid), full)


def test_forgetting_disabled_keeps_ua_low(spec):
    cfg = tiny_config(mode="distill-only", steps=40, eval_interval=20,
                      model=MlpConfig(4, hidden=(32, 32), class_dim=4, time_dim=8),
                      warmup=WarmupConfig(steps=600, batch_size=128))
    tr = Trainer(cfg)
    ev = Evaluator(spec, tr.schedule, tr.net, cfg.roles, n_samples=2000, pr_samples=200)
    st = tr.run(evaluator=ev)
    assert all(r["ua"] <= 0.05 for r in st.log)


def _single_class_config(seed):
    # two-class mixture with mu = 0: only the remaining class is ever distilled
    spec = GmmSpec(([1.0], [0.5, 0.5]), ([[3.0, 3.0]], [[-1.0, 0.0], [1.0, 0.5]]),
                   ([0.3 * np.eye(2)], [0.3 * np.eye(2), 0.2 * np.eye(2)]), np.array([0.5, 0.5]))
    return SfdConfig(spec=spec, forget_class=0, override_class=1, seed=seed, steps=400,
                     weights=LossWeights(mu_psi=0.0, mu_theta=0.0),
                     model=MlpConfig(2, hidden=(32, 32), class_dim=2, time_dim=8),
                     warmup=WarmupConfig(steps=500, batch_size=64))


@pytest.mark.parametrize("seed", [0, 3])
def test_single_class_distillation_gap_decreases(seed):
    """Fake-vs-teacher denoiser gap on generator samples, 100-step medians."""
    cfg = _single_class_config(seed)
    tr = Trainer(cfg)
    st = tr.init_state()
    phase = phases_for(cfg)[0]
    gaps = []
    for _ in range(cfg.steps):
        tr.train_step(st, phase)
        probe = np.random.default_rng(5)
        blocks = [tr.sample_block(probe, st.theta, phase)[0] for _ in range(4)]
        for b in blocks:
            tr._fill(st.theta, b, None)
        z, x0, t, c = (np.concatenate([getattr(b, k) for b in blocks]) for k in ("z", "x", "t", "classes"))
        assert np.all(c == 1)
        target = tr.teacher.posterior_mean_value(z, c, t)
        gaps.append(dsm_loss(tr.net(z, c, t, st.psi), target, t, tr.schedule).item())
    med = [np.median(gaps[i:i + 100]) for i in range(0, cfg.steps, 100)]
    assert all(b < a for a, b in zip(med, med[1:])), med

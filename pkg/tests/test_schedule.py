import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sfdlab.schedule import build_schedule

# values from a pure-python cumulative product (math.sqrt, no numpy)
A_ORACLE = {0: 0.9999499987499375, 38: 0.9907103640226309, 440: 0.3710930356574397,
            712: 0.07607239445913754, 999: 0.006352818087570016}


def test_coefficients_match_independent_oracle(schedule):
    for t, a in A_ORACLE.items():
        assert schedule.a[t] == pytest.approx(a, rel=1e-13)


def test_default_t_init(schedule):
    # pure-python argmin of |sigma/a - 2.5| over (38, 712] gives 440
    assert schedule.t_init == 440
    assert schedule.t_min < schedule.t_init <= schedule.t_max


def test_variance_preserving_to_rounding(schedule):
    err = np.abs(schedule.a ** 2 + schedule.sigma ** 2 - 1.0)
    assert err.max() <= 4 * np.finfo(float).eps


def test_monotone(schedule):
    assert np.all(np.diff(schedule.a) < 0) and np.all(np.diff(schedule.sigma) > 0)


def test_coeffs_shapes_and_range(schedule):
    a, s = schedule.coeffs(10)
    assert isinstance(a, float) and isinstance(s, float)
    a, s = schedule.coeffs(np.array([1, 2, 3]))
    assert a.shape == (3, 1)
    with pytest.raises(ValueError):
        schedule.coeffs(1000)
    with pytest.raises(ValueError):
        schedule.coeffs(np.array([-1]))


def test_sample_timestep_window(schedule, rng):
    t = schedule.sample_timestep(rng, 20000)
    assert t.min() == schedule.t_min and t.max() == schedule.t_max


@pytest.mark.parametrize("kw", [dict(beta_start=0.0), dict(beta_end=1.0), dict(t_min=800, t_max=700),
                                dict(t_max=1000), dict(sigma_init=0.0), dict(t_min=5, t_max=5)])
def test_invalid_arguments(kw):
    with pytest.raises(ValueError):
        build_schedule(**kw)


@given(st.integers(0, 999), st.floats(-10, 10), st.floats(-10, 10))
def test_score_mean_round_trip(t, zx, sx):
    sch = build_schedule()
    z = np.array([[zx, 0.5]])
    score = np.array([[sx, -1.0]])
    back = sch.mean_to_score(z, sch.score_to_mean(z, score, t), t)
    np.testing.assert_allclose(back, score, rtol=1e-9, atol=1e-12 / sch.sigma[t] ** 2)


def test_perturb_is_affine(schedule, rng):
    x, eps = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    t = np.arange(5) * 100
    z = schedule.perturb(x, t, eps)
    np.testing.assert_allclose(z, schedule.a[t][:, None] * x + schedule.sigma[t][:, None] * eps)


def test_snr_weight(schedule):
    assert schedule.snr_weight(100) == pytest.approx(schedule.a[100] ** 2 / schedule.sigma[100] ** 4)

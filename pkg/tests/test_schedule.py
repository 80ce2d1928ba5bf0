import math

import numpy as np
import pytest

from latent_motion.schedule import (
    NoiseSchedule,
    ScheduleError,
    build_schedule,
    eps_from_output,
    forward_diffuse,
    sampling_timesteps,
    schedule_weight,
    velocity_target,
    xhat0,
    xhat0_output_scale,
)
from latent_motion.tensorio import RngStream

KINDS = ["linear-beta", "cosine"]


def test_linear_first_step():
    s = build_schedule("linear-beta", 1000)
    assert s.abar(1) == 1 - 1e-4


@pytest.mark.parametrize("kind", KINDS)
def test_sigma_definition_and_endpoints(kind):
    s = build_schedule(kind, 1000)
    assert np.max(np.abs(s.sigma**2 + s.alpha_bar - 1)) < 1e-15
    assert s.alpha_bar[0] >= 0.99
    assert s.alpha_bar[-1] <= 0.01
    assert np.all(s.alpha_bar > 0)


@pytest.mark.parametrize("kind", KINDS)
def test_monotone(kind):
    a = build_schedule(kind, 1000).alpha_bar
    assert np.all(a[1:] <= a[:-1])


def test_rejects_short_schedule():
    with pytest.raises(ScheduleError):
        build_schedule("linear-beta", 1)


def test_forward_identity_when_clean():
    s = NoiseSchedule("custom", 2, np.array([1.0, 0.5]), np.array([0.0, math.sqrt(0.5)]))
    z0 = RngStream(1).normal((2, 3))
    eps = RngStream(2).normal((2, 3))
    np.testing.assert_array_equal(forward_diffuse(z0, 1, eps, s), z0)


def test_forward_zero_noise():
    s = build_schedule()
    z0 = RngStream(1).normal((3, 4))
    np.testing.assert_array_equal(forward_diffuse(z0, 10, np.zeros_like(z0), s), math.sqrt(s.abar(10)) * z0)


def test_forward_elementwise():
    s = build_schedule()
    z0 = RngStream(3).normal((2, 2, 3))
    eps = RngStream(4).normal((2, 2, 3))
    zt = forward_diffuse(z0, 500, eps, s)
    a = float(s.alpha_bar[499])
    for idx in np.ndindex(z0.shape):
        assert abs(zt[idx] - (math.sqrt(a) * z0[idx] + math.sqrt(1 - a) * eps[idx])) < 1e-15


def test_forward_shape_mismatch():
    s = build_schedule()
    with pytest.raises(ScheduleError):
        forward_diffuse(np.zeros(3), 5, np.zeros(4), s)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("param", ["epsilon", "v"])
def test_round_trip_recovers_z0(kind, param):
    s = build_schedule(kind, 1000, param)
    z0 = RngStream(5).normal((9, 8, 4, 4))
    eps = RngStream(6).normal(z0.shape)
    for t in range(1, 1001, 37):
        if s.abar(t) < 1e-6:
            continue
        zt = forward_diffuse(z0, t, eps, s)
        out = eps if param == "epsilon" else velocity_target(z0, eps, t, s)
        rel = np.linalg.norm(xhat0(out, zt, t, s) - z0) / np.linalg.norm(z0)
        assert rel < 1e-10
        np.testing.assert_allclose(eps_from_output(out, zt, t, s), eps, atol=1e-9)


def test_xhat0_clean_state():
    s = NoiseSchedule("custom", 2, np.array([1.0, 0.5]), np.array([0.0, math.sqrt(0.5)]))
    z0 = RngStream(7).normal(5)
    np.testing.assert_array_equal(xhat0(RngStream(8).normal(5), z0, 1, s), z0)


def test_xhat0_ill_conditioned_guard():
    s = NoiseSchedule("custom", 2, np.array([0.5, 1e-13]), np.sqrt(1 - np.array([0.5, 1e-13])))
    with pytest.raises(ScheduleError, match="ill-conditioned"):
        xhat0(np.zeros(3), np.zeros(3), 2, s)


@pytest.mark.parametrize("param, expect", [("epsilon", lambda a, s: -s / math.sqrt(a)), ("v", lambda a, s: -s)])
def test_output_jacobian_by_finite_differences(param, expect):
    s = build_schedule("linear-beta", 1000, param)
    rng = RngStream(9)
    z = rng.normal((2, 3))
    out = rng.normal((2, 3))
    t, h = 300, 1e-6
    for idx in np.ndindex(out.shape):
        e = np.zeros_like(out)
        e[idx] = h
        fd = (xhat0(out + e, z, t, s) - xhat0(out - e, z, t, s)) / (2 * h)
        ref = expect(s.abar(t), s.sig(t))
        assert abs(fd[idx] - ref) <= 1e-6 * abs(ref)
        assert abs(xhat0_output_scale(t, s) - ref) <= 1e-15 * abs(ref)
        off = np.delete(fd.ravel(), np.ravel_multi_index(idx, out.shape))
        assert np.all(np.abs(off) < 1e-6)


def test_schedule_weight_mean():
    s = NoiseSchedule("custom", 2, np.array([0.4, 0.2]), np.sqrt(1 - np.array([0.4, 0.2])))
    assert schedule_weight([1, 2], s) == pytest.approx(0.3, abs=1e-15)
    assert schedule_weight([2], s) == 0.2


def test_schedule_weight_vanishes_at_max_noise():
    s = build_schedule("cosine", 1000)
    assert schedule_weight([1000] * 8, s) < 1e-6


def test_schedule_weight_empty():
    with pytest.raises(ScheduleError):
        schedule_weight([], build_schedule())


def test_sampling_timesteps():
    s = build_schedule()
    ts = sampling_timesteps(50, s)
    assert len(ts) == 50 and len(set(ts)) == 50
    assert ts[0] == 1000 and ts[-1] == 1
    assert all(a > b for a, b in zip(ts, ts[1:]))

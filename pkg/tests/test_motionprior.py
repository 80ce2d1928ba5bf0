import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latent_motion.motionprior import (
    DriftPair,
    MotionError,
    delta_tau,
    drift_loss,
    drift_loss_torch,
    macro_drift,
    training_loss,
)
from latent_motion.tensorio import RngStream


def rhs(mu_hat, mu_star):
    # independent evaluation from norm ratio and angle
    r = math.hypot(*mu_hat) / math.hypot(*mu_star)
    cos = np.dot(mu_hat, mu_star) / (math.hypot(*mu_hat) * math.hypot(*mu_star)) if r > 0 else 1.0
    theta = math.acos(max(-1.0, min(1.0, cos)))
    return (r - 1) ** 2 + 2 * r * (1 - math.cos(theta))


# -- delta_tau / macro_drift ---------------------------------------------

def test_delta_constant_clip():
    z = np.ones((5, 2, 3, 3))
    out = delta_tau(z, 2)
    assert len(out) == 3
    assert all(not d.any() for d in out)


def test_delta_linear_telescoping():
    A = RngStream(1).normal((2, 3, 3))
    z = np.stack([i * A for i in range(1, 8)])
    for tau in (1, 2, 3):
        for d in delta_tau(z, tau):
            np.testing.assert_allclose(d, tau * A, rtol=0, atol=1e-14)


@pytest.mark.parametrize("tau", [0, 5])
def test_delta_lag_range(tau):
    with pytest.raises(MotionError):
        delta_tau(np.zeros((5, 1, 2, 2)), tau)


def test_macro_drift_broadcast():
    u = np.array([0.25, -1.5, 3.0])
    d = np.broadcast_to(u[:, None, None], (3, 4, 5))
    assert np.array_equal(macro_drift(d), u)


def test_macro_drift_zero_sum_channel():
    d = np.zeros((2, 2, 2))
    d[0] = [[1, -1], [-1, 1]]
    d[1] = 7.0
    assert macro_drift(d)[0] == 0.0


def test_macro_drift_brute_force():
    d = RngStream(2).normal((4, 5, 6))
    expect = []
    for c in range(4):
        acc = 0.0
        for h in range(5):
            for w in range(6):
                acc += d[c, h, w]
        expect.append(acc / 30)
    assert np.max(np.abs(macro_drift(d) - np.array(expect))) < 1e-14


# -- drift_loss -----------------------------------------------------------

def test_identity_pairs_zero():
    rng = RngStream(3)
    pairs = [DriftPair(v, v.copy()) for v in (rng.normal(8) for _ in range(5))]
    loss, grads = drift_loss(pairs)
    assert loss <= 1e-12
    assert all(not g.any() for g in grads)


def test_opposite_pair_is_four():
    m = np.array([0.3, -0.4, 1.2])
    loss, _ = drift_loss([DriftPair(-m, m)], eps_stab=1e-300)
    assert loss == pytest.approx(4.0, rel=1e-12)
    assert rhs(-m, m) == pytest.approx(4.0, rel=1e-12)


def test_decomposition_1000_pairs():
    rng = RngStream(4)
    devs = []
    for _ in range(1000):
        a, b = rng.normal(8), rng.normal(8)
        loss, _ = drift_loss([DriftPair(a, b)], eps_stab=0.0)
        devs.append(abs(loss - rhs(a, b)))
    assert np.mean(devs) < 1e-9


vectors = arrays(np.float64, 4, elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(vectors, vectors)
def test_decomposition_property(a, b):
    assume(np.linalg.norm(b) >= 1e-3)
    loss, _ = drift_loss([DriftPair(a, b)], eps_stab=0.0)
    assert abs(loss - rhs(a, b)) < 1e-9 * max(1.0, loss)


@settings(max_examples=100, deadline=None)
@given(vectors, vectors, st.floats(1e-3, 1e3))
def test_scale_invariance(a, b, s):
    assume(np.linalg.norm(b) >= 1e-3)
    l1, _ = drift_loss([DriftPair(a, b)], eps_stab=0.0)
    l2, _ = drift_loss([DriftPair(s * a, s * b)], eps_stab=0.0)
    assert abs(l1 - l2) <= 1e-9 * max(1.0, l1)


def test_gradient_matches_finite_differences():
    rng = RngStream(5)
    pairs = [DriftPair(rng.normal(6), rng.normal(6)) for _ in range(4)]
    _, grads = drift_loss(pairs, 1e-8)
    h = 1e-6
    for k in range(len(pairs)):
        for j in range(6):
            def f(delta):
                moved = [DriftPair(p.mu_hat.copy(), p.mu_star) for p in pairs]
                moved[k].mu_hat[j] += delta
                return drift_loss(moved, 1e-8)[0]

            fd = (f(h) - f(-h)) / (2 * h)
            assert abs(fd - grads[k][j]) <= 1e-6 * max(abs(fd), 1e-8)


def test_torch_loss_matches_numpy():
    rng = RngStream(6)
    a, b = rng.normal((3, 5, 4)), rng.normal((3, 5, 4))
    pairs = [DriftPair(x, y) for x, y in zip(a.reshape(-1, 4), b.reshape(-1, 4))]
    ref, _ = drift_loss(pairs, 1e-8)
    got = drift_loss_torch(torch.from_numpy(a), torch.from_numpy(b), 1e-8)
    assert float(got) == pytest.approx(ref, rel=1e-13)


def test_denominator_is_stop_gradient():
    rng = RngStream(7)
    a = torch.tensor(rng.normal(4), requires_grad=True)
    b = torch.tensor(rng.normal(4), requires_grad=True)
    drift_loss_torch(a, b, 1e-8).backward()
    got = b.grad.numpy()
    an, bn = a.detach().numpy(), b.detach().numpy()
    denom = float(bn @ bn) + 1e-8

    def full(x):
        return float((an - x) @ (an - x)) / (float(x @ x) + 1e-8)

    def frozen(x):
        return float((an - x) @ (an - x)) / denom

    h = 1e-6
    fd_full, fd_frozen = np.zeros(4), np.zeros(4)
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        fd_full[j] = (full(bn + e) - full(bn - e)) / (2 * h)
        fd_frozen[j] = (frozen(bn + e) - frozen(bn - e)) / (2 * h)
    np.testing.assert_allclose(got, fd_frozen, rtol=1e-6)
    assert np.max(np.abs(got - fd_full)) > 1e-3 * np.max(np.abs(fd_full))


def test_quiet_clip_stays_finite():
    for scale in (1e-2, 1e-5, 1e-9, 0.0):
        m = scale * np.array([1.0, -2.0, 0.5])
        loss, grads = drift_loss([DriftPair(m.copy(), m)], 1e-8)
        assert loss == 0.0 and not grads[0].any()
        near = m + 1e-9
        loss, grads = drift_loss([DriftPair(near, m)], 1e-8)
        assert math.isfinite(loss) and np.all(np.isfinite(grads[0]))
        assert np.max(np.abs(grads[0])) <= 2 * 1e-9 / 1e-8 + 1e-12


def test_empty_pairs():
    with pytest.raises(MotionError):
        drift_loss([])


# -- training_loss --------------------------------------------------------

def test_training_loss_cases():
    assert training_loss(0.5, 2.0, 0.0, 0.3) == 0.5
    assert training_loss(0.5, 2.0, 0.4, 0.0) == 0.5
    assert training_loss(0.5, 2.0, 0.4, 0.3) == pytest.approx(0.74, abs=1e-15)


def test_training_loss_no_gradient_through_weight():
    d = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)
    r = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)
    w = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)
    training_loss(d, r, 0.4, w).backward()
    assert w.grad is None
    assert float(d.grad) == 1.0
    assert float(r.grad) == pytest.approx(0.12, abs=1e-15)

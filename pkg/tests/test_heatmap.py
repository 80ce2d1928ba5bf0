import numpy as np
import pytest
from helpers import randomize
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_motion.fieldnet import init_fieldnet
from latent_motion.heatmap import (
    drift_heatmap,
    emit_image,
    field_heatmap,
    localization,
    motion_region,
    read_pgm,
    select_frame,
    static_frame,
    to_pixels,
)
from latent_motion.motionprior import macro_drift
from latent_motion.scenegen import SceneConfig, blob_positions, render_scene
from latent_motion.tensorio import RngStream


def field_net(seed=0, zero=False, C=8):
    net = init_fieldnet(C=C, D_c=16, N=1, width=8, rng=RngStream(seed))
    return net if zero else randomize(net, RngStream(seed + 1))


def one_blob(pos=(5.0, 4.0), vel=(0.0, 1.5), radius=1.5, T=6, C=8, seed=0):
    mix = RngStream(seed).uniform(0.5, 1.0, (C, 1))
    cfg = SceneConfig(np.array([pos]), np.array([vel]), np.array([radius]), mix, T=T, C=C, H=16, W=16)
    return render_scene(cfg)


# -- select_frame ---------------------------------------------------------

def test_static_clip_selects_first():
    z = np.stack([RngStream(1).normal((3, 4, 4))] * 6)
    t, b = select_frame(z, 2)
    assert t == 1 and not b.any()


def test_single_moving_pair():
    z = np.zeros((6, 2, 3, 3))
    z[4] = 1.0  # only the pair (3, 5) changes, 1-based
    t, _ = select_frame(z, 2)
    assert t == 3


def test_select_frame_brute_force():
    clip = one_blob(pos=(2.0, 3.0), vel=(0.8, 1.1), radius=2.5)
    z = clip.z
    best, best_t = -1.0, None
    for t in range(1, z.shape[0] - 2 + 1):
        n = np.linalg.norm(macro_drift(z[t + 1] - z[t - 1]))
        if n > best:
            best, best_t = n, t
    assert select_frame(clip, 2)[0] == best_t


def test_select_frame_rejects_short_clip():
    with pytest.raises(ValueError):
        select_frame(np.zeros((2, 1, 2, 2)), 2)


# -- drift heatmap --------------------------------------------------------

def test_drift_heatmap_broadcast_delta():
    b = np.array([0.3, -0.4, 1.2])
    z = np.zeros((4, 3, 5, 5))
    z[2:] = b[:, None, None]
    res = drift_heatmap(z, 2)
    n = np.linalg.norm(b)
    assert res.t_star == 1
    np.testing.assert_allclose(res.R, n * n / (n + 1e-8), rtol=1e-14)


def test_drift_heatmap_orthogonal_cell():
    z = np.zeros((3, 2, 2, 2))
    z[2, 0] = 1.0
    z[2, 0, 0, 0] = 0.0
    z[2, 1, 0, 0] = 5.0  # channel 1 averages to zero, so b lies along channel 0
    z[2, 1, 0, 1] = -5.0
    res = drift_heatmap(z, 2)
    assert res.R[0, 0] == 0.0
    assert np.all(res.R >= 0)


def seg_dist(p, a, b):
    d = b - a
    u = np.clip(np.dot(p - a, d) / np.dot(d, d), 0.0, 1.0)
    return np.linalg.norm(p - (a + u * d))


def test_drift_heatmap_peak_on_blob_path():
    clip = one_blob()
    res = drift_heatmap(clip, 2)
    peak = np.array(np.unravel_index(np.argmax(res.R), res.R.shape), dtype=float)
    a = blob_positions(clip.scene, res.t_star)[0]
    b = blob_positions(clip.scene, res.t_star + 2)[0]
    assert seg_dist(peak, a, b) <= 2.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_drift_heatmap_homogeneous(s, seed):
    z = RngStream(seed).normal((5, 3, 4, 4))
    r1 = drift_heatmap(z, 2, eps_hm=0.0).R
    r2 = drift_heatmap(s * z, 2, eps_hm=0.0).R
    np.testing.assert_allclose(r2, s * r1, rtol=1e-12, atol=1e-12 * s * r1.max())


@settings(max_examples=30, deadline=None)
@given(st.floats(-50.0, 50.0), st.integers(0, 1000))
def test_uniform_offset_changes_nothing(k, seed):
    clip = one_blob(pos=(4.0 + seed % 7, 5.0), vel=(0.5, 0.9))
    z = clip.z
    zk = z + np.float64(k)
    assert select_frame(zk, 2)[0] == select_frame(z, 2)[0]
    np.testing.assert_allclose(drift_heatmap(zk, 2).R, drift_heatmap(z, 2).R, rtol=1e-9, atol=1e-9)


# -- field heatmap --------------------------------------------------------

def test_field_heatmap_static_clip_exact_zero():
    frame = RngStream(2).normal((8, 16, 16))
    z = np.stack([frame] * 9)
    res = field_heatmap(z, field_net(3), RngStream(4).normal(16))
    assert not res.R.any()


def test_field_heatmap_static_copies_null():
    z = one_blob().z
    zs = np.stack([static_frame(z)] * z.shape[0])
    assert not field_heatmap(zs, field_net(5), np.ones(16)).R.any()


def test_field_heatmap_zero_init():
    assert not field_heatmap(one_blob().z, field_net(zero=True), np.ones(16)).R.any()


def test_field_heatmap_random_net_nonnegative():
    res = field_heatmap(one_blob().z, field_net(6), np.ones(16))
    assert res.R.shape == (16, 16) and np.all(res.R >= 0) and res.R.any()


# -- regions and images ---------------------------------------------------

def test_motion_region_covers_path():
    clip = one_blob()
    mask = motion_region(clip.scene, 1, 2)
    for f in (1.0, 2.0, 3.0):
        h, w = np.round(blob_positions(clip.scene, f)[0]).astype(int)
        assert mask[h, w]
    assert not mask[15, 15]


def test_localization_means():
    R = np.arange(4.0).reshape(2, 2)
    mask = np.array([[False, True], [True, False]])
    assert localization(R, mask) == (1.5, 1.5)
    assert localization(R, np.ones((2, 2), bool)) == (1.5, 0.0)


def test_constant_field_all_zero_image():
    assert not to_pixels(np.full((3, 4), 7.5)).any()


def test_min_max_pixels():
    assert to_pixels(np.array([[0.0, 1.0], [1.0, 0.0]])).tolist() == [[0, 255], [255, 0]]


def test_emit_round_trip(tmp_path):
    R = RngStream(7).uniform(0, 3, (5, 7))
    emit_image(R, tmp_path / "r.pgm")
    raw = (tmp_path / "r.pgm").read_bytes()
    assert raw.startswith(b"P5\n7 5\n255\n")
    px = read_pgm(tmp_path / "r.pgm")
    assert px.shape == R.shape
    assert np.array_equal(px, to_pixels(R))


def test_emit_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError):
        emit_image(np.array([[0.0, np.nan]]), tmp_path / "x.pgm")

"""Self-contained invariant suite run by ``latent-motion check``.

Each check returns ``(ok, detail)``; ``run_checks`` collects them in order.
Optional ``scan`` directories are walked for LMT1 files, each of which must
decode and re-encode to the identical bytes.
"""

from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from .fieldnet import FieldBatch, batch_loss, fieldnet_forward, fieldnet_grads, fieldnet_vjp_input, init_fieldnet
from .heatmap import drift_heatmap, field_heatmap
from .motionprior import DriftPair, decomposition, drift_loss
from .sampler import gate_active, gate_start, guidance_gradient, guide_loss
from .scenegen import SceneConfig, blob_positions, load_dataset, make_dataset, render_frame, save_dataset
from .schedule import build_schedule, forward_diffuse, velocity_target, xhat0
from .tensorio import RngStream, decode_tensor, encode_tensor, read_tensor, write_tensor

FD_STEP = 1e-5
FD_REL = 1e-5


def _randomized_field(seed: int, C=3, D_c=4):
    net = init_fieldnet(C=C, D_c=D_c, N=1, width=8, rng=RngStream(seed))
    rng = RngStream(seed, 1)
    with torch.no_grad():
        for name, p in net.named_parameters():
            fan_in = p[0].numel() if p.ndim > 1 else 1
            p.copy_(torch.from_numpy(0.3 * rng.substream(name).normal(tuple(p.shape)) / math.sqrt(fan_in)))
    return net


def _fd_worst(f, x, grad, rng, probes=20):
    worst = 0.0
    for _ in range(probes):
        d = rng.normal(x.shape)
        fd = (f(x + FD_STEP * d) - f(x - FD_STEP * d)) / (2 * FD_STEP)
        an = float(np.sum(grad * d))
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-10))
    return worst


def check_lmt_round_trip():
    t = RngStream(1).normal((3, 4, 5))
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "x.lmt"
        write_tensor(t, p)
        back = read_tensor(p)
        size = p.stat().st_size
    ok = back.tobytes() == t.tobytes() and size == 4 + 4 + 1 + 8 * 3 + 8 * 60
    return ok, f"{size} bytes"


def check_decomposition():
    rng = RngStream(2)
    worst = 0.0
    for _ in range(1000):
        a, b = rng.normal(8), rng.normal(8)
        loss, _ = drift_loss([DriftPair(a, b)], eps_stab=0.0)
        worst = max(worst, abs(loss - decomposition(a, b)))
    return worst < 1e-9, f"max deviation {worst:.2e}"


def check_drift_gradient():
    rng = RngStream(3)
    pairs = [DriftPair(rng.normal(6), rng.normal(6)) for _ in range(3)]
    x = np.stack([p.mu_hat for p in pairs])
    _, grads = drift_loss(pairs)

    def f(m):
        return drift_loss([DriftPair(mh, p.mu_star) for mh, p in zip(m, pairs)])[0]

    worst = _fd_worst(f, x, np.stack(grads), rng)
    return worst < FD_REL, f"max rel err {worst:.2e}"


def check_fieldnet_gradient():
    net = _randomized_field(4)
    rng = RngStream(5)
    batch = FieldBatch(rng.normal((2, 3, 5, 5)), rng.normal((2, 3, 5, 5)), rng.normal((2, 4)), np.array([False, True]))
    grads = fieldnet_grads(net, batch)
    params = dict(net.named_parameters())
    worst = 0.0
    for name, p in params.items():
        d = rng.normal(tuple(p.shape))
        vals = []
        with torch.no_grad():
            for sign in (1.0, -1.0):
                p.add_(torch.from_numpy(sign * FD_STEP * d))
                vals.append(float(batch_loss(net, batch)))
                p.sub_(torch.from_numpy(sign * FD_STEP * d))
        fd = (vals[0] - vals[1]) / (2 * FD_STEP)
        an = float(np.sum(grads[name] * d))
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-10))
    return worst < FD_REL, f"{len(params)} probes, max rel err {worst:.2e}"


def check_fieldnet_vjp():
    net = _randomized_field(6)
    rng = RngStream(7)
    x, c, u = rng.normal((3, 5, 5)), rng.normal(4), rng.normal((3, 5, 5))
    g = fieldnet_vjp_input(net, x, c, u)
    worst = _fd_worst(lambda y: float(np.sum(u * fieldnet_forward(net, y, c))), x, g, rng)
    return worst < FD_REL, f"max rel err {worst:.2e}"


def check_guidance_gradient():
    sched = build_schedule()
    net = _randomized_field(8)
    rng = RngStream(9)
    z, out, c, t = rng.normal((4, 3, 5, 5)), rng.normal((4, 3, 5, 5)), rng.normal(4), 100
    g = guidance_gradient(out, z, t, sched, net, c)
    worst = _fd_worst(lambda e: guide_loss(xhat0(e, z, t, sched), net, c), out, g, rng)
    return worst < FD_REL, f"max rel err {worst:.2e}"


def check_gate():
    ok = gate_start(50, 0.8) == 10 and gate_start(50, 0.0) == 50 and gate_start(50, 1.0) == 0
    for S in (1, 7, 50, 128):
        for rho in (0.0, 0.25, 0.5, 0.8, 1.0):
            bound = (1 - rho) * S
            ok &= all(gate_active(s, S, rho) == (s >= bound - 1e-9) for s in range(S))
    return ok, "S=50, rho=0.8 starts at step 10"


def check_schedule_round_trip():
    rng = RngStream(10)
    z0, eps = rng.normal((2, 3, 4)), rng.normal((2, 3, 4))
    worst = 0.0
    for kind in ("linear-beta", "cosine"):
        for param in ("epsilon", "v"):
            sched = build_schedule(kind, 1000, param)
            for t in (1, 250, 600):
                z_t = forward_diffuse(z0, t, eps, sched)
                out = eps if param == "epsilon" else velocity_target(z0, eps, t, sched)
                worst = max(worst, float(np.max(np.abs(xhat0(out, z_t, t, sched) - z0))))
    return worst < 1e-8, f"max error {worst:.2e}"


def check_scene_render():
    cfg = SceneConfig(np.array([[3.0, 12.5]]), np.array([[1.7, -2.2]]), np.array([2.0]), np.ones((2, 1)), T=12, C=2)
    worst = 0.0
    for i in range(1, cfg.T + 1):
        pos = blob_positions(cfg, i)
        worst = max(worst, float(np.max(-pos)), float(np.max(pos - (cfg.H - 1))))
        h, w = pos[0]
        hh, ww = np.meshgrid(np.arange(cfg.H), np.arange(cfg.W), indexing="ij")
        ref = np.exp(-((hh - h) ** 2 + (ww - w) ** 2) / 8.0)
        if np.max(np.abs(render_frame(cfg, i)[0] - ref)) > 1e-12:
            return False, f"frame {i} disagrees with the Gaussian oracle"
    return worst <= 0.0, "positions stay inside the grid"


def check_dataset_round_trip():
    clips = make_dataset(3, None, RngStream(11))
    with tempfile.TemporaryDirectory() as d:
        save_dataset(clips, d)
        back = load_dataset(d)
    ok = all(a.z.tobytes() == b.z.tobytes() and np.array_equal(a.c, b.c) for a, b in zip(clips, back))
    return ok, f"{len(back)} clips"


def check_zero_init_field():
    net = init_fieldnet(rng=RngStream(12))
    z = make_dataset(1, None, RngStream(13))[0]
    out = fieldnet_forward(net, z.z[0], z.c)
    R = field_heatmap(z.z, net, z.c).R
    return not out.any() and not R.any(), "zero output and zero field heatmap"


def check_static_heatmaps():
    frame = RngStream(14).normal((8, 16, 16))
    z = np.stack([frame] * 9)
    R_d = drift_heatmap(z).R
    R_f = field_heatmap(z, _randomized_field(15, C=8, D_c=16), np.ones(16)).R
    return not R_d.any() and not R_f.any(), "static clip gives R = 0"


CHECKS = [
    ("lmt1 round trip", check_lmt_round_trip),
    ("drift loss decomposition", check_decomposition),
    ("drift loss gradient", check_drift_gradient),
    ("field predictor parameter gradient", check_fieldnet_gradient),
    ("field predictor input vjp", check_fieldnet_vjp),
    ("guidance gradient", check_guidance_gradient),
    ("gate algebra", check_gate),
    ("schedule projection round trip", check_schedule_round_trip),
    ("scene rendering and reflection", check_scene_render),
    ("dataset round trip", check_dataset_round_trip),
    ("zero-init field predictor", check_zero_init_field),
    ("static-clip heatmaps", check_static_heatmaps),
]


def scan_lmt(root) -> list[tuple[str, bool, str]]:
    """Decode and re-encode every ``.lmt`` file under ``root``."""
    results = []
    for p in sorted(Path(root).rglob("*.lmt")):
        try:
            raw = p.read_bytes()
            ok = encode_tensor(decode_tensor(raw)) == raw
            detail = "ok" if ok else "re-encoding differs"
        except (ValueError, OSError) as exc:
            ok, detail = False, str(exc)
        results.append((f"lmt1 file {p}", ok, detail))
    if not results:
        results.append((f"lmt1 scan {root}", False, "no .lmt files found"))
    return results


def run_checks(scan=(), only=None) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        if only and name not in only:
            continue
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), f"{detail} ({time.perf_counter() - start:.2f}s)"))
    for root in scan:
        results.extend(scan_lmt(root))
    return results

"""Toy video diffusion backbone trained with denoising plus the drift loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .fieldnet import _fill
from .motionprior import EPS_STAB, drift_loss_torch, training_loss
from .schedule import NoiseSchedule, schedule_weight
from .tensorio import RngStream, read_tensor_dir, write_tensor_dir

DTYPE = torch.float64


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    args = t.to(DTYPE)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class SpatialBlock(nn.Module):
    def __init__(self, width: int, emb: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.film = nn.Linear(emb, 2 * width)

    def forward(self, h, e):
        y = self.conv2(F.silu(self.conv1(F.silu(h))))
        scale, shift = self.film(e).chunk(2, dim=-1)
        return h + (1 + scale[:, :, None, None]) * y + shift[:, :, None, None]


class TemporalMix(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv = nn.Conv3d(width, width, (3, 1, 1), padding=(1, 0, 0))

    def forward(self, h, B: int, T: int):
        _, w, H, W = h.shape
        x = h.reshape(B, T, w, H, W).transpose(1, 2)
        y = self.conv(F.silu(x)).transpose(1, 2).reshape(B * T, w, H, W)
        return h + y


class Denoiser(nn.Module):
    """Spatial residual blocks interleaved with temporal mixing along T.

    Timestep and conditioning embeddings are summed and injected by FiLM.
    ``null_mask`` rows use the learned unconditional embedding.
    """

    def __init__(self, C: int = 8, D_c: int = 16, width: int = 64, n_spatial: int = 3, n_temporal: int = 2,
                 t_dim: int = 32, parameterization: str = "epsilon"):
        super().__init__()
        self.C, self.D_c, self.width = C, D_c, width
        self.n_spatial, self.n_temporal, self.t_dim = n_spatial, n_temporal, t_dim
        self.parameterization = parameterization
        self.in_proj = nn.Conv2d(C, width, 3, padding=1)
        self.t_mlp = nn.Sequential(nn.Linear(t_dim, width), nn.SiLU(), nn.Linear(width, width))
        self.cond_proj = nn.Linear(D_c, width)
        self.uncond_embedding = nn.Parameter(torch.zeros(width))
        self.spatial = nn.ModuleList(SpatialBlock(width, width) for _ in range(n_spatial))
        self.temporal = nn.ModuleList(TemporalMix(width) for _ in range(n_temporal))
        self.out_proj = nn.Conv2d(width, C, 3, padding=1)
        self.to(DTYPE)

    def arch(self) -> dict:
        return {"C": self.C, "D_c": self.D_c, "width": self.width, "n_spatial": self.n_spatial,
                "n_temporal": self.n_temporal, "t_dim": self.t_dim, "parameterization": self.parameterization}

    def embed(self, t, cond, null_mask, B: int):
        e = self.t_mlp(timestep_embedding(t, self.t_dim))
        uncond = self.uncond_embedding.expand(B, self.width)
        if cond is None:
            ce = uncond
        else:
            if cond.ndim == 1:
                cond = cond.expand(B, self.D_c)
            ce = self.cond_proj(cond)
            if null_mask is not None:
                ce = torch.where(null_mask[:, None], uncond, ce)
        return e + ce

    def forward(self, z_t, t, cond=None, null_mask=None):
        """z_t: (B, T, C, H, W); t: (B,) timesteps."""
        if z_t.ndim != 5 or z_t.shape[2] != self.C:
            raise ValueError(f"expected (B, T, {self.C}, H, W), got {tuple(z_t.shape)}")
        B, T, C, H, W = z_t.shape
        e = self.embed(t, cond, null_mask, B)
        e = e.repeat_interleave(T, dim=0)
        h = self.in_proj(z_t.reshape(B * T, C, H, W))
        for k, block in enumerate(self.spatial):
            h = block(h, e)
            if k < self.n_temporal:
                h = self.temporal[k](h, B, T)
        return self.out_proj(F.silu(h)).reshape(B, T, C, H, W)


def init_denoiser(C: int = 8, D_c: int = 16, width: int = 64, n_spatial: int = 3, n_temporal: int = 2,
                  t_dim: int = 32, parameterization: str = "epsilon", rng: RngStream | None = None) -> Denoiser:
    rng = rng or RngStream(0)
    net = Denoiser(C, D_c, width, n_spatial, n_temporal, t_dim, parameterization)
    zero = ("out_proj.", ".film.", "uncond_embedding")
    for name, p in net.named_parameters():
        if any(z in name for z in zero) or name.endswith(".bias"):
            _fill(p, np.zeros(p.numel()))
            continue
        _fill(p, rng.substream(name).normal(p.numel()) / math.sqrt(p[0].numel()))
    return net


def _t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def denoiser_forward(net: Denoiser, z_t, t: int, c=None) -> np.ndarray:
    """Prediction (epsilon or v) for one clip (T, C, H, W) at integer timestep ``t``."""
    x = _t(z_t)
    if x.ndim != 4:
        raise ValueError(f"expected (T, C, H, W), got {tuple(x.shape)}")
    cond = None if c is None else _t(c)
    with torch.no_grad():
        y = net(x[None], torch.tensor([float(t)], dtype=DTYPE), cond)
    return y[0].numpy()


def _sched_tables(sched: NoiseSchedule, ts: np.ndarray):
    a = torch.as_tensor(sched.alpha_bar[ts - 1].copy())
    s = torch.as_tensor(sched.sigma[ts - 1].copy())
    return a.sqrt()[:, None, None, None, None], s[:, None, None, None, None]


def denoise_terms(net, z0: torch.Tensor, cond, null_mask, ts: np.ndarray, eps: torch.Tensor, sched: NoiseSchedule):
    """Per-batch denoising MSE and the x0 projections; differentiable in ``net``."""
    sa, s = _sched_tables(sched, ts)
    z_t = sa * z0 + s * eps
    pred = net(z_t, torch.as_tensor(ts, dtype=DTYPE), cond, null_mask)
    if sched.parameterization == "epsilon":
        target = eps
        x0 = (z_t - s * pred) / sa
    else:
        target = sa * eps - s * z0
        x0 = sa * z_t - s * pred
    return ((pred - target) ** 2).mean(), x0


@dataclass
class DenoiseBatch:
    z0: np.ndarray  # (B, T, C, H, W)
    cond: np.ndarray | None
    null_mask: np.ndarray | None = None

    def tensors(self):
        cond = None if self.cond is None else _t(self.cond)
        mask = None if self.null_mask is None else torch.as_tensor(np.asarray(self.null_mask, dtype=bool))
        return _t(self.z0), cond, mask


def draw_noise(shape, sched: NoiseSchedule, rng: RngStream):
    """One timestep per clip (shared by all its frames) and unit-normal noise."""
    g = rng.generator
    ts = g.integers(1, sched.S_train + 1, shape[0])
    eps = g.standard_normal(shape)
    return ts, eps


def denoise_loss(net, batch: DenoiseBatch, sched: NoiseSchedule, rng: RngStream):
    """Mean squared prediction error and the per-clip x0 estimates."""
    z0, cond, mask = batch.tensors()
    ts, eps = draw_noise(tuple(z0.shape), sched, rng)
    with torch.no_grad():
        loss, x0 = denoise_terms(net, z0, cond, mask, ts, torch.as_tensor(eps), sched)
    return float(loss), list(x0.numpy())


def pair_drifts(x: torch.Tensor, tau: int) -> torch.Tensor:
    """(B, T - tau, C) spatial-mean drifts for every frame pair."""
    return (x[:, tau:] - x[:, :-tau]).mean(dim=(-2, -1))


@dataclass
class DenoiserHyper:
    lambda_drift: float = 0.4
    tau: int = 2
    eps_stab: float = EPS_STAB
    p_uncond: float = 0.1
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 8
    clip_norm: float | None = None  # clip the global gradient norm when set


def train_denoiser(dataset, sched: NoiseSchedule, hyper: DenoiserHyper | None = None, rng: RngStream | None = None,
                   arch: dict | None = None, net: Denoiser | None = None, metrics: list | None = None) -> Denoiser:
    """Optimize L_denoise + lambda_drift * w * L_drift.

    ``metrics`` receives ``(step, L_denoise, L_drift, w, L_train)`` tuples.
    """
    hyper = hyper or DenoiserHyper()
    rng = rng or RngStream(0)
    T = dataset[0].z.shape[0]
    if T <= hyper.tau:
        raise ValueError(f"clip length {T} must exceed lag {hyper.tau}")
    if net is None:
        arch = dict(arch or {})
        arch.setdefault("C", dataset[0].z.shape[1])
        arch.setdefault("D_c", len(dataset[0].c))
        arch.setdefault("parameterization", sched.parameterization)
        net = init_denoiser(rng=rng.substream("init"), **arch)
    if net.parameterization != sched.parameterization:
        raise ValueError("denoiser and schedule parameterizations differ")
    if hyper.steps <= 0:
        return net
    zs = np.stack([clip.z for clip in dataset])
    cs = np.stack([clip.c for clip in dataset])
    opt = torch.optim.Adam(net.parameters(), lr=hyper.lr)
    g = rng.substream("batches").generator
    noise_rng = rng.substream("noise")
    for step in range(1, hyper.steps + 1):
        idx = g.integers(0, len(dataset), hyper.batch)
        mask = g.random(hyper.batch) < hyper.p_uncond
        z0 = torch.as_tensor(zs[idx])
        ts, eps = draw_noise(tuple(z0.shape), sched, noise_rng)
        opt.zero_grad(set_to_none=True)
        l_den, x0 = denoise_terms(net, z0, torch.as_tensor(cs[idx]), torch.as_tensor(mask), ts,
                                  torch.as_tensor(eps), sched)
        l_drift = drift_loss_torch(pair_drifts(x0, hyper.tau), pair_drifts(z0, hyper.tau), hyper.eps_stab)
        w = schedule_weight(ts, sched)
        loss = training_loss(l_den, l_drift, hyper.lambda_drift, w)
        loss.backward()
        if hyper.clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(net.parameters(), hyper.clip_norm)
        opt.step()
        if metrics is not None:
            metrics.append((step, float(l_den.detach()), float(l_drift.detach()), w, float(loss.detach())))
    return net


def heldout_denoiser_metrics(net: Denoiser, dataset, sched: NoiseSchedule, rng: RngStream, tau: int = 2,
                             eps_stab: float = EPS_STAB, repeats: int = 4, max_t: int | None = None) -> dict:
    """Held-out denoising MSE and drift error (conditional branch).

    Draws come from ``rng`` so twin models can be scored on identical noise.
    ``max_t`` restricts timesteps to ``1..max_t``.
    """
    zs = torch.as_tensor(np.stack([clip.z for clip in dataset]))
    cs = torch.as_tensor(np.stack([clip.c for clip in dataset]))
    g = rng.generator
    dens, drifts = [], []
    hi = max_t or sched.S_train
    for _ in range(repeats):
        ts = g.integers(1, hi + 1, len(dataset))
        eps = torch.as_tensor(g.standard_normal(tuple(zs.shape)))
        with torch.no_grad():
            l_den, x0 = denoise_terms(net, zs, cs, None, ts, eps, sched)
            l_drift = drift_loss_torch(pair_drifts(x0, tau), pair_drifts(zs, tau), eps_stab)
        dens.append(float(l_den))
        drifts.append(float(l_drift))
    return {"denoise": float(np.mean(dens)), "drift": float(np.mean(drifts))}


def save_denoiser(net: Denoiser, path, extra: dict | None = None) -> None:
    tensors = {name: p.detach().numpy() for name, p in net.state_dict().items()}
    write_tensor_dir(tensors, path, {"model": "denoiser", "arch": net.arch(), **(extra or {})})


def load_denoiser(path) -> tuple[Denoiser, dict]:
    tensors, meta = read_tensor_dir(path)
    if meta.get("model") != "denoiser":
        raise ValueError(f"{path}: not a denoiser checkpoint")
    net = Denoiser(**meta["arch"])
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return net, meta

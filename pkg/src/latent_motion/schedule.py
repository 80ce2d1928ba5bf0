"""Noise schedules, the forward process and the clean-latent projection.

Timesteps are 1-based: ``t`` in ``1..S_train`` reads ``alpha_bar[t - 1]``.
The sampler also uses ``t = 0`` to mean the clean end point (alpha_bar = 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ILL_CONDITIONED = 1e-12


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    S_train: int
    alpha_bar: np.ndarray
    sigma: np.ndarray
    parameterization: str = "epsilon"

    def abar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bar[t - 1])

    def sig(self, t: int) -> float:
        if t == 0:
            return 0.0
        self._check(t)
        return float(self.sigma[t - 1])

    def _check(self, t):
        if not 1 <= t <= self.S_train:
            raise ScheduleError(f"timestep {t} outside 1..{self.S_train}")

    def to_config(self) -> dict:
        return {"kind": self.kind, "S_train": self.S_train, "parameterization": self.parameterization}


def build_schedule(kind: str = "linear-beta", S_train: int = 1000, parameterization: str = "epsilon") -> NoiseSchedule:
    if S_train < 2:
        raise ScheduleError("S_train must be >= 2")
    if parameterization not in ("epsilon", "v"):
        raise ScheduleError(f"unknown parameterization {parameterization!r}")
    if kind == "linear-beta":
        betas = np.linspace(1e-4, 2e-2, S_train)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(S_train + 1) / S_train
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.cumprod(1.0 - betas)
    sigma = np.sqrt(1.0 - alpha_bar)
    alpha_bar.setflags(write=False)
    sigma.setflags(write=False)
    return NoiseSchedule(kind, S_train, alpha_bar, sigma, parameterization)


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    return build_schedule(cfg["kind"], int(cfg["S_train"]), cfg.get("parameterization", "epsilon"))


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ScheduleError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def forward_diffuse(z0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    _same_shape(z0, eps)
    sched._check(t)
    return math.sqrt(sched.abar(t)) * np.asarray(z0) + sched.sig(t) * np.asarray(eps)


def velocity_target(z0, eps, t: int, sched: NoiseSchedule) -> np.ndarray:
    """v = sqrt(abar) * eps - sigma * z0."""
    return math.sqrt(sched.abar(t)) * np.asarray(eps) - sched.sig(t) * np.asarray(z0)


def xhat0(model_out, z_t, t: int, sched: NoiseSchedule):
    """Clean-latent estimate from the model output.

    Works on numpy arrays and torch tensors alike.
    """
    _same_shape(model_out, z_t)
    a, s = sched.abar(t), sched.sig(t)
    if sched.parameterization == "epsilon":
        if a < ILL_CONDITIONED:
            raise ScheduleError(f"projection ill-conditioned at t={t} (alpha_bar={a:.3g})")
        return (z_t - s * model_out) / math.sqrt(a)
    return math.sqrt(a) * z_t - s * model_out


def eps_from_output(model_out, z_t, t: int, sched: NoiseSchedule):
    """Noise estimate implied by the model output."""
    if sched.parameterization == "epsilon":
        return model_out
    return sched.sig(t) * z_t + math.sqrt(sched.abar(t)) * model_out


def xhat0_output_scale(t: int, sched: NoiseSchedule) -> float:
    """d xhat0 / d model_out, a per-element constant."""
    a, s = sched.abar(t), sched.sig(t)
    if sched.parameterization == "epsilon":
        if a < ILL_CONDITIONED:
            raise ScheduleError(f"projection ill-conditioned at t={t} (alpha_bar={a:.3g})")
        return -s / math.sqrt(a)
    return -s


def xhat0_latent_scale(t: int, sched: NoiseSchedule) -> float:
    """d xhat0 / d z_t with the model output held fixed."""
    a = sched.abar(t)
    if sched.parameterization == "epsilon":
        if a < ILL_CONDITIONED:
            raise ScheduleError(f"projection ill-conditioned at t={t} (alpha_bar={a:.3g})")
        return 1.0 / math.sqrt(a)
    return math.sqrt(a)


def schedule_weight(ts, sched: NoiseSchedule) -> float:
    """Batch mean of alpha_bar over the sampled timesteps (a constant, no gradient)."""
    ts = list(ts)
    if not ts:
        raise ScheduleError("empty timestep batch")
    return float(np.mean([sched.abar(int(t)) for t in ts]))


def sampling_timesteps(S: int, sched: NoiseSchedule) -> list[int]:
    """S evenly spaced training timesteps, from S_train down towards 1."""
    if not 1 <= S <= sched.S_train:
        raise ScheduleError(f"sampling steps must be in 1..{sched.S_train}")
    ts = np.round(np.linspace(sched.S_train, 1, S)).astype(int)
    return [int(t) for t in ts]

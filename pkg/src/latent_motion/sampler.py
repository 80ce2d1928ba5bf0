"""Deterministic sampling with classifier-free guidance and motion prior guidance.

At each step the conditional and unconditional predictions are mixed, then
(inside the active window) the mixed prediction is nudged down the gradient
of the motion-consistency loss evaluated on its clean-latent projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import denoiser_forward
from .fieldnet import fieldnet_forward, fieldnet_vjp_input
from .schedule import (
    NoiseSchedule,
    eps_from_output,
    sampling_timesteps,
    xhat0,
    xhat0_latent_scale,
    xhat0_output_scale,
)
from .tensorio import RngStream, write_tensor

MODES = ("noise", "latent-edit", "off")


class SamplerError(ValueError):
    pass


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 1.5
    lambda_guide: float = 25.0
    rho: float = 0.8
    tau: int = 2
    mode: str = "noise"
    T: int = 9
    H: int = 16
    W: int = 16

    def validate(self) -> None:
        if self.steps < 1:
            raise SamplerError("steps must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise SamplerError("rho must lie in [0, 1]")
        if self.mode not in MODES:
            raise SamplerError(f"mode must be one of {MODES}")
        if self.T <= self.tau:
            raise SamplerError(f"T={self.T} must exceed tau={self.tau}")


def gate_start(S: int, rho: float) -> int:
    """First 0-based step of the active window, ceil((1 - rho) * S).

    A 1e-9 slack absorbs float error so exact integer boundaries count as
    active (rho = 0.8, S = 50 gives 10, not 11).
    """
    return max(0, math.ceil((1.0 - rho) * S - 1e-9))


def gate_active(s: int, S: int, rho: float) -> bool:
    return s >= gate_start(S, rho)


def cfg_mix(eps_cond, eps_uncond, g: float) -> np.ndarray:
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise SamplerError(f"shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    # same as u + g (c - u), but exact at g = 0 and g = 1
    return (1.0 - g) * eps_uncond + g * eps_cond


def _check_clip(x0, tau):
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 4:
        raise SamplerError(f"expected (T, C, H, W), got {x0.shape}")
    if x0.shape[0] <= tau:
        raise SamplerError(f"clip length {x0.shape[0]} must exceed lag {tau}")
    return x0


def guide_loss(x0_clip, net, c, tau: int = 2) -> float:
    """Mean over frame pairs of |x0[i] + f(x0[i], c) - x0[i + tau]|^2."""
    x0 = _check_clip(x0_clip, tau)
    n = x0.shape[0] - tau
    r = x0[:n] + fieldnet_forward(net, x0[:n], c) - x0[tau:]
    return float((r**2).sum() / n)


def guide_loss_and_grad(x0_clip, net, c, tau: int = 2):
    """Value of the guide loss and its gradient w.r.t. the x0 clip."""
    x0 = _check_clip(x0_clip, tau)
    n = x0.shape[0] - tau
    src = x0[:n]
    r = src + fieldnet_forward(net, src, c) - x0[tau:]
    loss = float((r**2).sum() / n)
    k = 2.0 / n
    grad = np.zeros_like(x0)
    grad[:n] += k * (r + fieldnet_vjp_input(net, src, c, r))
    grad[tau:] -= k * r
    return loss, grad


def guidance_gradient(eps_hat, z_t, t: int, sched: NoiseSchedule, net, c, tau: int = 2) -> np.ndarray:
    """Gradient of the guide loss w.r.t. the (mixed) model output."""
    x0 = xhat0(np.asarray(eps_hat), np.asarray(z_t), t, sched)
    _, g = guide_loss_and_grad(x0, net, c, tau)
    return xhat0_output_scale(t, sched) * g


def latent_gradient(eps_hat, z_t, t: int, sched: NoiseSchedule, net, c, tau: int = 2) -> np.ndarray:
    """Gradient of the guide loss w.r.t. z_t with the model output held fixed."""
    x0 = xhat0(np.asarray(eps_hat), np.asarray(z_t), t, sched)
    _, g = guide_loss_and_grad(x0, net, c, tau)
    return xhat0_latent_scale(t, sched) * g


@dataclass
class StepRecord:
    s: int
    t: int
    z_t: np.ndarray
    eps_cfg: np.ndarray
    eps_guided: np.ndarray
    x0: np.ndarray
    l_guide: float | None
    gate: bool


@dataclass
class Trajectory:
    steps: list[StepRecord] = field(default_factory=list)
    z_out: np.ndarray | None = None
    l_guide_out: float | None = None  # guide loss of z_out itself

    def all_finite(self) -> bool:
        arrays = [self.z_out] + [a for r in self.steps for a in (r.z_t, r.eps_cfg, r.eps_guided, r.x0)]
        scalars = [v for v in [r.l_guide for r in self.steps] + [self.l_guide_out] if v is not None]
        return all(np.all(np.isfinite(a)) for a in arrays) and all(math.isfinite(v) for v in scalars)

    def final_l_guide(self) -> float | None:
        return self.steps[-1].l_guide if self.steps else None

    def gate_steps(self) -> list[int]:
        return [r.s for r in self.steps if r.gate]

    def equals(self, other: Trajectory) -> bool:
        """Bitwise equality of every recorded array and scalar."""
        if len(self.steps) != len(other.steps) or not np.array_equal(self.z_out, other.z_out):
            return False
        for a, b in zip(self.steps, other.steps):
            if (a.s, a.t, a.gate, a.l_guide) != (b.s, b.t, b.gate, b.l_guide):
                return False
            for name in ("z_t", "eps_cfg", "eps_guided", "x0"):
                if not np.array_equal(getattr(a, name), getattr(b, name)):
                    return False
        return True


def sample(denoiser, net, cfg: SamplerConfig, c, rng: RngStream, sched: NoiseSchedule) -> Trajectory:
    """Run one deterministic sampling trajectory.

    ``net`` may be None only when guidance is off; when present, the guide
    loss is recorded at every step as a diagnostic even if guidance is off.
    """
    cfg.validate()
    if net is None and cfg.mode != "off" and cfg.lambda_guide != 0:
        raise SamplerError("guidance requires a field predictor")
    ts = sampling_timesteps(cfg.steps, sched)
    start = gate_start(cfg.steps, cfg.rho)
    z = rng.normal((cfg.T, denoiser.C, cfg.H, cfg.W))
    traj = Trajectory()
    for s, t in enumerate(ts):
        t_prev = ts[s + 1] if s + 1 < len(ts) else 0
        out_c = denoiser_forward(denoiser, z, t, c)
        out_u = denoiser_forward(denoiser, z, t, None)
        out_cfg = cfg_mix(out_c, out_u, cfg.cfg_scale)
        active = s >= start and cfg.mode != "off" and cfg.lambda_guide != 0
        l_guide = None
        out = out_cfg
        if net is not None:
            x0 = xhat0(out_cfg, z, t, sched)
            l_guide, g = guide_loss_and_grad(x0, net, c, cfg.tau)
            if active and cfg.mode == "noise":
                out = out_cfg - cfg.lambda_guide * xhat0_output_scale(t, sched) * g
            elif active and cfg.mode == "latent-edit":
                z = z - cfg.lambda_guide * xhat0_latent_scale(t, sched) * g
        x0 = xhat0(out, z, t, sched)
        eps = eps_from_output(out, z, t, sched)
        z_prev = math.sqrt(sched.abar(t_prev)) * x0 + sched.sig(t_prev) * eps
        traj.steps.append(StepRecord(s, t, z, out_cfg, out, x0, l_guide, active))
        z = z_prev
    traj.z_out = z
    if net is not None:
        traj.l_guide_out = guide_loss(z, net, c, cfg.tau)
    return traj


def dump_trajectory(traj: Trajectory, path) -> None:
    """One LMT1 file per recorded field per step plus a text metrics record."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = ["step\tt\tgate\tl_guide"]
    for r in traj.steps:
        for name in ("z_t", "eps_cfg", "eps_guided", "x0"):
            write_tensor(getattr(r, name), path / f"step{r.s:03d}_{name}.lmt")
        lg = "nan" if r.l_guide is None else repr(r.l_guide)
        lines.append(f"{r.s}\t{r.t}\t{int(r.gate)}\t{lg}")
    write_tensor(traj.z_out, path / "z_out.lmt")
    (path / "steps.tsv").write_text("\n".join(lines) + "\n")

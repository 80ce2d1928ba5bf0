"""Latent change, macro drift and the scale-normalized drift loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

EPS_STAB = 1e-8


class MotionError(ValueError):
    pass


@dataclass
class DriftPair:
    mu_hat: np.ndarray
    mu_star: np.ndarray
    i: int = 1
    tau: int = 2


def delta_tau(z, tau: int) -> list[np.ndarray]:
    """Latent changes z[i + tau] - z[i]; entry k corresponds to 1-based frame k + 1."""
    z = z.z if hasattr(z, "z") else np.asarray(z)
    T = z.shape[0]
    if not 1 <= tau <= T - 1:
        raise MotionError(f"lag {tau} out of range for clip of length {T}")
    return [z[i + tau] - z[i] for i in range(T - tau)]


def macro_drift(delta) -> np.ndarray:
    """Per-channel spatial mean of a (C, H, W) change."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 3:
        raise MotionError(f"expected (C, H, W), got shape {delta.shape}")
    return delta.mean(axis=(1, 2))


def clip_drifts(z, tau: int) -> np.ndarray:
    """(T - tau, C) macro drifts for every frame pair of a clip."""
    return np.stack([macro_drift(d) for d in delta_tau(z, tau)])


def drift_loss(pairs: list[DriftPair], eps_stab: float = EPS_STAB, _raw: bool = False):
    """Mean of |mu_hat - mu_star|^2 / (|mu_star|^2 + eps_stab) over pairs.

    The denominator is a constant under differentiation. Returns
    ``(loss, grads)`` with one gradient vector per ``mu_hat``.
    ``_raw`` drops the normalization (ablation only).
    """
    if not pairs:
        raise MotionError("empty pair list")
    # eps_stab = 0 is allowed for exact identity checks on moving pairs
    if eps_stab < 0:
        raise MotionError("eps_stab must be non-negative")
    n = len(pairs)
    total = 0.0
    grads = []
    for p in pairs:
        d = np.asarray(p.mu_hat, dtype=np.float64) - np.asarray(p.mu_star, dtype=np.float64)
        denom = 1.0 if _raw else float(np.dot(p.mu_star, p.mu_star)) + eps_stab
        total += float(np.dot(d, d)) / denom
        grads.append(2.0 * d / (denom * n))
    return total / n, grads


def drift_loss_torch(mu_hat: torch.Tensor, mu_star: torch.Tensor, eps_stab: float = EPS_STAB, _raw: bool = False):
    """Batched drift loss on (..., C) tensors; the denominator carries no gradient."""
    num = ((mu_hat - mu_star) ** 2).sum(-1)
    if _raw:
        return num.mean()
    denom = (mu_star.detach() ** 2).sum(-1) + eps_stab
    return (num / denom).mean()


def decomposition(mu_hat, mu_star) -> float:
    """(r - 1)^2 + 2 r (1 - cos theta) for one pair."""
    a = np.linalg.norm(mu_hat)
    b = np.linalg.norm(mu_star)
    r = a / b
    cos = float(np.dot(mu_hat, mu_star)) / (a * b) if a > 0 else 1.0
    return (r - 1.0) ** 2 + 2.0 * r * (1.0 - cos)


def training_loss(denoise, drift, lambda_drift: float = 0.4, w: float = 1.0):
    """L_denoise + lambda_drift * w * L_drift, with ``w`` treated as a constant.

    When the drift coefficient is zero the drift term is dropped entirely, so
    gradients match pure denoising training bit for bit.
    """
    if isinstance(w, torch.Tensor):
        w = w.detach()
    coef = float(lambda_drift) * float(w)
    if coef == 0.0:
        return denoise
    return denoise + coef * drift

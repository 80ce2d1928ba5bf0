"""Drift and field heatmaps for a clip, plus 8-bit PGM output."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fieldnet import fieldnet_forward
from .motionprior import delta_tau, macro_drift
from .scenegen import SceneConfig, blob_positions

EPS_HM = 1e-8


@dataclass
class HeatmapResult:
    t_star: int  # 1-based frame index of the selected pair
    R: np.ndarray  # (H, W), non-negative
    kind: str
    b_norm: float = 0.0


def _clip(z):
    return np.asarray(z.z if hasattr(z, "z") else z, dtype=np.float64)


def select_frame(z, tau: int = 2):
    """Frame pair with the largest macro drift norm; ties go to the smallest index.

    Returns ``(t_star, b)`` with ``b`` the (T - tau, C) drift per pair.
    """
    z = _clip(z)
    if z.shape[0] <= tau:
        raise ValueError(f"clip length {z.shape[0]} must exceed lag {tau}")
    b = np.stack([macro_drift(d) for d in delta_tau(z, tau)])
    norms = np.linalg.norm(b, axis=1)
    # np.argmax returns the first maximum
    return int(np.argmax(norms)) + 1, b


def drift_heatmap(z, tau: int = 2, eps_hm: float = EPS_HM) -> HeatmapResult:
    """|<delta(:, h, w), b>| / (|b| + eps) at the selected pair."""
    z = _clip(z)
    t_star, b = select_frame(z, tau)
    bt = b[t_star - 1]
    delta = z[t_star - 1 + tau] - z[t_star - 1]
    norm = float(np.linalg.norm(bt))
    R = np.abs(np.einsum("chw,c->hw", delta, bt)) / (norm + eps_hm)
    return HeatmapResult(t_star, R, "drift", norm)


def static_frame(z) -> np.ndarray:
    """Temporal mean frame, written as z[0] + mean(z - z[0]) so static clips give z[0] exactly."""
    z = _clip(z)
    return z[0] + (z - z[0]).mean(axis=0)


def field_heatmap(z, net, c, tau: int = 2) -> HeatmapResult:
    """Per-cell norm of f(z[t*]) - f(z_static), z_static the temporal mean frame."""
    z = _clip(z)
    t_star, b = select_frame(z, tau)
    z_static = static_frame(z)
    # separate calls keep identical inputs bitwise identical on output
    moving = fieldnet_forward(net, z[t_star - 1], c)
    still = fieldnet_forward(net, z_static, c)
    R = np.sqrt(((moving - still) ** 2).sum(axis=0))
    return HeatmapResult(t_star, R, "field", float(np.linalg.norm(b[t_star - 1])))


def motion_region(cfg: SceneConfig, t_star: int, tau: int = 2, k: float = 2.0, substeps: int = 8) -> np.ndarray:
    """Cells within k radii of any blob centre on its path from t* to t* + tau."""
    hh, ww = np.meshgrid(np.arange(cfg.H), np.arange(cfg.W), indexing="ij")
    mask = np.zeros((cfg.H, cfg.W), dtype=bool)
    for f in np.linspace(t_star, t_star + tau, tau * substeps + 1):
        pos = blob_positions(cfg, f)
        for b in range(cfg.n_blobs):
            d2 = (hh - pos[b, 0]) ** 2 + (ww - pos[b, 1]) ** 2
            mask |= d2 <= (k * cfg.radii[b]) ** 2
    return mask


def localization(R: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Mean of R inside and outside the mask."""
    inside = float(R[mask].mean()) if mask.any() else 0.0
    outside = float(R[~mask].mean()) if (~mask).any() else 0.0
    return inside, outside


def to_pixels(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2:
        raise ValueError(f"expected an (H, W) field, got shape {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValueError("heatmap contains non-finite values")
    lo, hi = R.min(), R.max()
    if hi <= lo:
        return np.zeros(R.shape, dtype=np.uint8)
    return np.round(255.0 * (R - lo) / (hi - lo)).astype(np.uint8)


def emit_image(R, path) -> None:
    """Write ``R`` as a binary (P5) graymap after min-max scaling."""
    px = to_pixels(R)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos].decode("ascii"))
    if fields[0] != "P5":
        raise ValueError(f"{path}: not a P5 graymap")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    px = np.frombuffer(data[pos + 1 :], dtype=np.uint8)
    if px.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return px.reshape(h, w)

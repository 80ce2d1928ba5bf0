"""Synthetic video latents: Gaussian blobs drifting with elastic reflection.

Clips have layout (T, C, H, W). Frame indices in the public API are 1-based,
so frame ``i`` lives at ``z[i - 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorio import RngStream, read_tensor, write_tensor

D_COND = 16


class SceneError(ValueError):
    pass


@dataclass
class SceneConfig:
    positions: np.ndarray  # (n_blobs, 2) as (h, w), grid units
    velocities: np.ndarray  # (n_blobs, 2) grid units per frame
    radii: np.ndarray  # (n_blobs,)
    channel_mix: np.ndarray  # (C, n_blobs)
    T: int = 9
    C: int = 8
    H: int = 16
    W: int = 16

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.velocities = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 2)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        self.channel_mix = np.asarray(self.channel_mix, dtype=np.float64)

    @property
    def n_blobs(self) -> int:
        return self.positions.shape[0]

    def validate(self, max_lag: int = 1) -> None:
        n = self.n_blobs
        for name in ("T", "C", "H", "W"):
            if int(getattr(self, name)) < 1:
                raise SceneError(f"{name} must be >= 1")
        if self.T < max_lag + 1:
            raise SceneError(f"T: need at least {max_lag + 1} frames, got {self.T}")
        if n < 1:
            raise SceneError("n_blobs: need at least one blob")
        if self.velocities.shape != (n, 2):
            raise SceneError(f"velocities: expected shape ({n}, 2)")
        if self.radii.shape != (n,):
            raise SceneError(f"radii: expected shape ({n},)")
        if self.channel_mix.shape != (self.C, n):
            raise SceneError(f"channel_mix: expected shape ({self.C}, {n})")
        if not np.all(self.radii > 0):
            raise SceneError("radii: must be positive")
        p = self.positions
        if not (np.all(p[:, 0] >= 0) and np.all(p[:, 0] < self.H) and np.all(p[:, 1] >= 0) and np.all(p[:, 1] < self.W)):
            raise SceneError("positions: must lie in [0, H) x [0, W)")
        for name in ("positions", "velocities", "radii", "channel_mix"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise SceneError(f"{name}: non-finite entries")


@dataclass
class VideoLatent:
    z: np.ndarray  # (T, C, H, W)
    c: np.ndarray | None = None
    scene: SceneConfig | None = None

    @property
    def T(self) -> int:
        return self.z.shape[0]


def _reflect(x: np.ndarray, upper: float) -> np.ndarray:
    # fold onto [0, upper] with period 2*upper
    if upper <= 0:
        return np.zeros_like(x)
    y = np.mod(x, 2.0 * upper)
    return np.where(y > upper, 2.0 * upper - y, y)


def blob_positions(cfg: SceneConfig, i: int) -> np.ndarray:
    """Blob centres at 1-based frame ``i`` after elastic reflection."""
    raw = cfg.positions + (i - 1) * cfg.velocities
    return np.stack([_reflect(raw[:, 0], cfg.H - 1), _reflect(raw[:, 1], cfg.W - 1)], axis=1)


def render_frame(cfg: SceneConfig, i: int) -> np.ndarray:
    hh, ww = np.meshgrid(np.arange(cfg.H, dtype=np.float64), np.arange(cfg.W, dtype=np.float64), indexing="ij")
    pos = blob_positions(cfg, i)
    frame = np.zeros((cfg.C, cfg.H, cfg.W))
    for b in range(cfg.n_blobs):
        d2 = (hh - pos[b, 0]) ** 2 + (ww - pos[b, 1]) ** 2
        g = np.exp(-d2 / (2.0 * cfg.radii[b] ** 2))
        frame += cfg.channel_mix[:, b, None, None] * g[None]
    return frame


def conditioning(cfg: SceneConfig, dim: int = D_COND) -> np.ndarray:
    """Encode scene parameters as [mean v_h, mean v_w, n_blobs, mean radius, 0, ...]."""
    c = np.zeros(dim)
    head = [cfg.velocities[:, 0].mean(), cfg.velocities[:, 1].mean(), float(cfg.n_blobs), cfg.radii.mean()]
    k = min(dim, len(head))
    c[:k] = head[:k]
    return c


def render_scene(cfg: SceneConfig) -> VideoLatent:
    cfg.validate()
    z = np.stack([render_frame(cfg, i) for i in range(1, cfg.T + 1)])
    return VideoLatent(z=z, c=conditioning(cfg), scene=cfg)


def true_motion(cfg: SceneConfig, i: int, tau: int) -> np.ndarray:
    """Closed-form latent change between 1-based frames ``i`` and ``i + tau``."""
    cfg.validate()
    if tau < 1 or not 1 <= i <= cfg.T - tau:
        raise IndexError(f"frame pair ({i}, {i + tau}) outside clip of length {cfg.T}")
    return render_frame(cfg, i + tau) - render_frame(cfg, i)


@dataclass
class SceneRanges:
    """Uniform sampling ranges for ``make_dataset``.

    Each blob's velocity is a shared clip velocity plus a per-blob jitter,
    so ``conditioning`` (which carries the mean velocity) stays informative.
    """

    n_blobs: tuple[int, int] = (1, 3)
    position_margin: float = 4.5
    speed: tuple[float, float] = (0.3, 0.6)
    velocity_jitter: float = 0.0
    radius: tuple[float, float] = (2.0, 3.5)
    mix: tuple[float, float] = (-1.0, 1.0)
    T: int = 9
    C: int = 8
    H: int = 16
    W: int = 16

    def validate(self) -> None:
        def check_pair(name, lo, hi):
            if not lo <= hi:
                raise SceneError(f"{name}: empty range [{lo}, {hi}]")

        check_pair("n_blobs", *self.n_blobs)
        check_pair("speed", *self.speed)
        check_pair("radius", *self.radius)
        check_pair("mix", *self.mix)
        if self.n_blobs[0] < 1:
            raise SceneError("n_blobs: need at least one blob")
        if self.radius[0] <= 0:
            raise SceneError("radius: must be positive")
        if self.velocity_jitter < 0:
            raise SceneError("velocity_jitter: must be non-negative")
        if not 0 <= self.position_margin < min(self.H, self.W) / 2:
            raise SceneError("position_margin: must leave a non-empty placement window")


def sample_scene(ranges: SceneRanges, rng: RngStream) -> SceneConfig:
    g = rng.generator
    n = int(g.integers(ranges.n_blobs[0], ranges.n_blobs[1] + 1))
    m = ranges.position_margin
    pos = np.stack([g.uniform(m, ranges.H - 1 - m, n), g.uniform(m, ranges.W - 1 - m, n)], axis=1)
    speed = g.uniform(*ranges.speed)
    angle = g.uniform(0.0, 2.0 * np.pi)
    shared = speed * np.array([np.cos(angle), np.sin(angle)])
    vel = shared[None, :] + g.uniform(-ranges.velocity_jitter, ranges.velocity_jitter, (n, 2))
    radii = g.uniform(*ranges.radius, n)
    mix = g.uniform(*ranges.mix, (ranges.C, n))
    return SceneConfig(pos, vel, radii, mix, T=ranges.T, C=ranges.C, H=ranges.H, W=ranges.W)


def make_dataset(n_clips: int, ranges: SceneRanges | None, rng: RngStream) -> list[VideoLatent]:
    """Draw ``n_clips`` i.i.d. scenes; clip ``k`` uses its own substream of ``rng``."""
    if n_clips < 1:
        raise SceneError("n_clips must be >= 1")
    ranges = ranges or SceneRanges()
    ranges.validate()
    return [render_scene(sample_scene(ranges, rng.substream(f"clip/{k}"))) for k in range(n_clips)]


# -- persistence ----------------------------------------------------------

def _fmt(a) -> str:
    return " ".join(repr(float(x)) for x in np.asarray(a, dtype=np.float64).ravel())


def scene_to_text(cfg: SceneConfig, c: np.ndarray) -> str:
    lines = [
        f"T = {cfg.T}",
        f"C = {cfg.C}",
        f"H = {cfg.H}",
        f"W = {cfg.W}",
        f"n_blobs = {cfg.n_blobs}",
        f"positions = {_fmt(cfg.positions)}",
        f"velocities = {_fmt(cfg.velocities)}",
        f"radii = {_fmt(cfg.radii)}",
        f"channel_mix = {_fmt(cfg.channel_mix)}",
        f"c = {_fmt(c)}",
    ]
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> tuple[SceneConfig, np.ndarray]:
    kv = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    try:
        T, C, H, W, n = (int(kv[k]) for k in ("T", "C", "H", "W", "n_blobs"))

        def arr(key):
            return np.array([float(x) for x in kv[key].split()]) if kv[key] else np.zeros(0)

        cfg = SceneConfig(
            arr("positions").reshape(n, 2),
            arr("velocities").reshape(n, 2),
            arr("radii"),
            arr("channel_mix").reshape(C, n),
            T=T, C=C, H=H, W=W,
        )
        return cfg, arr("c")
    except (KeyError, ValueError) as exc:
        raise SceneError(f"bad scene metadata: {exc}") from None


def save_dataset(clips: list[VideoLatent], path) -> list[str]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for k, clip in enumerate(clips):
        name = f"clip_{k:05d}"
        write_tensor(clip.z, path / f"{name}.lmt")
        (path / f"{name}.meta").write_text(scene_to_text(clip.scene, clip.c))
        names.append(name)
    (path / "manifest.txt").write_text("".join(f"{n}\n" for n in names))
    return names


def load_clip(lmt_path) -> VideoLatent:
    lmt_path = Path(lmt_path)
    z = read_tensor(lmt_path)
    meta = lmt_path.with_suffix(".meta")
    if meta.exists():
        cfg, c = scene_from_text(meta.read_text())
        return VideoLatent(z=z, c=c, scene=cfg)
    return VideoLatent(z=z)


def load_dataset(path) -> list[VideoLatent]:
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest}: dataset manifest missing")
    names = [n for n in manifest.read_text().split() if n]
    return [load_clip(path / f"{n}.lmt") for n in names]

"""Micro motion-field predictor: a small FiLM-conditioned residual CNN.

Maps one latent frame (C, H, W) and a conditioning vector (D_c,) to a
predicted latent change of the same shape as the frame. The output
projection, FiLM heads and null embedding start at zero, so a fresh net is
the constant-zero predictor.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .motionprior import delta_tau
from .schedule import NoiseSchedule
from .tensorio import RngStream, read_tensor_dir, write_tensor_dir

DTYPE = torch.float64
COS_EPS = 1e-12


class SEUnit(nn.Module):
    def __init__(self, width: int, ratio: int = 4):
        super().__init__()
        hidden = max(width // ratio, 1)
        self.down = nn.Linear(width, hidden)
        self.up = nn.Linear(hidden, width)

    def forward(self, x):
        s = x.mean(dim=(2, 3))
        gate = torch.sigmoid(self.up(F.silu(self.down(s))))
        return x * gate[:, :, None, None]


class FieldBlock(nn.Module):
    def __init__(self, width: int, d_cond: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.se = SEUnit(width)
        self.film = nn.Linear(d_cond, 2 * width)

    def forward(self, h, cond):
        y = self.conv2(F.silu(self.conv1(h)))
        y = self.se(y)
        scale, shift = self.film(cond).chunk(2, dim=-1)
        y = (1 + scale[:, :, None, None]) * y + shift[:, :, None, None]
        return h + y


class FieldNet(nn.Module):
    def __init__(self, C: int = 8, D_c: int = 16, N: int = 4, width: int = 64):
        super().__init__()
        for name, v in (("C", C), ("D_c", D_c), ("N", N), ("width", width)):
            if int(v) < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        self.C, self.D_c, self.N, self.width = C, D_c, N, width
        self.in_proj = nn.Conv2d(C, width, 3, padding=1)
        self.blocks = nn.ModuleList(FieldBlock(width, D_c) for _ in range(N))
        self.out_proj = nn.Conv2d(width, C, 3, padding=1)
        self.null_embedding = nn.Parameter(torch.zeros(D_c))
        self.to(DTYPE)

    def arch(self) -> dict:
        return {"C": self.C, "D_c": self.D_c, "N": self.N, "width": self.width}

    def resolve_cond(self, cond, null_mask, n: int):
        null = self.null_embedding.expand(n, self.D_c)
        if cond is None:
            return null
        if cond.ndim == 1:
            cond = cond.expand(n, self.D_c)
        if null_mask is None:
            return cond
        return torch.where(null_mask[:, None], null, cond)

    def forward(self, x, cond=None, null_mask=None):
        """x: (N, C, H, W); cond: (N, D_c), (D_c,) or None for the null prompt."""
        if x.ndim != 4 or x.shape[1] != self.C:
            raise ValueError(f"expected (N, {self.C}, H, W), got {tuple(x.shape)}")
        cvec = self.resolve_cond(cond, null_mask, x.shape[0])
        h = self.in_proj(x)
        for block in self.blocks:
            h = block(h, cvec)
        return self.out_proj(F.silu(h))


def _fill(p: nn.Parameter, values: np.ndarray):
    with torch.no_grad():
        p.copy_(torch.from_numpy(values.reshape(p.shape)))


def init_fieldnet(C: int = 8, D_c: int = 16, N: int = 4, width: int = 64, rng: RngStream | None = None) -> FieldNet:
    """Fan-in scaled interior weights; zero output projection, FiLM heads and null embedding."""
    rng = rng or RngStream(0)
    net = FieldNet(C, D_c, N, width)
    zero = ("out_proj.", "null_embedding", ".film.")
    for name, p in net.named_parameters():
        if any(z in name for z in zero) or name.endswith(".bias"):
            _fill(p, np.zeros(p.numel()))
            continue
        fan_in = p[0].numel()
        _fill(p, rng.substream(name).normal(p.numel()) / math.sqrt(fan_in))
    return net


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def _as_t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def fieldnet_forward(net: FieldNet, z_frame, c=None) -> np.ndarray:
    """Predicted latent change for one frame (C, H, W) or a stack (N, C, H, W).

    ``c=None`` selects the learned null embedding.
    """
    x = _as_t(z_frame)
    single = x.ndim == 3
    if single:
        x = x[None]
    cond = None if c is None else _as_t(c)
    with torch.no_grad():
        y = net(x, cond)
    y = y.numpy()
    return y[0] if single else y


def fieldnet_vjp_input(net: FieldNet, z_frame, c, cotangent) -> np.ndarray:
    """J^T cotangent with J the Jacobian of the net output w.r.t. the input frame(s)."""
    x = _as_t(z_frame).clone()
    u = _as_t(cotangent)
    if x.shape != u.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(u.shape)}")
    single = x.ndim == 3
    if single:
        x, u = x[None], u[None]
    x.requires_grad_(True)
    cond = None if c is None else _as_t(c)
    with torch.enable_grad():
        y = net(x, cond)
        (g,) = torch.autograd.grad(y, x, grad_outputs=u)
    g = g.detach().numpy()
    return g[0] if single else g


def field_loss_torch(pred: torch.Tensor, target: torch.Tensor, alpha: float = 0.5) -> torch.Tensor:
    """Per-sample MSE + alpha * (1 - cos), cosine over the flattened sample."""
    p = pred.reshape(pred.shape[0], -1)
    q = target.reshape(target.shape[0], -1)
    mse = ((p - q) ** 2).mean(-1)
    np_, nq = p.norm(dim=-1), q.norm(dim=-1)
    ok = (np_ >= COS_EPS) & (nq >= COS_EPS)
    denom = torch.where(ok, np_ * nq, torch.ones_like(np_))
    cos = torch.where(ok, (p * q).sum(-1) / denom, torch.zeros_like(np_))
    return mse + alpha * (1 - cos)


def fieldnet_loss(pred, target, alpha: float = 0.5) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    loss = field_loss_torch(torch.from_numpy(pred)[None], torch.from_numpy(target)[None], alpha)
    return float(loss[0])


@dataclass
class FieldBatch:
    inputs: np.ndarray  # (N, C, H, W)
    targets: np.ndarray  # (N, C, H, W)
    cond: np.ndarray | None = None  # (N, D_c)
    null_mask: np.ndarray | None = None  # (N,) bool

    def tensors(self):
        cond = None if self.cond is None else _as_t(self.cond)
        mask = None if self.null_mask is None else torch.as_tensor(np.asarray(self.null_mask, dtype=bool))
        return _as_t(self.inputs), _as_t(self.targets), cond, mask


def batch_loss(net: FieldNet, batch: FieldBatch, alpha: float = 0.5) -> torch.Tensor:
    x, y, cond, mask = batch.tensors()
    return field_loss_torch(net(x, cond, mask), y, alpha).mean()


def fieldnet_grads(net: FieldNet, batch: FieldBatch, alpha: float = 0.5) -> dict[str, np.ndarray]:
    """Gradients of the batch-mean loss for every named parameter."""
    if len(batch.inputs) == 0:
        raise ValueError("empty batch")
    net.zero_grad(set_to_none=True)
    with torch.enable_grad():
        loss = batch_loss(net, batch, alpha)
        params = list(net.named_parameters())
        grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    out = {}
    for (name, p), g in zip(params, grads):
        out[name] = np.zeros(tuple(p.shape)) if g is None else g.detach().numpy().copy()
    return out


@dataclass
class FieldHyper:
    tau: int = 2
    alpha: float = 0.5
    p_aug: float = 0.5
    p_drop: float = 0.2
    lr: float = 1e-3
    steps: int = 4000
    batch: int = 16
    lr_final: float | None = None  # cosine-anneal lr down to this value when set


def _frame_pairs(dataset, tau: int):
    pairs = []
    for k, clip in enumerate(dataset):
        T = clip.z.shape[0]
        if tau >= T:
            raise ValueError(f"lag {tau} >= clip length {T}")
        pairs.extend((k, i) for i in range(T - tau))
    return pairs


def draw_field_batch(dataset, pairs, sched: NoiseSchedule, hyper: FieldHyper, rng: RngStream) -> FieldBatch:
    g = rng.generator
    idx = g.integers(0, len(pairs), hyper.batch)
    aug = g.random(hyper.batch) < hyper.p_aug
    t_aug = g.integers(1, sched.S_train + 1, hyper.batch)
    drop = g.random(hyper.batch) < hyper.p_drop
    inputs, targets, conds = [], [], []
    for j, pi in enumerate(idx):
        k, i = pairs[pi]
        z = dataset[k].z
        # noise draw happens for every item so the stream layout is fixed
        noise = g.standard_normal(z.shape[1:])
        frame = z[i] + sched.sig(int(t_aug[j])) * noise if aug[j] else z[i]
        inputs.append(frame)
        targets.append(z[i + hyper.tau] - z[i])
        conds.append(dataset[k].c)
    return FieldBatch(np.stack(inputs), np.stack(targets), np.stack(conds), drop)


def cosine_lr(step: int, total: int, lr: float, lr_final: float) -> float:
    frac = (step - 1) / max(total - 1, 1)
    return lr_final + 0.5 * (lr - lr_final) * (1.0 + math.cos(math.pi * frac))


def set_lr(opt, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def train_fieldnet(dataset, sched: NoiseSchedule, hyper: FieldHyper | None = None, rng: RngStream | None = None,
                   arch: dict | None = None, net: FieldNet | None = None, metrics: list | None = None) -> FieldNet:
    """Fit the predictor on clean latent pairs with noise augmentation and prompt dropout.

    Targets are always the clean change ``z[i + tau] - z[i]``. ``metrics``, when
    given, receives ``(step, loss)`` tuples.
    """
    hyper = hyper or FieldHyper()
    rng = rng or RngStream(0)
    pairs = _frame_pairs(dataset, hyper.tau)
    if net is None:
        arch = dict(arch or {})
        arch.setdefault("C", dataset[0].z.shape[1])
        arch.setdefault("D_c", len(dataset[0].c))
        net = init_fieldnet(rng=rng.substream("init"), **arch)
    if hyper.steps <= 0:
        return net
    opt = torch.optim.Adam(net.parameters(), lr=hyper.lr)
    data_rng = rng.substream("batches")
    for step in range(1, hyper.steps + 1):
        if hyper.lr_final is not None:
            set_lr(opt, cosine_lr(step, hyper.steps, hyper.lr, hyper.lr_final))
        batch = draw_field_batch(dataset, pairs, sched, hyper, data_rng)
        opt.zero_grad(set_to_none=True)
        loss = batch_loss(net, batch, hyper.alpha)
        loss.backward()
        opt.step()
        if metrics is not None:
            metrics.append((step, float(loss.detach())))
    return net


def heldout_field_metrics(net: FieldNet, dataset, tau: int = 2, alpha: float = 0.5) -> dict:
    """Mean loss of the net and of the zero predictor, and mean cosine to the true change."""
    losses, zero_losses, cosines = [], [], []
    for clip in dataset:
        deltas = np.stack(delta_tau(clip.z, tau))
        preds = fieldnet_forward(net, clip.z[: len(deltas)], clip.c)
        for p, d in zip(preds, deltas):
            losses.append(fieldnet_loss(p, d, alpha))
            zero_losses.append(fieldnet_loss(np.zeros_like(d), d, alpha))
            denom = np.linalg.norm(p) * np.linalg.norm(d)
            cosines.append(float(np.dot(p.ravel(), d.ravel()) / denom) if denom > 0 else 0.0)
    return {"loss": float(np.mean(losses)), "zero_loss": float(np.mean(zero_losses)), "cosine": float(np.mean(cosines))}


def save_fieldnet(net: FieldNet, path, extra: dict | None = None) -> None:
    tensors = {name: p.detach().numpy() for name, p in net.state_dict().items()}
    meta = {"model": "fieldnet", "arch": net.arch(), **(extra or {})}
    write_tensor_dir(tensors, path, meta)


def load_fieldnet(path) -> tuple[FieldNet, dict]:
    tensors, meta = read_tensor_dir(path)
    if meta.get("model") != "fieldnet":
        raise ValueError(f"{path}: not a fieldnet checkpoint")
    net = FieldNet(**meta["arch"])
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return net, meta


def hyper_dict(h) -> dict:
    return asdict(h)

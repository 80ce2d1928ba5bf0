"""Finite-difference oracles shared by the gradient tests."""

import numpy as np
import torch

H = 1e-5
REL = 1e-5


def central_diff(f, x, d, h=H):
    """(f(x + h d) - f(x - h d)) / 2h for a scalar function of an array."""
    return (f(x + h * d) - f(x - h * d)) / (2 * h)


def rel_err(a, b, floor=1e-10):
    return abs(a - b) / max(abs(a), abs(b), floor)


def probe_array_grad(f, x, grad, rng, n_probes=20, h=H):
    """Largest relative error of <grad, d> vs a central difference over random directions."""
    worst = 0.0
    for _ in range(n_probes):
        d = rng.normal(x.shape)
        fd = central_diff(f, x, d, h)
        worst = max(worst, rel_err(float(np.sum(grad * d)), fd))
    return worst


def randomize(net, rng, scale=0.3):
    """Overwrite every parameter (including zero-initialized ones) with random values."""
    with torch.no_grad():
        for name, p in net.named_parameters():
            vals = rng.substream(name).normal(p.numel()).reshape(p.shape)
            fan_in = p[0].numel() if p.ndim > 1 else 1
            p.copy_(torch.from_numpy(scale * vals / np.sqrt(fan_in)))
    return net


def probe_param_grads(loss_fn, net, grads, rng, n_global=10, h=H):
    """Relative errors for one random-direction probe per parameter tensor plus global probes."""
    params = dict(net.named_parameters())
    errs = {}

    def shifted(directions, sign):
        with torch.no_grad():
            for name, d in directions.items():
                params[name].add_(torch.from_numpy(sign * h * d))
            value = float(loss_fn())
            for name, d in directions.items():
                params[name].sub_(torch.from_numpy(sign * h * d))
        return value

    def probe(directions):
        fd = (shifted(directions, 1.0) - shifted(directions, -1.0)) / (2 * h)
        an = sum(float(np.sum(grads[n] * d)) for n, d in directions.items())
        return rel_err(an, fd)

    for name, p in params.items():
        errs[name] = probe({name: rng.normal(tuple(p.shape))})
    for k in range(n_global):
        errs[f"global{k}"] = probe({n: rng.normal(tuple(p.shape)) for n, p in params.items()})
    return errs

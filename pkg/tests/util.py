"""Shared helpers for the test suite (not a test module)."""

import numpy as np
import torch

from t1qc.model import ModelConfig, build_conv5fc3, training_loss

MINI_CONFIG = ModelConfig(
    input_dims=(8, 8, 8),
    conv_channels=(1, 1, 1, 1, 1),
    fc_widths=(4, 3),
)


def gradient_check(n_coords: int = 100, seed: int = 0, rel_tol: float = 1e-3):
    """Compare autograd gradients of the weighted BCE against central
    finite differences on the miniature configuration, in float64.

    Returns (checked, worst_relative_error).
    """
    torch.manual_seed(seed)
    model = build_conv5fc3(MINI_CONFIG, seed=seed).double()
    model.train()
    g = torch.Generator().manual_seed(seed + 1)
    x = torch.randn(2, 1, 8, 8, 8, generator=g, dtype=torch.float64)
    y = torch.tensor([0.0, 1.0], dtype=torch.float64)
    weights = (1.0, 2.0)

    loss = training_loss(model, x, y, weights)
    params = [p for p in model.parameters()]
    grads = torch.autograd.grad(loss, params)

    flat = [(pi, idx) for pi, p in enumerate(params) for idx in range(p.numel())]
    rng = np.random.default_rng(seed + 2)
    picks = rng.choice(len(flat), size=min(n_coords, len(flat)), replace=False)

    worst = 0.0
    checked = 0
    with torch.no_grad():
        for k in picks:
            pi, idx = flat[k]
            p = params[pi]
            orig = p.view(-1)[idx].item()
            # large enough that the loss subtraction stays well above
            # float64 roundoff; the loss is locally smooth at this scale
            h = 1e-4 * max(1.0, abs(orig))
            p.view(-1)[idx] = orig + h
            up = training_loss(model, x, y, weights).item()
            p.view(-1)[idx] = orig - h
            down = training_loss(model, x, y, weights).item()
            p.view(-1)[idx] = orig
            fd = (up - down) / (2 * h)
            an = grads[pi].view(-1)[idx].item()
            denom = max(abs(an), abs(fd), 1e-8)
            worst = max(worst, abs(an - fd) / denom)
            checked += 1
    return checked, worst

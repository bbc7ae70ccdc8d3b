"""Small random models shared by the unit tests."""

import torch

from masafusion.denoiser import Denoiser, DenoiserConfig
from masafusion.trainer import base_schedule

TINY = DenoiserConfig(height=4, width=4, widths=(4, 6), cond_dim=16, time_dim=8, train_steps=40, seed=5)


def tiny_model(seed: int = 0, scale: float = 0.05) -> Denoiser:
    model = Denoiser(TINY)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=torch.float64))
    return model.requires_grad_(False)


def tiny_schedule(T: int = 8):
    return base_schedule(TINY.train_steps).respace(T)


def tiny_inputs(seed: int = 1):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(4, 4, 4, generator=g, dtype=torch.float64)
    cond = torch.randn(8, 16, generator=g, dtype=torch.float64)
    null = torch.randn(8, 16, generator=g, dtype=torch.float64)
    return x0, cond, null


def zero_params(model: Denoiser, *suffixes: str) -> Denoiser:
    with torch.no_grad():
        for name, w in model.named_weights().items():
            if name.endswith(suffixes):
                w.zero_()
    return model

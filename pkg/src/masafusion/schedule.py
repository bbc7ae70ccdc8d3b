"""Noise schedules, forward diffusion, guidance and the DDIM step pair."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, ShapeError, StepError
from .numeric import DTYPE, Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal rates ``alpha_bar[0..T]``.

    ``timesteps[t]`` is the index the denoiser was trained with for sampling
    step ``t``; it differs from ``t`` only for respaced schedules.
    """

    alpha_bar: Tensor
    timesteps: tuple[int, ...]

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.dim() != 1 or ab.numel() < 2:
            raise ConfigError("alpha_bar must be a 1-D sequence with at least two entries")
        if len(self.timesteps) != ab.numel():
            raise ConfigError("timesteps must have one entry per alpha_bar value")
        if float(ab[0]) != 1.0:
            raise ConfigError("alpha_bar[0] must equal 1")
        if not bool((ab[1:] < ab[:-1]).all()):
            raise ConfigError("alpha_bar must be strictly decreasing")
        if not bool((ab > 0).all()):
            raise ConfigError("alpha_bar entries must be positive")
        if float(ab[-1]) > 1e-2:
            raise ConfigError(f"alpha_bar[T] = {float(ab[-1]):.3g} exceeds 1e-2")

    @property
    def T(self) -> int:
        return self.alpha_bar.numel() - 1

    def respace(self, steps: int) -> "NoiseSchedule":
        """Uniformly spaced sub-schedule with ``steps`` DDIM steps."""
        if not 1 <= steps <= self.T:
            raise ConfigError(f"cannot respace {self.T} steps into {steps}")
        idx = [round(i * self.T / steps) for i in range(steps + 1)]
        return NoiseSchedule(
            alpha_bar=self.alpha_bar[idx].clone(),
            timesteps=tuple(self.timesteps[i] for i in idx),
        )


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 7.5

    def __post_init__(self):
        if not (self.w >= 0 and math.isfinite(self.w)):
            raise ConfigError(f"guidance scale must be finite and >= 0, got {self.w}")


def make_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    if T < 2:
        raise ConfigError("a schedule needs T >= 2")
    if not 0 < beta_min < beta_max < 1:
        raise ConfigError(f"need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})")
    betas = torch.linspace(beta_min, beta_max, T, dtype=DTYPE)
    alpha_bar = torch.cat([torch.ones(1, dtype=DTYPE), torch.cumprod(1.0 - betas, dim=0)])
    return NoiseSchedule(alpha_bar=alpha_bar, timesteps=tuple(range(T + 1)))


def scaled_linear_schedule(T: int) -> NoiseSchedule:
    """Linear betas on ``[1e-4, 0.02]`` rescaled by ``1000 / T``."""
    scale = 1000.0 / T
    return make_schedule(T, 1e-4 * scale, 0.02 * scale)


def _check_step(t: int, s: NoiseSchedule) -> None:
    if not 1 <= t <= s.T:
        raise StepError(f"step {t} outside [1, {s.T}]")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def forward_diffuse(x0: Tensor, t: int, eps: Tensor, s: NoiseSchedule) -> Tensor:
    _same_shape(x0, eps, "forward_diffuse")
    if not 0 <= t <= s.T:
        raise StepError(f"step {t} outside [0, {s.T}]")
    ab = s.alpha_bar[t]
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def cfg_combine(eps_cond: Tensor, eps_null: Tensor, g: GuidanceConfig | float) -> Tensor:
    _same_shape(eps_cond, eps_null, "cfg_combine")
    w = g.w if isinstance(g, GuidanceConfig) else float(g)
    return w * eps_cond + (1.0 - w) * eps_null


def ddim_move(x: Tensor, eps: Tensor, ab_from, ab_to) -> Tensor:
    """Deterministic DDIM transfer between two noise levels.

    Predicts the clean sample from ``x`` at level ``ab_from`` and re-noises it
    to ``ab_to`` with the same ``eps``; swapping the levels inverts the move.
    """
    _same_shape(x, eps, "ddim")
    ab_from = torch.as_tensor(ab_from, dtype=DTYPE)
    ab_to = torch.as_tensor(ab_to, dtype=DTYPE)
    x0_pred = (x - torch.sqrt(1.0 - ab_from) * eps) / torch.sqrt(ab_from)
    return torch.sqrt(ab_to) * x0_pred + torch.sqrt(1.0 - ab_to) * eps


def ddim_step(x_t: Tensor, eps: Tensor, t: int, s: NoiseSchedule) -> Tensor:
    _check_step(t, s)
    return ddim_move(x_t, eps, s.alpha_bar[t], s.alpha_bar[t - 1])


def ddim_invert_step(x_prev: Tensor, eps: Tensor, t: int, s: NoiseSchedule) -> Tensor:
    _check_step(t, s)
    return ddim_move(x_prev, eps, s.alpha_bar[t - 1], s.alpha_bar[t])

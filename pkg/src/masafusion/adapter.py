"""Spatial-condition adapter: a bias-free linear encoder whose per-level
feature maps are added into the denoiser's encoder hidden states."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import InputError, ShapeError
from .numeric import DTYPE, RngStream, Tensor

CONDITION_KINDS = ("sketch", "pose", "canny")


@dataclass(frozen=True)
class ExternalCondition:
    grid: Tensor
    kind: str = "sketch"

    def __post_init__(self):
        if self.grid.dim() != 2:
            raise ShapeError("condition grid must be H x W")
        if self.kind not in CONDITION_KINDS:
            raise InputError(f"unknown condition kind {self.kind!r}")
        if not bool(torch.isfinite(self.grid).all()) or self.grid.min() < 0 or self.grid.max() > 1:
            raise InputError("condition entries must lie in [0, 1]")


@dataclass(frozen=True)
class AdapterFeatures:
    features: dict[int, Tensor] = field(default_factory=dict)
    strength: float = 1.0

    def is_zero(self) -> bool:
        return all(not bool(f.any()) for f in self.features.values())


class Adapter:
    """One fixed 3x3 kernel bank per injection level, applied to the
    average-pooled condition. No bias and no nonlinearity, so the map is
    linear in both the grid and the strength."""

    def __init__(self, grid_size: tuple[int, int], widths: tuple[int, ...],
                 sites: tuple[int, ...] | None = None, seed: int = 4321):
        self.grid_size = tuple(grid_size)
        self.widths = tuple(widths)
        self.sites = tuple(range(len(widths))) if sites is None else tuple(sites)
        self.seed = seed
        rng = RngStream(seed)
        self.kernels = {}
        for level, width in enumerate(self.widths):
            k = rng.normal(width, 1, 3, 3) / 3.0
            if level in self.sites:
                self.kernels[level] = k

    def encode_condition(self, c: ExternalCondition, strength: float = 1.0) -> AdapterFeatures:
        if tuple(c.grid.shape) != self.grid_size:
            raise ShapeError(f"condition grid {tuple(c.grid.shape)} does not match latent grid {self.grid_size}")
        return AdapterFeatures(self._encode(c.grid[None, None], strength), float(strength))

    def encode_batch(self, grids: Tensor, strength: float | Tensor = 1.0) -> dict[int, Tensor]:
        """Features for a ``(B, H, W)`` stack; ``strength`` may be per-sample."""
        return self._encode(grids[:, None].to(DTYPE), strength)

    def _encode(self, g: Tensor, strength) -> dict[int, Tensor]:
        s = torch.as_tensor(strength, dtype=DTYPE)
        if s.dim() == 1:
            s = s[:, None, None, None]
        out = {}
        for level, kernel in self.kernels.items():
            pooled = F.avg_pool2d(g, 2 ** level) if level else g
            out[level] = F.conv2d(pooled, kernel, padding=1) * s
        if g.shape[0] == 1:
            out = {k: v[0] for k, v in out.items()}
        return out


def edge_magnitude(image: Tensor) -> Tensor:
    """Central-difference gradient magnitude with replicated borders.

    ``image`` is ``(C, H, W)``; the result is ``(H, W)``.
    """
    padded = F.pad(image[None], (1, 1, 1, 1), mode="replicate")[0]
    gx = (padded[:, 1:-1, 2:] - padded[:, 1:-1, :-2]) / 2.0
    gy = (padded[:, 2:, 1:-1] - padded[:, :-2, 1:-1]) / 2.0
    return torch.sqrt((gx ** 2 + gy ** 2).sum(dim=0))


def extract_condition(image: Tensor, threshold: float = 0.25, kind: str = "sketch") -> ExternalCondition:
    if image.dim() == 2:
        image = image[None]
    if not bool(torch.isfinite(image).all()):
        raise InputError("image contains non-finite entries")
    return ExternalCondition((edge_magnitude(image) > threshold).to(DTYPE), kind)


def binarize(grid: Tensor, threshold: float) -> Tensor:
    return (grid > threshold).to(DTYPE)

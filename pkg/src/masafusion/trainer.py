"""Procedural shape dataset and the noise-prediction training loop."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .adapter import Adapter, extract_condition
from .denoiser import Denoiser
from .errors import ConfigError, DivergenceError, InputError
from .numeric import DTYPE, RngStream, Tensor
from .schedule import NoiseSchedule, ddim_step, make_schedule
from .text import POSITIONS, SHADES, SHAPES, TextEncoder, TokenSequence

# per-channel colour of the object for each shade word
SHADE_COLORS = {
    "dark": (1.5, -1.0, 1.0, -0.5),
    "light": (-0.5, 1.5, -1.0, 1.0),
}

COMBINATIONS = tuple(itertools.product(SHAPES, POSITIONS, SHADES))


def base_schedule(train_steps: int = 100) -> NoiseSchedule:
    """The schedule the toy denoiser is trained on; pipelines respace it."""
    return make_schedule(train_steps, 0.1 / train_steps, 20.0 / train_steps)


def shape_mask(shape: str, height: int, width: int, cy: float, cx: float, radius: float) -> Tensor:
    ys = torch.arange(height, dtype=DTYPE)[:, None] + 0.5 - cy
    xs = torch.arange(width, dtype=DTYPE)[None, :] + 0.5 - cx
    ys, xs = ys.expand(height, width), xs.expand(height, width)
    if shape == "square":
        m = (xs.abs() <= radius * 0.85) & (ys.abs() <= radius * 0.85)
    elif shape == "circle":
        m = xs ** 2 + ys ** 2 <= radius ** 2
    elif shape == "triangle":
        # apex up, base down
        m = (ys.abs() <= radius) & (xs.abs() <= (ys + radius) / 2)
    elif shape == "cross":
        arm = radius / 2.5
        m = ((xs.abs() <= arm) & (ys.abs() <= radius)) | ((ys.abs() <= arm) & (xs.abs() <= radius))
    else:
        raise InputError(f"unknown shape {shape!r}")
    return m


def render(shape: str, position: str, shade: str, height: int, width: int, jitter: float = 0.0) -> Tensor:
    """Draw one object on a zero background, shape ``(4, H, W)``."""
    if position not in POSITIONS or shade not in SHADES:
        raise InputError(f"cannot render {position!r} / {shade!r}")
    cx = width * (0.25 if position == "left" else 0.75)
    cy = height * 0.5 + jitter
    m = shape_mask(shape, height, width, cy, cx, 0.24 * width).to(DTYPE)
    color = torch.tensor(SHADE_COLORS[shade], dtype=DTYPE)
    return color[:, None, None] * m[None]


@dataclass(frozen=True)
class ToySample:
    image: Tensor
    tokens: TokenSequence
    prompt: str


def make_toy_dataset(seed: int, n: int, encoder: TextEncoder, height: int, width: int) -> list[ToySample]:
    """``n`` samples cycling through every (shape, position, shade) triple in
    a seed-shuffled order; each sample gets a vertical jitter of at most one
    pixel."""
    if n < 1:
        raise ConfigError("dataset size must be at least 1")
    rng = RngStream(seed)
    order = rng.permutation(len(COMBINATIONS))
    jitters = rng.integers(3, n) - 1
    out = []
    for i in range(n):
        shape, position, shade = COMBINATIONS[order[i % len(COMBINATIONS)]]
        prompt = f"{shape} {position} {shade}"
        image = render(shape, position, shade, height, width, float(jitters[i]))
        out.append(ToySample(image, encoder.tokenize(prompt), prompt))
    return out


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 5e-3
    seed: int = 7
    cond_drop: float = 0.1
    adapter_prob: float = 0.5
    clip: float = 1.0  # global gradient-norm cap; 0 disables
    optimizer: str = "adam"  # or "sgd": plain gradient descent
    decay: str = "cosine"  # or "constant"; cosine anneals lr to zero over the run

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.decay not in ("constant", "cosine"):
            raise ConfigError(f"decay must be 'constant' or 'cosine', got {self.decay!r}")
        if self.clip < 0:
            raise ConfigError("clip must be >= 0")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigError("learning rate must be finite and non-negative")
        for name in ("cond_drop", "adapter_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")


@dataclass
class TrainResult:
    model: Denoiser
    losses: list[float] = field(default_factory=list)


class _Tensors:
    """Dataset pre-stacked for batched indexing."""

    def __init__(self, data: list[ToySample], encoder: TextEncoder):
        self.images = torch.stack([s.image for s in data])
        self.conds = torch.stack([encoder.encode(s.tokens).matrix for s in data])
        self.edges = torch.stack([extract_condition(s.image).grid for s in data])
        self.null = encoder.empty().matrix


def diffusion_loss(model: Denoiser, x0: Tensor, t: Tensor, eps: Tensor, cond: Tensor,
                   schedule: NoiseSchedule, feats: dict[int, Tensor] | None = None) -> Tensor:
    """Mean squared error between injected and predicted noise."""
    ab = schedule.alpha_bar[t][:, None, None, None]
    xt = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    return F.mse_loss(model(xt, t, cond, feats), eps)


def held_out_batch(data: list[ToySample], encoder: TextEncoder, schedule: NoiseSchedule,
                   seed: int = 99, size: int = 64):
    rng = RngStream(seed)
    pack = _Tensors(data, encoder)
    idx = torch.from_numpy(rng.integers(len(data), size))
    t = torch.from_numpy(rng.integers(schedule.T, size) + 1)
    eps = rng.normal(size, *pack.images.shape[1:])
    return pack.images[idx], t, eps, pack.conds[idx]


def held_out_loss(model: Denoiser, batch, schedule: NoiseSchedule) -> float:
    with torch.no_grad():
        return float(diffusion_loss(model, *batch, schedule))


def train(model: Denoiser, data: list[ToySample], cfg: TrainConfig, encoder: TextEncoder,
          adapter: Adapter | None = None, schedule: NoiseSchedule | None = None,
          log_every: int = 0) -> TrainResult:
    """Minimise the noise-prediction loss with Adam (or plain descent when
    ``cfg.optimizer == "sgd"``) on globally norm-clipped gradients.

    Per sample the prompt is replaced by the empty prompt with probability
    ``cfg.cond_drop``. When an adapter is given, the sample's own edge map is
    injected with probability ``cfg.adapter_prob`` so the network learns to
    follow the fixed adapter features.
    """
    if not data:
        raise InputError("training data is empty")
    schedule = schedule or base_schedule(model.config.train_steps)
    pack = _Tensors(data, encoder)
    rng = RngStream(cfg.seed)
    params = [p for p in model.parameters()]
    for p in params:
        p.requires_grad_(True)
    adam = torch.optim.Adam(params, lr=cfg.lr) if cfg.optimizer == "adam" else None
    losses = []
    B = cfg.batch_size
    for step in range(cfg.steps):
        lr = cfg.lr
        if cfg.decay == "cosine":
            lr *= 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
        idx = torch.from_numpy(rng.integers(len(data), B))
        t = torch.from_numpy(rng.integers(schedule.T, B) + 1)
        eps = rng.normal(B, *pack.images.shape[1:])
        drop = torch.from_numpy(rng.uniform(B) < cfg.cond_drop)
        use_adapter = torch.from_numpy(rng.uniform(B) < cfg.adapter_prob).to(DTYPE)
        cond = torch.where(drop[:, None, None], pack.null[None], pack.conds[idx])
        feats = None
        if adapter is not None and cfg.adapter_prob > 0:
            feats = adapter.encode_batch(pack.edges[idx], use_adapter)
            if B == 1:
                feats = {k: v[None] for k, v in feats.items()}
        loss = diffusion_loss(model, pack.images[idx], t, eps, cond, schedule, feats)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite training loss at step {step}", step)
        grads = torch.autograd.grad(loss, params)
        factor = 1.0
        if cfg.clip > 0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            factor = min(1.0, cfg.clip / max(norm, 1e-300))
        if adam is not None:
            for group in adam.param_groups:
                group["lr"] = lr
            for p, g in zip(params, grads):
                p.grad = g * factor
            adam.step()
        else:
            with torch.no_grad():
                for p, g in zip(params, grads):
                    p.sub_(lr * factor * g)
        losses.append(value)
        if log_every and step % log_every == 0:
            print(f"step {step} loss {value:.4f}")
    model.requires_grad_(False)
    return TrainResult(model, losses)


def smoothed(losses: list[float], window: int = 50) -> list[float]:
    out, acc = [], 0.0
    for i, v in enumerate(losses):
        acc += v
        if i >= window:
            acc -= losses[i - window]
        out.append(acc / min(i + 1, window))
    return out


def write_loss_trace(losses: list[float], path: str | Path) -> None:
    Path(path).write_text("".join(f"{i} {v:.9g}\n" for i, v in enumerate(losses)))


def read_loss_trace(path: str | Path) -> list[float]:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    return [float(r[1]) for r in rows]


# -- prototype classifier -------------------------------------------------

JITTERS = (-1.0, 0.0, 1.0)


def shape_prototypes(height: int, width: int) -> dict[tuple[str, str], Tensor]:
    """Occupancy templates per ``(shape, position)``, one per vertical
    jitter, stacked as ``(len(JITTERS), H, W)``."""
    protos = {}
    for shape, position in itertools.product(SHAPES, POSITIONS):
        cx = width * (0.25 if position == "left" else 0.75)
        protos[shape, position] = torch.stack([
            shape_mask(shape, height, width, height * 0.5 + j, cx, 0.24 * width).to(DTYPE) for j in JITTERS])
    return protos


def occupancy(image: Tensor, threshold: float = 0.5) -> Tensor:
    """Pixels where any channel is clearly away from the zero background."""
    return (image.abs().amax(dim=0) > threshold).to(DTYPE)


def classify_shape(image: Tensor, position: str, prototypes: dict[tuple[str, str], Tensor]) -> str:
    """Shape whose nearest template at ``position`` has the smallest squared
    occupancy distance to ``image``."""
    occ = occupancy(image)
    best, best_d = None, math.inf
    for shape in SHAPES:
        d = float(((prototypes[shape, position] - occ) ** 2).sum(dim=(1, 2)).min())
        if d < best_d:
            best, best_d = shape, d
    return best


def shape_accuracy(model: Denoiser, encoder: TextEncoder, T: int = 50, w: float = 7.5,
                   repeats: int = 2, seed: int = 100) -> float:
    """Fraction of guided samples, ``repeats`` per attribute triple, whose
    classified shape matches the prompt."""
    cfg = model.config
    s = base_schedule(cfg.train_steps).respace(T)
    protos = shape_prototypes(cfg.height, cfg.width)
    null = encoder.empty().matrix
    hits = total = 0
    with torch.no_grad():
        for i, (shape, position, shade) in enumerate(COMBINATIONS):
            cond = encoder.encode(f"{shape} {position} {shade}").matrix
            for rep in range(repeats):
                x = RngStream(seed + i, rep).normal(cfg.channels, cfg.height, cfg.width)
                for t in range(T, 0, -1):
                    eps, _ = model.predict_noise(s.timesteps[t], x, cond, null, w)
                    x = ddim_step(x, eps, t, s)
                hits += classify_shape(x, position, protos) == shape
                total += 1
    return hits / total

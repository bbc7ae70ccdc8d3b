"""Conditional noise predictor with addressable attention sites.

The network is a small UNet analog: a conv stem, one attention block per
resolution on the way down (``enc0``, ``enc1``, ...), one per resolution on
the way up (``dec1``, ``dec0``) and a conv head. Each block carries a
single-head self-attention and a cross-attention over the prompt
embedding. Every attention site is addressed by ``(timestep, layer, kind)``
and can be captured or substituted through a :class:`HookSet`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import torch
import torch.nn.functional as F
from torch import nn

from .errors import HookError, InputError, ShapeError
from .numeric import DTYPE, RngStream, Tensor, apply_map, attention, load_tdump, save_tdump
from .schedule import cfg_combine

CAPTURE = "Capture"
REPLACE_SELF_OUTPUT = "ReplaceSelfOutput"
REPLACE_SELF_KV = "ReplaceSelfKV"
REPLACE_SELF_QK = "ReplaceSelfQK"
REPLACE_CROSS_QK = "ReplaceCrossQK"
REPLACE_MODES = {
    REPLACE_SELF_OUTPUT: "self",
    REPLACE_SELF_KV: "self",
    REPLACE_SELF_QK: "self",
    REPLACE_CROSS_QK: "cross",
}

RESIDUAL_GAIN = 0.2


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 4
    height: int = 12
    width: int = 12
    widths: tuple[int, ...] = (24, 32, 48)
    cond_dim: int = 16
    time_dim: int = 32
    train_steps: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        factor = 2 ** (len(self.widths) - 1)
        if self.height % factor or self.width % factor:
            raise ShapeError(f"grid {self.height}x{self.width} is not divisible by {factor}")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def layers(self) -> tuple[str, ...]:
        n = len(self.widths)
        return tuple(f"enc{i}" for i in range(n)) + tuple(f"dec{i}" for i in reversed(range(n - 1)))


@dataclass(frozen=True)
class AttnRecord:
    """Tensors of one attention site; leading dim is the guidance branch."""

    q: Tensor
    k: Tensor
    v: Tensor
    p: Tensor
    out: Tensor


class AttentionCache:
    """Attention records keyed by ``(timestep, layer, kind)``."""

    def __init__(self, branches: tuple[str, ...] = ()):
        self.branches = branches
        self._records: dict[tuple[int, str, str], AttnRecord] = {}
        self._frozen = False

    def record(self, t: int, layer: str, kind: str, rec: AttnRecord) -> None:
        if self._frozen:
            raise HookError("cache is frozen")
        self._records[(t, layer, kind)] = rec

    def get(self, t: int, layer: str, kind: str) -> AttnRecord:
        try:
            return self._records[(t, layer, kind)]
        except KeyError:
            raise HookError(f"no cached {kind}-attention at step {t}, layer {layer}") from None

    def __contains__(self, key) -> bool:
        return key in self._records

    def __len__(self) -> int:
        return len(self._records)

    def keys(self):
        return self._records.keys()

    def items(self):
        return self._records.items()

    def merge(self, other: "AttentionCache") -> "AttentionCache":
        if self._frozen:
            raise HookError("cache is frozen")
        if other.branches and self.branches and other.branches != self.branches:
            raise HookError(f"cannot merge caches over branches {other.branches} and {self.branches}")
        self.branches = self.branches or other.branches
        self._records.update(other._records)
        return self

    def freeze(self) -> "AttentionCache":
        self._frozen = True
        return self

    def steps(self) -> list[int]:
        return sorted({k[0] for k in self._records})

    def complete_for(self, t: int, layers: Iterable[str], kind: str = "self") -> bool:
        return all((t, layer, kind) in self._records for layer in layers)


@dataclass(frozen=True)
class Directive:
    mode: str
    source: AttentionCache
    layers: frozenset[str] | None = None
    steps: tuple[int, int] | None = None

    def __post_init__(self):
        if self.mode not in REPLACE_MODES:
            raise HookError(f"unknown directive {self.mode!r}")
        if self.layers is not None:
            object.__setattr__(self, "layers", frozenset(self.layers))

    @property
    def kind(self) -> str:
        return REPLACE_MODES[self.mode]

    def applies(self, t: int, layer: str, kind: str) -> bool:
        if kind != self.kind:
            return False
        if self.layers is not None and layer not in self.layers:
            return False
        return self.steps is None or self.steps[0] <= t <= self.steps[1]


@dataclass(frozen=True)
class HookSet:
    directives: tuple[Directive, ...] = ()
    capture: tuple[str, ...] = ()

    @classmethod
    def replace(cls, mode: str, source: AttentionCache, layers=None, capture=()) -> "HookSet":
        return cls((Directive(mode, source, None if layers is None else frozenset(layers)),), tuple(capture))

    def resolve(self, t: int, layer: str, kind: str) -> Directive | None:
        hits = [d for d in self.directives if d.applies(t, layer, kind)]
        if len(hits) > 1:
            raise HookError(f"{len(hits)} replace directives target step {t}, layer {layer}, {kind}")
        return hits[0] if hits else None


@dataclass
class _Pass:
    t: int
    hooks: HookSet
    branches: tuple[str, ...]
    cache: AttentionCache


def _layer_norm(x: Tensor) -> Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + 1e-5)


def sinusoidal_table(steps: int, dim: int) -> Tensor:
    pos = torch.arange(steps + 1, dtype=DTYPE)[:, None]
    freqs = torch.exp(-math.log(1000.0) * torch.arange(dim // 2, dtype=DTYPE) / (dim // 2))
    ang = pos * freqs[None] * (1000.0 / steps)
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def coordinate_channels(height: int, width: int) -> Tensor:
    ys = torch.linspace(-1.0, 1.0, height, dtype=DTYPE)[:, None].expand(height, width)
    xs = torch.linspace(-1.0, 1.0, width, dtype=DTYPE)[None, :].expand(height, width)
    return torch.stack([ys, xs])


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        self.nfe = 0
        rng = RngStream(cfg.seed)
        self._shapes: dict[str, tuple[int, ...]] = {}

        def param(name: str, *shape: int, fan_in: int | None = None, zero: bool = False,
                  gain: float = 1.0):
            if zero:
                value = torch.zeros(shape, dtype=DTYPE)
            else:
                fan = fan_in if fan_in is not None else shape[0]
                value = gain * rng.normal(*shape) / math.sqrt(fan)
            self.register_parameter(name.replace(".", "__"), nn.Parameter(value))
            self._shapes[name] = shape

        td = cfg.time_dim
        self.register_buffer("time_table", sinusoidal_table(cfg.train_steps, td))
        self.register_buffer("coords", coordinate_channels(cfg.height, cfg.width))
        param("time.w1", td, td)
        param("time.w2", td, td)
        w0 = cfg.widths[0]
        param("stem.w", w0, cfg.channels + 2, 3, 3, fan_in=(cfg.channels + 2) * 9)
        param("stem.b", w0, zero=True)
        for layer in cfg.layers:
            level = int(layer[3:])
            w = cfg.widths[level]
            param(f"{layer}.time", td, w)
            param(f"{layer}.conv1", w, w, 3, 3, fan_in=w * 9)
            # residual branches start small so the untrained net is near identity
            param(f"{layer}.conv2", w, w, 3, 3, fan_in=w * 9, gain=RESIDUAL_GAIN)
            for kind in ("self", "cross"):
                param(f"{layer}.{kind}.wq", w, w)
                param(f"{layer}.{kind}.wk", w if kind == "self" else cfg.cond_dim, w)
                param(f"{layer}.{kind}.wv", w if kind == "self" else cfg.cond_dim, w)
                param(f"{layer}.{kind}.wo", w, w, gain=RESIDUAL_GAIN)
            param(f"{layer}.mlp.w1", w, 2 * w)
            param(f"{layer}.mlp.b1", 2 * w, zero=True)
            param(f"{layer}.mlp.w2", 2 * w, w, gain=RESIDUAL_GAIN)
        for level in range(1, len(cfg.widths)):
            param(f"down{level}", cfg.widths[level], cfg.widths[level - 1], 1, 1, fan_in=cfg.widths[level - 1])
            param(f"up{level}", cfg.widths[level - 1], cfg.widths[level], 1, 1, fan_in=cfg.widths[level])
        param("head.w", cfg.channels, w0, 3, 3, fan_in=w0 * 9, gain=RESIDUAL_GAIN)
        param("head.b", cfg.channels, zero=True)

    # -- parameters by dotted name ----------------------------------------
    def p(self, name: str) -> Tensor:
        return getattr(self, name.replace(".", "__"))

    def named_weights(self) -> dict[str, Tensor]:
        return {name: self.p(name) for name in self._shapes}

    # -- forward ----------------------------------------------------------
    def forward(self, x: Tensor, t, cond: Tensor, feats: dict[int, Tensor] | None = None,
                ctx: _Pass | None = None) -> Tensor:
        cfg = self.config
        if x.dim() != 4 or tuple(x.shape[1:]) != (cfg.channels, cfg.height, cfg.width):
            raise ShapeError(f"expected (B, {cfg.channels}, {cfg.height}, {cfg.width}) input, got {tuple(x.shape)}")
        if cond.dim() != 3 or cond.shape[0] != x.shape[0] or cond.shape[2] != cfg.cond_dim:
            raise ShapeError(f"condition shape {tuple(cond.shape)} does not fit batch {x.shape[0]}")
        B = x.shape[0]
        t = torch.as_tensor(t, dtype=torch.long)
        if not bool(((t >= 0) & (t <= cfg.train_steps)).all()):
            raise ShapeError(f"timestep outside [0, {cfg.train_steps}]")
        temb = self.time_table[t].reshape(-1, cfg.time_dim).expand(B, cfg.time_dim)
        temb = F.silu(temb @ self.p("time.w1")) @ self.p("time.w2")

        h = torch.cat([x, self.coords.expand(B, -1, -1, -1)], dim=1)
        h = F.conv2d(h, self.p("stem.w"), self.p("stem.b"), padding=1)
        skips = []
        n = len(cfg.widths)
        for level in range(n):
            if level:
                h = F.conv2d(F.avg_pool2d(h, 2), self.p(f"down{level}"))
            if feats is not None and level in feats:
                h = h + feats[level]
            h = self._block(f"enc{level}", h, temb, cond, ctx)
            skips.append(h)
        for level in reversed(range(n - 1)):
            h = F.conv2d(F.interpolate(h, scale_factor=2, mode="nearest"), self.p(f"up{level + 1}"))
            h = self._block(f"dec{level}", h + skips[level], temb, cond, ctx)
        return F.conv2d(F.silu(h), self.p("head.w"), self.p("head.b"), padding=1)

    def _block(self, layer: str, h: Tensor, temb: Tensor, cond: Tensor, ctx: _Pass | None) -> Tensor:
        p = self.p
        B, w, H, W = h.shape
        r = F.conv2d(F.silu(h), p(f"{layer}.conv1"), padding=1)
        r = r + (F.silu(temb) @ p(f"{layer}.time"))[:, :, None, None]
        r = F.conv2d(F.silu(r), p(f"{layer}.conv2"), padding=1)
        h = h + r
        tok = h.flatten(2).transpose(1, 2)
        u = _layer_norm(tok)
        a = self._attend(layer, "self", u @ p(f"{layer}.self.wq"), u @ p(f"{layer}.self.wk"),
                         u @ p(f"{layer}.self.wv"), ctx)
        tok = tok + a @ p(f"{layer}.self.wo")
        u = _layer_norm(tok)
        a = self._attend(layer, "cross", u @ p(f"{layer}.cross.wq"), cond @ p(f"{layer}.cross.wk"),
                         cond @ p(f"{layer}.cross.wv"), ctx)
        tok = tok + a @ p(f"{layer}.cross.wo")
        u = _layer_norm(tok)
        tok = tok + F.silu(u @ p(f"{layer}.mlp.w1") + p(f"{layer}.mlp.b1")) @ p(f"{layer}.mlp.w2")
        return tok.transpose(1, 2).reshape(B, w, H, W)

    def _attend(self, layer: str, kind: str, q: Tensor, k: Tensor, v: Tensor, ctx: _Pass | None) -> Tensor:
        if ctx is None:
            return attention(q, k, v)[0]
        d = ctx.hooks.resolve(ctx.t, layer, kind)
        if d is None:
            out, probs = attention(q, k, v)
        else:
            src = d.source.get(ctx.t, layer, kind)
            if d.source.branches != ctx.branches:
                raise HookError(f"cache holds branches {d.source.branches}, pass runs {ctx.branches}")
            if d.mode == REPLACE_SELF_OUTPUT:
                out, probs = src.out, src.p
            elif d.mode == REPLACE_SELF_KV:
                k, v = src.k, src.v
                out, probs = attention(q, k, v)
            else:  # ReplaceSelfQK / ReplaceCrossQK: borrowed map, live values
                q, k, probs = src.q, src.k, src.p
                out = apply_map(probs, v)
        if kind in ctx.hooks.capture:
            ctx.cache.record(ctx.t, layer, kind, AttnRecord(
                q.detach(), k.detach(), v.detach(), probs.detach(), out.detach()))
        return out

    # -- guided prediction --------------------------------------------------
    def predict_noise(self, t: int, x: Tensor, cond: Tensor, null: Tensor, w: float,
                      feats: dict[int, Tensor] | None = None,
                      hooks: HookSet | None = None) -> tuple[Tensor, AttentionCache]:
        """Guided noise prediction at model timestep ``t`` for one latent ``x``.

        Both guidance branches run as one batch (only the conditional one when
        ``w == 1``, where the unconditional term carries zero weight) and every
        hook applies to each branch against the same branch of its source.
        """
        self.nfe += 1
        if x.dim() != 3:
            raise ShapeError(f"expected a single (C, H, W) latent, got {tuple(x.shape)}")
        if w == 1.0:
            branches, conds = ("cond",), cond[None]
        else:
            branches, conds = ("cond", "null"), torch.stack([cond, null])
        cache = AttentionCache(branches)
        ctx = None if hooks is None else _Pass(int(t), hooks, branches, cache)
        out = self.forward(x[None].expand(len(branches), -1, -1, -1), int(t), conds, feats, ctx)
        eps = out[0] if len(branches) == 1 else cfg_combine(out[0], out[1], w)
        return eps, cache.freeze()

    # -- checkpoints --------------------------------------------------------
    def save(self, directory: str | Path, extra: dict | None = None) -> str:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, value in self.named_weights().items():
            fname = f"{name}.tdump"
            save_tdump(value.detach(), directory / fname)
            files[name] = fname
        manifest = {"format": "denoiser-manifest v1", "config": asdict(self.config),
                    "tensors": files, **(extra or {})}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return checkpoint_hash(directory)

    @classmethod
    def load(cls, directory: str | Path) -> "Denoiser":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise InputError(f"no checkpoint manifest in {directory}")
        manifest = json.loads(manifest_path.read_text())
        model = cls(DenoiserConfig(**manifest["config"]))
        with torch.no_grad():
            for name, fname in manifest["tensors"].items():
                value = load_tdump(directory / fname)
                target = model.p(name)
                if value.shape != target.shape:
                    raise ShapeError(f"checkpoint tensor {name} has shape {tuple(value.shape)}")
                target.copy_(value)
        model.requires_grad_(False)
        return model


def checkpoint_hash(directory: str | Path) -> str:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    digest = hashlib.sha256(json.dumps(manifest["config"], sort_keys=True).encode())
    for name in sorted(manifest["tensors"]):
        digest.update(name.encode())
        digest.update((directory / manifest["tensors"][name]).read_bytes())
    return digest.hexdigest()

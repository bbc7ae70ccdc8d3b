"""Mask-informed editing pipelines.

Every masked predictor evaluates two full-grid guided passes and picks each
pixel's noise from one of them according to the edit region ``A``:

* outside ``A`` the source-prompt pass whose self-attention outputs are
  replaced by those cached during inversion (``eps_bar``);
* inside ``A`` a target-prompt pass, either plain (intermediate image),
  with self-attention maps borrowed from the intermediate run (target image),
  or with source keys/values (adapter-free variant).

Generation branches use the plain empty-prompt embedding; source-faithful
branches use whatever the inversion produced (per-step embeddings after
null-text inversion).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import torch

from .adapter import Adapter, AdapterFeatures, ExternalCondition
from .denoiser import (REPLACE_SELF_KV, REPLACE_SELF_OUTPUT, REPLACE_SELF_QK, AttentionCache,
                       Denoiser, Directive, HookSet)
from .errors import ConfigError, InputError, ShapeError
from .inversion import (InversionResult, NtiConfig, direct_inversion, null_text_inversion)
from .numeric import DTYPE, RngStream, Tensor, save_tdump
from .schedule import NoiseSchedule
from .text import PromptEmbedding, TextEncoder, TokenSequence, differing_positions, splice_embedding

INIT_MODES = ("gaussian", "source_noise", "blend")
EMPTY_INTERVAL: tuple = ()


# -- masks ------------------------------------------------------------------

@dataclass(frozen=True)
class MaskRegion:
    """Edit region ``A`` as a boolean ``H x W`` grid."""

    grid: Tensor

    def __post_init__(self):
        if self.grid.dim() != 2:
            raise ShapeError("mask must be H x W")
        object.__setattr__(self, "grid", self.grid.to(torch.bool))

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.grid.shape)

    @classmethod
    def empty(cls, height: int, width: int) -> "MaskRegion":
        return cls(torch.zeros(height, width, dtype=torch.bool))

    @classmethod
    def full(cls, height: int, width: int) -> "MaskRegion":
        return cls(torch.ones(height, width, dtype=torch.bool))

    @classmethod
    def box(cls, height: int, width: int, top: int, left: int, bottom: int, right: int) -> "MaskRegion":
        """Rows ``top:bottom`` and columns ``left:right`` (exclusive ends)."""
        g = torch.zeros(height, width, dtype=torch.bool)
        g[top:bottom, left:right] = True
        return cls(g)

    def complement(self) -> "MaskRegion":
        return MaskRegion(~self.grid)

    def indicator(self) -> Tensor:
        return self.grid.to(DTYPE)

    def count(self) -> int:
        return int(self.grid.sum())

    def is_empty(self) -> bool:
        return self.count() == 0

    def is_full(self) -> bool:
        return self.count() == self.grid.numel()

    def select(self, inside: Tensor, outside: Tensor) -> Tensor:
        """Per pixel: ``inside`` where the mask is set, ``outside`` elsewhere."""
        return torch.where(self.grid, inside, outside)

    def format(self) -> str:
        H, W = self.shape
        rows = ["".join("1" if v else "0" for v in row) for row in self.grid.tolist()]
        return f"MASK v1 {H} {W}\n" + "\n".join(rows) + "\n"

    @classmethod
    def parse(cls, text: str) -> "MaskRegion":
        lines = [ln.strip() for ln in text.strip().splitlines()]
        head = lines[0].split() if lines else []
        if len(head) != 4 or head[:2] != ["MASK", "v1"]:
            raise InputError("not a MASK v1 file")
        H, W = int(head[2]), int(head[3])
        rows = lines[1:]
        if len(rows) != H or any(len(r) != W or set(r) - {"0", "1"} for r in rows):
            raise InputError(f"MASK body must be {H} lines of {W} characters from 0/1")
        return cls(torch.tensor([[c == "1" for c in r] for r in rows], dtype=torch.bool))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.format())

    @classmethod
    def load(cls, path: str | Path) -> "MaskRegion":
        return cls.parse(Path(path).read_text())


def load_condition(path: str | Path, kind: str = "sketch") -> ExternalCondition:
    """Condition grids share the mask file format."""
    return ExternalCondition(MaskRegion.load(path).indicator(), kind)


def save_condition(c: ExternalCondition, path: str | Path) -> None:
    MaskRegion(c.grid > 0.5).save(path)


# -- configuration and results --------------------------------------------

@dataclass(frozen=True)
class EditConfig:
    init_mode: str = "gaussian"
    fusion_interval: tuple | None = None  # None = every step, () = none
    layers: tuple[str, ...] | None = None  # None = all self-attention sites
    w: float = 7.5
    adapter_strength: float = 1.0
    seed: int = 0
    shared_noise: bool = True

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.w < 0:
            raise ConfigError("guidance scale must be >= 0")
        if self.adapter_strength < 0:
            raise ConfigError("adapter strength must be >= 0")
        if self.fusion_interval is not None:
            iv = tuple(int(v) for v in self.fusion_interval)
            if iv and (len(iv) != 2 or not 1 <= iv[0] <= iv[1]):
                raise ConfigError(f"fusion interval must be (a, b) with 1 <= a <= b, got {iv}")
            object.__setattr__(self, "fusion_interval", iv)
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(self.layers))

    def interval_for(self, T: int) -> tuple[int, int] | None:
        """Resolved ``(a, b)`` or ``None`` when no step is fused."""
        if self.fusion_interval is None:
            return (1, T)
        if not self.fusion_interval:
            return None
        a, b = self.fusion_interval
        if b > T:
            raise ConfigError(f"fusion interval {self.fusion_interval} exceeds T = {T}")
        return (a, b)


@dataclass
class EditResult:
    pipeline: str
    target: Tensor
    trajectory: list[Tensor]
    reference: Tensor  # source reconstruction x_0
    mask: MaskRegion
    nfe: int
    intermediate: Tensor | None = None
    intermediate_trajectory: list[Tensor] | None = None
    src_cache: AttentionCache | None = None
    t2i_cache: AttentionCache | None = None
    hat_cache: AttentionCache | None = None
    stats: dict = field(default_factory=dict)
    config: EditConfig | None = None


def region_stats(edit: Tensor, reference: Tensor, mask: MaskRegion) -> dict:
    """Mean per-pixel absolute change inside and outside the mask."""
    diff = (edit - reference).abs().mean(dim=0)
    inside = float(diff[mask.grid].mean()) if mask.count() else 0.0
    outside = float(diff[~mask.grid].mean()) if not mask.is_full() else 0.0
    return {
        "l1_inside": inside,
        "l1_outside": outside,
        "l1": float((edit - reference).abs().mean()),
        "l2": float(((edit - reference) ** 2).mean()),
        "pixels_inside": mask.count(),
    }


# -- masked noise predictors ----------------------------------------------

def _check_mask(mask: MaskRegion, x: Tensor) -> None:
    if mask.shape != tuple(x.shape[-2:]):
        raise ShapeError(f"mask {mask.shape} does not match latent grid {tuple(x.shape[-2:])}")


def _features(feats: AdapterFeatures | dict | None) -> dict | None:
    if feats is None:
        return None
    return feats.features if isinstance(feats, AdapterFeatures) else feats


def eps_bar(model: Denoiser, t: int, x: Tensor, cond_s: Tensor, null_s: Tensor, w: float,
            feats, src_cache: AttentionCache, layers=None) -> Tensor:
    """Source-prompt prediction with every self-attention output taken from
    the inversion cache."""
    hooks = HookSet((Directive(REPLACE_SELF_OUTPUT, src_cache, layers),))
    return model.predict_noise(t, x, cond_s, null_s, w, _features(feats), hooks)[0]


def masked_eps_intermediate(model: Denoiser, t: int, x: Tensor, mask: MaskRegion,
                            cond_s: Tensor, cond_t: Tensor, null_s: Tensor, null_g: Tensor,
                            w: float, feats, src_cache: AttentionCache, layers=None,
                            capture: bool = True):
    """Stitched prediction for the intermediate image.

    Returns ``(eps, branches, cache)`` where ``branches`` holds the two full
    grid predictions and ``cache`` the target-prompt pass's self-attention.
    """
    _check_mask(mask, x)
    bar = eps_bar(model, t, x, cond_s, null_s, w, feats, src_cache, layers)
    hooks = HookSet(capture=("self",)) if capture else None
    gen, cache = model.predict_noise(t, x, cond_t, null_g, w, _features(feats), hooks)
    return mask.select(gen, bar), {"bar": bar, "gen": gen}, cache


def masked_eps_target(model: Denoiser, t: int, x: Tensor, mask: MaskRegion,
                      cond_s: Tensor, cond_t: Tensor, null_s: Tensor, null_g: Tensor,
                      w: float, feats, src_cache: AttentionCache, t2i_cache: AttentionCache,
                      layers=None, capture: bool = False):
    """Stitched prediction for the target image; inside the mask the
    self-attention maps come from the intermediate run and only the values
    are live."""
    _check_mask(mask, x)
    bar = eps_bar(model, t, x, cond_s, null_s, w, feats, src_cache, layers)
    hooks = HookSet((Directive(REPLACE_SELF_QK, t2i_cache, layers),), ("self",) if capture else ())
    hat, cache = model.predict_noise(t, x, cond_t, null_g, w, _features(feats), hooks)
    return mask.select(hat, bar), {"bar": bar, "hat": hat}, cache


def masked_eps_without_adapter(model: Denoiser, t: int, x: Tensor, mask: MaskRegion,
                               cond_s: Tensor, cond_t: Tensor, null_s: Tensor, null_g: Tensor,
                               w: float, src_cache: AttentionCache, layers=None):
    """Adapter-free stitch: target queries against source keys and values
    inside the mask, the cached-output source pass outside."""
    _check_mask(mask, x)
    bar = eps_bar(model, t, x, cond_s, null_s, w, None, src_cache, layers)
    hooks = HookSet((Directive(REPLACE_SELF_KV, src_cache, layers),))
    hat = model.predict_noise(t, x, cond_t, null_g, w, None, hooks)[0]
    return mask.select(hat, bar), {"bar": bar, "hat": hat}


# -- pipelines ----------------------------------------------------------------

def _matrix(c: PromptEmbedding | Tensor) -> Tensor:
    return c.matrix if isinstance(c, PromptEmbedding) else c


def initial_noise(cfg: EditConfig, shape) -> tuple[Tensor, Tensor]:
    """Gaussian draws for the intermediate and the target initialisations."""
    rng = RngStream(cfg.seed)
    x = rng.normal(*shape)
    return x, (x if cfg.shared_noise else rng.normal(*shape))


def adapter_features(adapter: Adapter | None, condition: ExternalCondition | None,
                     strength: float) -> AdapterFeatures | None:
    if adapter is None or condition is None:
        return None
    return adapter.encode_condition(condition, strength)


def _warn_full(mask: MaskRegion) -> None:
    if mask.is_full():
        warnings.warn("edit region covers the whole grid; nothing of the source is preserved",
                      stacklevel=3)


def generate_intermediate(model: Denoiser, inv: InversionResult, mask: MaskRegion,
                          cond_s, cond_t, feats, cfg: EditConfig,
                          noise: Tensor | None = None) -> tuple[list[Tensor], AttentionCache]:
    """Adapter-guided intermediate run; returns its trajectory and the
    target-prompt self-attention cache of every step."""
    s = inv.schedule
    cond_s, cond_t = _matrix(cond_s), _matrix(cond_t)
    if noise is None:
        noise = initial_noise(cfg, inv.x_T.shape)[0]
    x_src = inv.x_T
    x = {"gaussian": noise, "source_noise": x_src, "blend": mask.select(noise, x_src)}[cfg.init_mode]
    traj = [None] * (s.T + 1)
    traj[s.T] = x
    cache = AttentionCache()
    with torch.no_grad():
        for t in range(s.T, 0, -1):
            eps, _, step_cache = masked_eps_intermediate(
                model, s.timesteps[t], x, mask, cond_s, cond_t, inv.null_at(t), inv.null,
                cfg.w, feats, inv.cache, cfg.layers)
            cache.merge(step_cache)
            x = inv.step(x, eps, t)
            traj[t - 1] = x
    return traj, cache.freeze()


def generate_target(model: Denoiser, inv: InversionResult, mask: MaskRegion, cond_s, cond_t,
                    feats, t2i_cache: AttentionCache, cfg: EditConfig,
                    noise: Tensor | None = None, capture: bool = False) -> EditResult:
    """Fusion run from ``1_{A^c} x_T^S + 1_A x``."""
    s = inv.schedule
    cond_s, cond_t = _matrix(cond_s), _matrix(cond_t)
    if noise is None:
        noise = initial_noise(cfg, inv.x_T.shape)[1]
    start = model.nfe
    x = mask.select(noise, inv.x_T)
    traj = [None] * (s.T + 1)
    traj[s.T] = x
    hat_cache = AttentionCache() if capture else None
    with torch.no_grad():
        for t in range(s.T, 0, -1):
            eps, _, step_cache = masked_eps_target(
                model, s.timesteps[t], x, mask, cond_s, cond_t, inv.null_at(t), inv.null,
                cfg.w, feats, inv.cache, t2i_cache, cfg.layers, capture)
            if capture:
                hat_cache.merge(step_cache)
            x = inv.step(x, eps, t)
            traj[t - 1] = x
    ref = inv.source_reconstruction()[0]
    return EditResult("masafusion", x, traj, ref, mask, model.nfe - start,
                      src_cache=inv.cache, t2i_cache=t2i_cache,
                      hat_cache=hat_cache.freeze() if capture else None,
                      stats=region_stats(x, ref, mask), config=cfg)


def invert(model: Denoiser, x0: Tensor, cond, null, kind: str, schedule: NoiseSchedule,
           nti: NtiConfig | None = None, w: float = 7.5) -> InversionResult:
    cond, null = _matrix(cond), _matrix(null)
    if kind == "nti":
        return null_text_inversion(model, x0, cond, null, nti or NtiConfig(w=w), schedule)
    if kind == "di":
        return direct_inversion(model, x0, cond, null, schedule, w)
    raise ConfigError(f"inversion kind must be 'nti' or 'di', got {kind!r}")


def masafusion_edit(model: Denoiser, adapter: Adapter | None, x0: Tensor | None, cond_s, cond_t,
                    mask: MaskRegion, condition: ExternalCondition | None, kind: str,
                    cfg: EditConfig, null=None, schedule: NoiseSchedule | None = None,
                    nti: NtiConfig | None = None, inversion: InversionResult | None = None,
                    capture: bool = False) -> EditResult:
    """Invert, generate the adapter-guided intermediate image, then fuse.

    Pass a finished ``inversion`` to skip the first stage (its cost is then
    not counted in ``nfe``).
    """
    _warn_full(mask)
    start = model.nfe
    if inversion is None:
        if x0 is None or null is None or schedule is None:
            raise ConfigError("x0, null and schedule are required when no inversion is given")
        inversion = invert(model, x0, cond_s, null, kind, schedule, nti, cfg.w)
    if condition is not None and adapter is not None and condition.grid.shape != mask.shape:
        raise ShapeError("condition and mask grids differ")
    feats = adapter_features(adapter, condition, cfg.adapter_strength)
    x_gen, x_tgt = initial_noise(cfg, inversion.x_T.shape)
    traj, t2i = generate_intermediate(model, inversion, mask, cond_s, cond_t, feats, cfg, x_gen)
    result = generate_target(model, inversion, mask, cond_s, cond_t, feats, t2i, cfg, x_tgt, capture)
    result.intermediate = traj[0]
    result.intermediate_trajectory = traj
    result.nfe = model.nfe - start
    return result


def generate_plain(model: Denoiser, inv: InversionResult, cond, w: float,
                   null: Tensor | None = None, x_T: Tensor | None = None) -> list[Tensor]:
    """Guided DDIM from ``x_T`` (default ``x_T^S``) with one prompt and no hooks.
    ``null=None`` means the inversion's source-faithful embeddings."""
    s = inv.schedule
    cond = _matrix(cond)
    x = inv.x_T if x_T is None else x_T
    traj = [None] * (s.T + 1)
    traj[s.T] = x
    with torch.no_grad():
        for t in range(s.T, 0, -1):
            n = inv.null_at(t) if null is None else null
            eps, _ = model.predict_noise(s.timesteps[t], x, cond, n, w)
            x = inv.step(x, eps, t)
            traj[t - 1] = x
    return traj


def edit_without_adapter(model: Denoiser, inv: InversionResult, cond_s, cond_t,
                         mask: MaskRegion, cfg: EditConfig) -> EditResult:
    """Fusion without an external condition, starting from ``x_T^S``.

    Inside the fusion interval the mask interior attends with target queries
    to source keys/values and the exterior follows the cached-output source
    pass; outside it the target prompt runs unhooked.
    """
    _warn_full(mask)
    s = inv.schedule
    cond_s, cond_t = _matrix(cond_s), _matrix(cond_t)
    interval = cfg.interval_for(s.T)
    start = model.nfe
    x = inv.x_T
    traj = [None] * (s.T + 1)
    traj[s.T] = x
    with torch.no_grad():
        for t in range(s.T, 0, -1):
            if interval is not None and interval[0] <= t <= interval[1]:
                eps, _ = masked_eps_without_adapter(
                    model, s.timesteps[t], x, mask, cond_s, cond_t, inv.null_at(t), inv.null,
                    cfg.w, inv.cache, cfg.layers)
            else:
                eps, _ = model.predict_noise(s.timesteps[t], x, cond_t, inv.null, cfg.w)
            x = inv.step(x, eps, t)
            traj[t - 1] = x
    ref = inv.source_reconstruction()[0]
    return EditResult("no-adapter", x, traj, ref, mask, model.nfe - start, src_cache=inv.cache,
                      stats=region_stats(x, ref, mask), config=cfg)


def embctrl_edit(model: Denoiser, encoder: TextEncoder, inv: InversionResult,
                 src: TokenSequence | str, tgt: TokenSequence | str,
                 edited: Iterable[int] | None, cfg: EditConfig,
                 mask: MaskRegion | None = None) -> EditResult:
    """Regenerate from ``x_T^S`` under the source embedding with only the
    ``edited`` rows (default: positions whose tokens differ) taken from the
    target embedding."""
    src = encoder.tokenize(src) if isinstance(src, str) else src
    tgt = encoder.tokenize(tgt) if isinstance(tgt, str) else tgt
    if len(src) != len(tgt):
        raise ConfigError("source and target token sequences must have equal length")
    if edited is None:
        edited = differing_positions(src, tgt)
    spliced = splice_embedding(encoder.encode(src), encoder.encode(tgt), edited)
    start = model.nfe
    traj = generate_plain(model, inv, spliced.matrix, cfg.w)
    H, W = inv.x_T.shape[-2:]
    mask = mask or MaskRegion.empty(H, W)
    ref = inv.source_reconstruction()[0]
    return EditResult("embctrl", traj[0], traj, ref, mask, model.nfe - start,
                      stats=region_stats(traj[0], ref, mask), config=cfg)


# -- persistence ----------------------------------------------------------

def save_cache(cache: AttentionCache, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for (t, layer, kind), rec in sorted(cache.items()):
        stem = f"t{t:04d}_{layer}_{kind}"
        for name in ("q", "k", "v", "p", "out"):
            save_tdump(getattr(rec, name), directory / f"{stem}_{name}.tdump")
        index.append({"t": t, "layer": layer, "kind": kind, "stem": stem})
    (directory / "index.json").write_text(json.dumps({"branches": list(cache.branches),
                                                      "entries": index}, indent=2))


def save_edit_result(result: EditResult, directory: str | Path, extra: dict | None = None,
                     caches: bool = False) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tdump(result.target, directory / "target.tdump")
    save_tdump(result.reference, directory / "reference.tdump")
    if result.intermediate is not None:
        save_tdump(result.intermediate, directory / "intermediate.tdump")
    result.mask.save(directory / "mask.txt")
    if caches:
        for name in ("src_cache", "t2i_cache"):
            cache = getattr(result, name)
            if cache is not None:
                save_cache(cache, directory / name)
    manifest = {
        "format": "edit v1",
        "pipeline": result.pipeline,
        "nfe": result.nfe,
        "stats": result.stats,
        "config": asdict(result.config) if result.config else None,
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))

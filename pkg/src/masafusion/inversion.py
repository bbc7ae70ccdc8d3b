"""DDIM inversion, null-text inversion and direct inversion.

All three start from the same w=1 inversion pass. Null-text inversion then
tunes one unconditional embedding per step so that guided sampling retraces
that pass; direct inversion skips the optimisation, runs one guided pass on
the pivot states and keeps the per-step residual so the source branch lands
back on the pivot exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .denoiser import AttentionCache, Denoiser, HookSet
from .errors import ConfigError, DivergenceError, InputError
from .numeric import GradientTape, Tensor, grad, load_tdump, save_tdump
from .schedule import NoiseSchedule, ddim_invert_step, ddim_step

KINDS = ("ddim", "nti", "di")


@dataclass(frozen=True)
class NtiConfig:
    steps: int = 10
    lr: float = 2e-4
    w: float = 7.5

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("NTI needs at least one inner step")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError("NTI learning rate must be positive")
        if self.w < 0:
            raise ConfigError("guidance scale must be >= 0")


@dataclass
class InversionResult:
    """Output of one inversion run.

    Lists indexed by step hold entry ``t`` at position ``t`` (trajectories,
    length T+1) or ``t - 1`` (per-step quantities, length T).
    """

    kind: str
    schedule: NoiseSchedule
    cond: Tensor
    null: Tensor
    w: float
    trajectory: list[Tensor]
    cache: AttentionCache
    nfe: int
    null_schedule: list[Tensor] | None = None
    offsets: list[Tensor] | None = None
    reconstruction: list[Tensor] | None = None
    objectives: dict[int, list[float]] = field(default_factory=dict)
    restarts: list[int] = field(default_factory=list)

    @property
    def x_T(self) -> Tensor:
        return self.trajectory[-1]

    @property
    def T(self) -> int:
        return self.schedule.T

    def null_at(self, t: int) -> Tensor:
        """Unconditional embedding for source-faithful passes at step ``t``."""
        return self.null if self.null_schedule is None else self.null_schedule[t - 1]

    def offset_at(self, t: int) -> Tensor | None:
        return None if self.offsets is None else self.offsets[t - 1]

    def step(self, x: Tensor, eps: Tensor, t: int) -> Tensor:
        """DDIM step used by every generation pass built on this inversion."""
        out = ddim_step(x, eps, t, self.schedule)
        delta = self.offset_at(t)
        return out if delta is None else out + delta

    def source_reconstruction(self) -> list[Tensor]:
        return self.reconstruction if self.reconstruction is not None else self.trajectory


def ddim_inversion(model: Denoiser, x0: Tensor, cond: Tensor, s: NoiseSchedule,
                   null: Tensor | None = None) -> InversionResult:
    """Invert ``x0`` at w=1; the unconditional branch is never evaluated."""
    _check_latent(model, x0)
    null = torch.zeros_like(cond) if null is None else null
    start = model.nfe
    traj = [x0.clone()]
    with torch.no_grad():
        for t in range(1, s.T + 1):
            eps, _ = model.predict_noise(s.timesteps[t], traj[-1], cond, null, 1.0)
            traj.append(ddim_invert_step(traj[-1], eps, t, s))
    return InversionResult("ddim", s, cond, null, 1.0, traj, AttentionCache(), model.nfe - start)


def nti_objective(model: Denoiser, t: int, x_hat: Tensor, target: Tensor, cond: Tensor,
                  null: Tensor, w: float, s: NoiseSchedule,
                  hooks: HookSet | None = None) -> tuple[Tensor, Tensor, AttentionCache]:
    """Squared distance between the pivot ``target`` and one guided DDIM step
    from ``x_hat``. Returns ``(objective, stepped latent, cache)``."""
    eps, cache = model.predict_noise(s.timesteps[t], x_hat, cond, null, w, hooks=hooks)
    stepped = ddim_step(x_hat, eps, t, s)
    return ((target - stepped) ** 2).sum(), stepped, cache


def nti_gradient(model: Denoiser, t: int, x_hat: Tensor, target: Tensor, cond: Tensor,
                 null: Tensor, w: float, s: NoiseSchedule) -> tuple[float, Tensor]:
    with GradientTape() as tape:
        leaf = tape.watch(null)
        value, _, _ = nti_objective(model, t, x_hat, target, cond, leaf, w, s)
        (g,) = grad(tape, value)
    return float(value.detach()), g


def _inner_loop(model, t, x_hat, target, cond, null, cfg, lr, s, may_abort=True):
    """``cfg.steps`` descent steps; returns (null, trace, restart_needed).
    With ``may_abort`` three consecutive rises stop the loop early."""
    trace, rising = [], 0
    for _ in range(cfg.steps):
        value, g = nti_gradient(model, t, x_hat, target, cond, null, cfg.w, s)
        if not math.isfinite(value):
            raise DivergenceError(f"NTI objective is non-finite at step {t}", t)
        if trace and value > trace[-1]:
            rising += 1
            if rising >= 3 and may_abort:
                return null, trace + [value], True
        else:
            rising = 0
        trace.append(value)
        null = null - lr * g
    return null, trace, False


def null_text_inversion(model: Denoiser, x0: Tensor, cond: Tensor, null: Tensor,
                        cfg: NtiConfig, s: NoiseSchedule,
                        capture: tuple[str, ...] = ("self",)) -> InversionResult:
    """Per-step optimisation of the unconditional embedding.

    Each step runs ``cfg.steps`` gradient steps (one guided evaluation each)
    and a final guided evaluation that scores the tuned embedding, advances
    the reconstruction and captures attention. If the objective rises three
    times in a row the step restarts once with half the learning rate.
    """
    inv = ddim_inversion(model, x0, cond, s, null)
    start = model.nfe - inv.nfe
    cache = AttentionCache()
    hooks = HookSet(capture=capture)
    x_hat = inv.x_T.clone()
    recon = [None] * (s.T + 1)
    recon[s.T] = x_hat
    nulls: list[Tensor | None] = [None] * s.T
    objectives: dict[int, list[float]] = {}
    restarts = []
    current = null.clone()
    for t in range(s.T, 0, -1):
        target = inv.trajectory[t - 1]
        tuned, trace, restart = _inner_loop(model, t, x_hat, target, cond, current, cfg, cfg.lr, s)
        if restart:
            restarts.append(t)
            tuned, trace, _ = _inner_loop(model, t, x_hat, target, cond, current, cfg, cfg.lr / 2, s,
                                          may_abort=False)
        with torch.no_grad():
            value, x_hat, step_cache = nti_objective(model, t, x_hat, target, cond, tuned, cfg.w, s, hooks)
        if not math.isfinite(float(value)):
            raise DivergenceError(f"NTI objective is non-finite at step {t}", t)
        objectives[t] = trace + [float(value)]
        cache.merge(step_cache)
        nulls[t - 1] = tuned.detach()
        recon[t - 1] = x_hat
        current = tuned.detach()  # warm start for the next step
    return InversionResult("nti", s, cond, null, cfg.w, inv.trajectory, cache.freeze(),
                           model.nfe - start, null_schedule=nulls, reconstruction=recon,
                           objectives=objectives, restarts=restarts)


def direct_inversion(model: Denoiser, x0: Tensor, cond: Tensor, null: Tensor, s: NoiseSchedule,
                     w: float = 7.5, capture: tuple[str, ...] = ("self",)) -> InversionResult:
    """One guided pass on the pivot states, capturing attention and the
    residual ``x_{t-1} - DDIM(x_t)`` of every step."""
    inv = ddim_inversion(model, x0, cond, s, null)
    start = model.nfe - inv.nfe
    cache = AttentionCache()
    hooks = HookSet(capture=capture)
    offsets: list[Tensor | None] = [None] * s.T
    with torch.no_grad():
        for t in range(s.T, 0, -1):
            x_t = inv.trajectory[t]
            eps, step_cache = model.predict_noise(s.timesteps[t], x_t, cond, null, w, hooks=hooks)
            cache.merge(step_cache)
            offsets[t - 1] = inv.trajectory[t - 1] - ddim_step(x_t, eps, t, s)
    return InversionResult("di", s, cond, null, w, inv.trajectory, cache.freeze(),
                           model.nfe - start, offsets=offsets)


def reconstruct(model: Denoiser, x_T: Tensor, cond: Tensor, nulls, w: float,
                s: NoiseSchedule) -> list[Tensor]:
    """Guided DDIM trajectory from ``x_T``; ``nulls`` is one embedding or a
    per-step list indexed by ``t - 1``."""
    traj = [None] * (s.T + 1)
    traj[s.T] = x_T
    x = x_T
    with torch.no_grad():
        for t in range(s.T, 0, -1):
            null = nulls[t - 1] if isinstance(nulls, (list, tuple)) else nulls
            eps, _ = model.predict_noise(s.timesteps[t], x, cond, null, w)
            x = ddim_step(x, eps, t, s)
            traj[t - 1] = x
    return traj


def relative_error(a: Tensor, b: Tensor) -> float:
    return float(torch.linalg.norm(a - b) / torch.linalg.norm(b))


def _check_latent(model: Denoiser, x: Tensor) -> None:
    cfg = model.config
    if tuple(x.shape) != (cfg.channels, cfg.height, cfg.width):
        raise InputError(f"latent shape {tuple(x.shape)} does not match the denoiser grid")


# -- persistence ----------------------------------------------------------

def save_inversion(result: InversionResult, directory: str | Path, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, x in enumerate(result.trajectory):
        save_tdump(x, directory / f"x_{t:04d}.tdump")
    save_tdump(result.cond, directory / "cond.tdump")
    save_tdump(result.null, directory / "null.tdump")
    save_tdump(result.schedule.alpha_bar, directory / "alpha_bar.tdump")
    if result.null_schedule is not None:
        for t, n in enumerate(result.null_schedule, start=1):
            save_tdump(n, directory / f"null_{t:04d}.tdump")
    if result.offsets is not None:
        for t, d in enumerate(result.offsets, start=1):
            save_tdump(d, directory / f"offset_{t:04d}.tdump")
    if result.reconstruction is not None:
        for t, x in enumerate(result.reconstruction):
            save_tdump(x, directory / f"recon_{t:04d}.tdump")
    manifest = {
        "format": "inversion v1",
        "kind": result.kind,
        "T": result.T,
        "w": result.w,
        "nfe": result.nfe,
        "timesteps": list(result.schedule.timesteps),
        "objectives": {str(t): v for t, v in sorted(result.objectives.items())},
        "restarts": result.restarts,
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_inversion(directory: str | Path) -> InversionResult:
    """Reload a saved run; the attention cache is not persisted."""
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise InputError(f"no inversion manifest in {directory}")
    m = json.loads(path.read_text())
    T = m["T"]
    s = NoiseSchedule(load_tdump(directory / "alpha_bar.tdump"), tuple(m["timesteps"]))

    def series(prefix, start, stop):
        files = [directory / f"{prefix}_{t:04d}.tdump" for t in range(start, stop)]
        return [load_tdump(f) for f in files] if files[0].exists() else None

    return InversionResult(
        kind=m["kind"], schedule=s, cond=load_tdump(directory / "cond.tdump"),
        null=load_tdump(directory / "null.tdump"), w=m["w"],
        trajectory=series("x", 0, T + 1), cache=AttentionCache().freeze(), nfe=m["nfe"],
        null_schedule=series("null", 1, T + 1), offsets=series("offset", 1, T + 1),
        reconstruction=series("recon", 0, T + 1),
        objectives={int(k): v for k, v in m["objectives"].items()}, restarts=m["restarts"],
    )

"""Tensor plumbing: float64 torch tensors, attention, a counter-based RNG,
a gradient tape over torch autograd, and the TDUMP text format."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError, InputError, ShapeError

DTYPE = torch.float64
Tensor = torch.Tensor


def as_tensor(data) -> Tensor:
    """Copy `data` into a fresh float64 tensor."""
    if isinstance(data, torch.Tensor):
        return data.detach().to(DTYPE).clone()
    return torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not bool(torch.isfinite(x).all()):
        raise InputError(f"{what} contains non-finite entries")
    return x


def softmax_rows(m: Tensor) -> Tensor:
    if m.dim() != 2:
        raise ShapeError(f"softmax_rows expects a rank-2 tensor, got shape {tuple(m.shape)}")
    return _softmax_last(m)


def _softmax_last(m: Tensor) -> Tensor:
    # torch subtracts the row max internally
    return torch.softmax(m, dim=-1)


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention returning ``(output, probability map)``.

    Accepts rank-2 ``(N, d)`` inputs or any matching leading batch dimensions.
    """
    if q.dim() < 2 or k.dim() != q.dim() or v.dim() != q.dim():
        raise ShapeError("attention inputs must share rank >= 2")
    d = q.shape[-1]
    if d == 0:
        raise ShapeError("attention needs a positive head dimension")
    if k.shape[-1] != d:
        raise ShapeError(f"query width {d} does not match key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("keys and values must have the same number of rows")
    probs = _softmax_last(q @ k.transpose(-1, -2) / math.sqrt(d))
    return probs @ v, probs


def apply_map(probs: Tensor, v: Tensor) -> Tensor:
    """Attention output for a precomputed probability map."""
    if probs.shape[-1] != v.shape[-2]:
        raise ShapeError("probability map columns must match value rows")
    return probs @ v


@dataclass
class RngStream:
    """Counter-based Gaussian source.

    Raw 64-bit words come from a Philox-4x64 generator keyed by ``seed`` and
    positioned at block ``counter``; each block yields four words. A word ``r``
    maps to the uniform ``((r >> 11) + 0.5) * 2**-53`` and consecutive uniform
    pairs ``(u1, u2)`` become ``sqrt(-2 ln u1) * (cos 2πu2, sin 2πu2)``.
    Every draw advances ``counter`` by the number of blocks consumed.
    """

    seed: int
    counter: int = 0

    def _raw(self, nblocks: int) -> np.ndarray:
        gen = np.random.Philox(key=self.seed, counter=[self.counter, 0, 0, 0])
        return gen.random_raw(4 * nblocks)

    def uniform(self, n: int) -> np.ndarray:
        nblocks = -(-n // 4)
        raw = self._raw(nblocks)
        self.counter += nblocks
        return (((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53)[:n]

    def normal(self, *shape: int) -> Tensor:
        n = math.prod(shape)
        npairs = -(-n // 2)
        u = self.uniform(2 * npairs).reshape(npairs, 2)
        radius = np.sqrt(-2.0 * np.log(u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).reshape(-1)
        return torch.from_numpy(z[:n].copy()).reshape(shape)

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, offset: int) -> "RngStream":
        return RngStream(seed=(self.seed * 1_000_003 + offset) % 2**63, counter=0)


@dataclass
class GradientTape:
    """Records differentiable inputs; ``grad`` replays the recorded graph backward."""

    watched: list[Tensor] = field(default_factory=list)
    _prev: bool = False

    def watch(self, x: Tensor) -> Tensor:
        leaf = x.detach().clone().requires_grad_(True)
        self.watched.append(leaf)
        return leaf

    def __enter__(self) -> "GradientTape":
        self._prev = torch.is_grad_enabled()
        torch.set_grad_enabled(True)
        return self

    def __exit__(self, *exc) -> None:
        torch.set_grad_enabled(self._prev)


def grad(tape: GradientTape, output: Tensor) -> list[Tensor]:
    if output.numel() != 1:
        raise ContractError(f"grad needs a scalar output, got shape {tuple(output.shape)}")
    if not tape.watched:
        return []
    if not output.requires_grad:
        return [torch.zeros_like(w) for w in tape.watched]
    grads = torch.autograd.grad(output.reshape(()), tape.watched, allow_unused=True)
    return [torch.zeros_like(w) if g is None else g.detach() for w, g in zip(tape.watched, grads)]


@contextmanager
def no_grad():
    with torch.no_grad():
        yield


# -- TDUMP -------------------------------------------------------------------

TDUMP_MAGIC = "TDUMP v1"


def format_tdump(x: Tensor) -> str:
    x = x.detach().to(DTYPE)
    header = f"{TDUMP_MAGIC} {x.dim()}" + "".join(f" {n}" for n in x.shape)
    flat = x.reshape(-1).numpy()
    lines = [header]
    for start in range(0, flat.size, 8):
        lines.append(" ".join(f"{v:.9g}" for v in flat[start:start + 8]))
    return "\n".join(lines) + "\n"


def parse_tdump(text: str) -> Tensor:
    head, _, body = text.partition("\n")
    parts = head.split()
    if len(parts) < 3 or " ".join(parts[:2]) != TDUMP_MAGIC:
        raise InputError("not a TDUMP v1 stream")
    rank = int(parts[2])
    shape = [int(p) for p in parts[3:]]
    if len(shape) != rank:
        raise InputError(f"TDUMP header declares rank {rank} but lists {len(shape)} extents")
    values = np.array(body.split(), dtype=np.float64)
    if values.size != math.prod(shape):
        raise InputError(f"TDUMP body has {values.size} values, expected {math.prod(shape)}")
    return torch.from_numpy(values).reshape(shape)


def save_tdump(x: Tensor, path: str | Path) -> None:
    Path(path).write_text(format_tdump(x))


def load_tdump(path: str | Path) -> Tensor:
    return parse_tdump(Path(path).read_text())

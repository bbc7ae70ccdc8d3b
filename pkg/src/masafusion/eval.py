"""Edit-quality metrics and the average-rank comparison table."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .errors import ContractError, InputError, ShapeError
from .numeric import DTYPE, RngStream, Tensor

METRICS = ("l1", "l2", "clip_i", "dino", "clip_t")
LOWER_IS_BETTER = {"l1": True, "l2": True, "clip_i": False, "dino": False, "clip_t": False}
CSV_HEADER = ("method",) + METRICS


def pixel_distance(a: Tensor, b: Tensor, order: int = 1) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if order == 1:
        return float((a - b).abs().mean())
    if order == 2:
        return float(((a - b) ** 2).mean())
    raise ContractError(f"order must be 1 or 2, got {order}")


# -- feature analogs --------------------------------------------------------

FEATURE_DIM = 32
_SEEDS = {"image_analog": 501, "dino_analog": 502, "prompt_analog": 503}


class FeatureExtractor:
    """Fixed random linear embedding. ``dino_analog`` first averages 2x2
    patches; ``prompt_analog`` maps images and prompt embeddings into one
    space through two separate matrices."""

    def __init__(self, kind: str, seed: int | None = None):
        if kind not in _SEEDS:
            raise ContractError(f"unknown extractor {kind!r}; expected one of {tuple(_SEEDS)}")
        self.kind = kind
        self.seed = _SEEDS[kind] if seed is None else seed
        self._mats: dict[tuple, Tensor] = {}

    def _matrix(self, tag: str, n: int) -> Tensor:
        key = (tag, n)
        if key not in self._mats:
            offset = {"image": 0, "prompt": 1}[tag]
            rng = RngStream(self.seed).spawn(offset * 1_000_000 + n)
            self._mats[key] = rng.normal(FEATURE_DIM, n) / math.sqrt(n)
        return self._mats[key]

    def embed_image(self, image: Tensor) -> Tensor:
        if image.dim() != 3:
            raise ShapeError("images must be (C, H, W)")
        x = image.to(DTYPE)
        if self.kind == "dino_analog":
            x = torch.nn.functional.avg_pool2d(x[None], 2, ceil_mode=True)[0]
        flat = x.reshape(-1)
        return self._matrix("image", flat.numel()) @ flat

    def embed_prompt(self, prompt: Tensor) -> Tensor:
        if self.kind != "prompt_analog":
            raise ContractError(f"{self.kind} does not embed prompts")
        if prompt.dim() != 2:
            raise ShapeError("prompt embeddings must be L x d")
        flat = prompt.to(DTYPE).reshape(-1)
        return self._matrix("prompt", flat.numel()) @ flat


def cosine(u: Tensor, v: Tensor) -> float:
    nu, nv = float(torch.linalg.norm(u)), float(torch.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ContractError("similarity is undefined for a zero-norm embedding")
    return max(-1.0, min(1.0, float(u @ v) / (nu * nv)))


def feature_similarity(a: Tensor, b: Tensor, extractor: str | FeatureExtractor = "image_analog") -> float:
    """Cosine similarity of toy embeddings. For ``prompt_analog`` ``a`` is an
    image and ``b`` a prompt-embedding matrix unless both are images."""
    ex = extractor if isinstance(extractor, FeatureExtractor) else FeatureExtractor(extractor)
    ea = ex.embed_image(a)
    eb = ex.embed_prompt(b) if (ex.kind == "prompt_analog" and b.dim() == 2) else ex.embed_image(b)
    return cosine(ea, eb)


# -- rank table -------------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    method: str
    l1: float
    l2: float
    clip_i: float
    dino: float
    clip_t: float

    def __post_init__(self):
        for m in METRICS:
            if not math.isfinite(getattr(self, m)):
                raise InputError(f"{self.method}: {m} is not finite")

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, m) for m in METRICS)


def round_half_up(x: float, places: int = 1) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class RankTable:
    methods: tuple[str, ...]
    ranks: dict[str, dict[str, float]]  # metric -> method -> rank
    mean: dict[str, float]  # unrounded average rank

    def average(self, method: str) -> float:
        return round_half_up(self.mean[method], 1)

    def best(self) -> list[str]:
        low = min(self.average(m) for m in self.methods)
        return [m for m in self.methods if self.average(m) == low]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("method",) + METRICS + ("ave_rank",))
        for m in self.methods:
            w.writerow([m] + [_fmt_rank(self.ranks[k][m]) for k in METRICS] + [f"{self.average(m):.1f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len("method"), *(len(m) for m in self.methods))
        head = f"{'method':<{width}}" + "".join(f"{k:>8}" for k in METRICS) + f"{'ave':>7}"
        lines = [head, "-" * len(head)]
        best = set(self.best())
        for m in self.methods:
            mark = " *" if m in best else ""
            lines.append(f"{m:<{width}}" + "".join(f"{_fmt_rank(self.ranks[k][m]):>8}" for k in METRICS)
                         + f"{self.average(m):>7.1f}{mark}")
        return "\n".join(lines) + "\n"


def _fmt_rank(r: float) -> str:
    return str(int(r)) if float(r).is_integer() else f"{r:g}"


def rank_table(rows: list[MetricRow]) -> RankTable:
    """Rank every metric (1 = best, ties share the mean position) and average
    the five ranks per method."""
    if not rows:
        raise InputError("rank_table needs at least one row")
    names = [r.method for r in rows]
    if len(set(names)) != len(names):
        raise InputError("method names must be unique")
    ranks: dict[str, dict[str, float]] = {}
    for k in METRICS:
        col = np.array([getattr(r, k) for r in rows], dtype=np.float64)
        if not LOWER_IS_BETTER[k]:
            col = -col
        ranks[k] = dict(zip(names, (float(v) for v in rankdata(col, method="average"))))
    mean = {n: sum(ranks[k][n] for k in METRICS) / len(METRICS) for n in names}
    return RankTable(tuple(names), ranks, mean)


def parse_rows(text: str) -> list[MetricRow]:
    """Parse a metric CSV; errors name the offending line."""
    reader = csv.reader(io.StringIO(text))
    rows = []
    for lineno, rec in enumerate(reader, start=1):
        if not rec or all(not c.strip() for c in rec):
            continue
        if lineno == 1:
            if tuple(c.strip() for c in rec) != CSV_HEADER:
                raise InputError(f"line 1: expected header {','.join(CSV_HEADER)}")
            continue
        if len(rec) != len(CSV_HEADER):
            raise InputError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(rec)}")
        try:
            values = [float(c) for c in rec[1:]]
        except ValueError:
            raise InputError(f"line {lineno}: non-numeric metric value") from None
        try:
            rows.append(MetricRow(rec[0].strip(), *values))
        except InputError as e:
            raise InputError(f"line {lineno}: {e}") from None
    if not rows and not text.strip():
        raise InputError("line 1: empty CSV")
    return rows


def read_rows(path: str | Path) -> list[MetricRow]:
    return parse_rows(Path(path).read_text())


def format_rows(rows: list[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.method] + [repr(v) for v in r.values()])
    return buf.getvalue()


def write_rows(rows: list[MetricRow], path: str | Path) -> None:
    Path(path).write_text(format_rows(rows))


def metric_row(method: str, edit: Tensor, target: Tensor, prompt: Tensor) -> MetricRow:
    """All five metrics for one edit against its ground-truth target."""
    return MetricRow(
        method,
        pixel_distance(edit, target, 1),
        pixel_distance(edit, target, 2),
        feature_similarity(edit, target, "image_analog"),
        feature_similarity(edit, target, "dino_analog"),
        feature_similarity(edit, prompt, "prompt_analog"),
    )

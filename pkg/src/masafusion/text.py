"""Toy causal prompt encoder.

Every output row mixes information only from its own and earlier token
positions, so changing one word perturbs all rows after it. That drift is
what embedding splicing corrects for.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .errors import ContractError, EncodingError
from .numeric import DTYPE, RngStream, Tensor

BOS = "<|startoftext|>"
EOT = "<|endoftext|>"

SHAPES = ("square", "circle", "triangle", "cross")
POSITIONS = ("left", "right")
SHADES = ("dark", "light")
DEFAULT_WORDS = (BOS, EOT) + SHAPES + POSITIONS + SHADES


class Vocabulary:
    def __init__(self, words: Sequence[str] = DEFAULT_WORDS):
        words = list(words)
        if len(set(words)) != len(words):
            raise EncodingError("vocabulary entries must be unique")
        for special in (BOS, EOT):
            if special not in words:
                raise EncodingError(f"vocabulary is missing {special}")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eot(self) -> int:
        return self.index[EOT]

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n")

    def tokenize(self, prompt: str, length: int = 8) -> "TokenSequence":
        ids = [self.bos]
        for word in prompt.split():
            if word not in self.index:
                raise EncodingError(f"unknown word {word!r}")
            ids.append(self.index[word])
        if len(ids) > length:
            raise EncodingError(f"prompt {prompt!r} needs {len(ids)} tokens, limit is {length}")
        content = len(ids)
        ids += [self.eot] * (length - content)
        return TokenSequence(tuple(ids), content)

    def decode(self, seq: "TokenSequence") -> str:
        return " ".join(self.words[i] for i in seq.ids[1:seq.content_length])


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    content_length: int

    def __post_init__(self):
        if not 1 <= self.content_length <= len(self.ids):
            raise EncodingError("content length must lie in [1, L]")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class PromptEmbedding:
    matrix: Tensor
    tokens: TokenSequence | None = None

    @property
    def length(self) -> int:
        return self.matrix.shape[0]


def _layer_norm(x: Tensor) -> Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + 1e-5)


class TextEncoder:
    """Two causal attention blocks over token and position embeddings, fixed random weights."""

    def __init__(self, vocab: Vocabulary | None = None, length: int = 8, dim: int = 16,
                 blocks: int = 2, seed: int = 1234):
        self.vocab = vocab or Vocabulary()
        self.length = length
        self.dim = dim
        self.seed = seed
        rng = RngStream(seed)
        scale = 1.0 / math.sqrt(dim)
        self.token_table = rng.normal(len(self.vocab), dim)
        self.position_table = 0.5 * rng.normal(length, dim)
        self.blocks = []
        for _ in range(blocks):
            self.blocks.append({
                "wq": scale * rng.normal(dim, dim),
                "wk": scale * rng.normal(dim, dim),
                "wv": scale * rng.normal(dim, dim),
                "wo": scale * rng.normal(dim, dim),
                "w1": scale * rng.normal(dim, 2 * dim),
                "w2": scale / math.sqrt(2) * rng.normal(2 * dim, dim),
            })
        mask = torch.full((length, length), float("-inf"), dtype=DTYPE)
        self._causal = torch.triu(mask, diagonal=1)
        self._empty: PromptEmbedding | None = None

    def tokenize(self, prompt: str) -> TokenSequence:
        return self.vocab.tokenize(prompt, self.length)

    def encode(self, seq: TokenSequence | str) -> PromptEmbedding:
        if isinstance(seq, str):
            seq = self.tokenize(seq)
        if len(seq) != self.length:
            raise EncodingError(f"expected {self.length} tokens, got {len(seq)}")
        for i in seq.ids:
            if not 0 <= i < len(self.vocab):
                raise EncodingError(f"token id {i} outside vocabulary of size {len(self.vocab)}")
        h = self.token_table[list(seq.ids)] + self.position_table
        for blk in self.blocks:
            u = _layer_norm(h)
            scores = (u @ blk["wq"]) @ (u @ blk["wk"]).T / math.sqrt(self.dim) + self._causal
            probs = torch.softmax(scores, dim=-1)
            h = h + (probs @ (u @ blk["wv"])) @ blk["wo"]
            u = _layer_norm(h)
            h = h + torch.tanh(u @ blk["w1"]) @ blk["w2"]
        return PromptEmbedding(_layer_norm(h), seq)

    def empty(self) -> PromptEmbedding:
        """Embedding of the empty prompt (the unconditional embedding)."""
        if self._empty is None:
            self._empty = self.encode(self.tokenize(""))
        return PromptEmbedding(self._empty.matrix.clone(), self._empty.tokens)


def splice_embedding(src: PromptEmbedding, tgt: PromptEmbedding,
                     edited: Iterable[int]) -> PromptEmbedding:
    """Rows of ``tgt`` at ``edited`` positions, rows of ``src`` elsewhere."""
    if src.matrix.shape != tgt.matrix.shape:
        raise ContractError("source and target embeddings must have equal shape")
    rows = sorted(set(int(i) for i in edited))
    for i in rows:
        if not 0 <= i < src.length:
            raise ContractError(f"edited index {i} outside [0, {src.length})")
    out = src.matrix.clone()
    if rows:
        out[rows] = tgt.matrix[rows]
    return PromptEmbedding(out, tgt.tokens)


def differing_positions(a: TokenSequence, b: TokenSequence) -> list[int]:
    if len(a) != len(b):
        raise ContractError("token sequences must have equal length")
    return [i for i, (x, y) in enumerate(zip(a.ids, b.ids)) if x != y]

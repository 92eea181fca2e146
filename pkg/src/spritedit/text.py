"""Toy text conditioning: vocabulary, tokenizer, and a learned embedding table.

Captions from the sprite grammar are lowercased, whitespace-split, and mapped
through a fixed vocabulary into a token_count x dim embedding matrix. Unknown
words fall back to the null token (with a warning) so free-form targets
degrade instead of erroring. Padding positions are carried along but excluded
from cross-attention via the sequence mask.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import torch

from . import sprites

PAD = "<pad>"
NULL = "<null>"

TOKEN_COUNT = 8
EMBED_DIM = 64


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if PAD not in self.tokens or NULL not in self.tokens:
            raise ValueError("vocabulary must contain pad and null tokens")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        return self.tokens.index(token)

    @property
    def pad_id(self) -> int:
        return self.index(PAD)

    @property
    def null_id(self) -> int:
        return self.index(NULL)

    def save(self, path: Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @staticmethod
    def load(path: Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return Vocabulary(tuple(line for line in lines if line))


def default_vocabulary() -> Vocabulary:
    words: list[str] = [PAD, NULL]
    for values in sprites.ATTRIBUTES.values():
        for value in values:
            for word in value.split():
                if word not in words:
                    words.append(word)
    return Vocabulary(tuple(words))


def tokenize(caption: str, vocab: Vocabulary, token_count: int = TOKEN_COUNT) -> list[int]:
    """Map a caption to a fixed-length index sequence (padded or truncated)."""
    ids = []
    for word in caption.lower().split():
        if word in vocab.tokens:
            ids.append(vocab.index(word))
        else:
            warnings.warn(f"unknown word {word!r} mapped to null token")
            ids.append(vocab.null_id)
    ids = ids[:token_count]
    ids += [vocab.pad_id] * (token_count - len(ids))
    return ids


@dataclass
class EmbeddingSequence:
    """A token_count x dim conditioning matrix plus its attention mask.

    mask[i] is True where position i should be visible to cross-attention;
    padding rows are False. The matrix may require grad during optimization.
    """

    matrix: torch.Tensor  # (token_count, dim)
    mask: torch.Tensor  # (token_count,), bool

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if self.mask.shape != (self.matrix.shape[0],):
            raise ValueError("mask length must equal token_count")

    @property
    def token_count(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def detach_clone(self) -> "EmbeddingSequence":
        return EmbeddingSequence(self.matrix.detach().clone(), self.mask.clone())


class TextEncoder(torch.nn.Module):
    """Embedding-table encoder, trained jointly with the denoiser then frozen."""

    def __init__(self, vocab: Vocabulary, dim: int = EMBED_DIM, token_count: int = TOKEN_COUNT, seed: int = 0):
        super().__init__()
        self.vocab = vocab
        self.token_count = token_count
        gen = torch.Generator().manual_seed(seed)
        table = torch.randn(vocab.size, dim, generator=gen) * 0.02
        self.table = torch.nn.Parameter(table)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def encode_ids(self, ids: list[int]) -> EmbeddingSequence:
        idx = torch.tensor(ids, dtype=torch.long)
        mask = idx != self.vocab.pad_id
        return EmbeddingSequence(self.table[idx], mask)

    def encode(self, caption: str) -> EmbeddingSequence:
        return self.encode_ids(tokenize(caption, self.vocab, self.token_count))

    def null_embedding(self) -> EmbeddingSequence:
        """The learned unconditional sequence: the null row at every position."""
        ids = [self.vocab.null_id] * self.token_count
        return self.encode_ids(ids)


def encode_caption(caption: str, vocab: Vocabulary, table: torch.Tensor,
                   token_count: int = TOKEN_COUNT) -> EmbeddingSequence:
    """Row-gather of token embeddings for a caption against an explicit table."""
    if table.shape[0] != vocab.size:
        raise ValueError(f"table has {table.shape[0]} rows, vocabulary has {vocab.size}")
    ids = tokenize(caption, vocab, token_count)
    idx = torch.tensor(ids, dtype=torch.long)
    return EmbeddingSequence(table[idx], idx != vocab.pad_id)


def embedding_distance(a: EmbeddingSequence, b: EmbeddingSequence) -> float:
    """Frobenius norm of the elementwise difference."""
    if a.matrix.shape != b.matrix.shape:
        raise ValueError(f"shape mismatch {tuple(a.matrix.shape)} vs {tuple(b.matrix.shape)}")
    return float(torch.linalg.norm(a.matrix.detach() - b.matrix.detach()))

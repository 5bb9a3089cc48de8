"""Document compression: each document is squeezed independently into a fixed
m x d soft prompt, read off the adapted backbone at the trailing positions of
a shared trainable embedding block appended after the document tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tokenizer
from .autodiff import Tensor, slice_axis
from .backbone import Backbone, LoraAdapter, SoftInput
from .errors import ContractViolation

# embedding-count grid the trade-off experiments sweep
M_GRID = (4, 8, 16, 32, 64, 128)


class CompressionEmbeddings:
    """One shared m x d trainable table appended to every document."""

    def __init__(self, m: int, d_model: int, rng: np.random.Generator, init_std: float = 0.02):
        self.m = m
        self.table = Tensor(rng.normal(0.0, init_std, size=(m, d_model)).astype(np.float32),
                            requires_grad=True, name="compression_embeddings")


@dataclass
class Compression:
    """Fixed-size soft prompt for one document or a merged set."""
    matrix: np.ndarray  # (m, d_model) float32
    doc_count: int

    def __post_init__(self):
        if self.doc_count < 1:
            raise ContractViolation("doc_count must be >= 1")
        if not np.isfinite(self.matrix).all():
            raise ContractViolation("compression matrix contains non-finite entries")

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]


def compress_ids(ids: list[int], embeddings: CompressionEmbeddings, bb: Backbone,
                 lora: LoraAdapter | None, train_mode: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Graph-building form of compress: returns the (m, d) node so gradients
    can flow into the embedding table and adapter factors."""
    m = embeddings.m
    n = len(ids) + m
    if n > bb.config.max_positions:
        raise ContractViolation(
            f"document of {len(ids)} tokens plus {m} embeddings exceeds "
            f"max_positions {bb.config.max_positions}; callers must pre-truncate")
    segments = [ids, embeddings.table] if ids else [embeddings.table]
    h = bb.hidden(SoftInput(segments), lora=lora, train_mode=train_mode, rng=rng)
    return slice_axis(h, n - m, n, axis=0)


def compress(doc: str, embeddings: CompressionEmbeddings, bb: Backbone,
             lora: LoraAdapter | None, train_mode: bool = False,
             rng: np.random.Generator | None = None) -> Compression:
    out = compress_ids(tokenizer.encode(doc), embeddings, bb, lora,
                       train_mode=train_mode, rng=rng)
    return Compression(matrix=np.asarray(out.data, dtype=np.float32), doc_count=1)


def compress_batch(docs: list[str], embeddings: CompressionEmbeddings, bb: Backbone,
                   lora: LoraAdapter | None, train_mode: bool = False,
                   rng: np.random.Generator | None = None) -> list[Compression]:
    out = []
    for i, doc in enumerate(docs):
        try:
            out.append(compress(doc, embeddings, bb, lora, train_mode=train_mode, rng=rng))
        except ContractViolation as e:
            raise ContractViolation(f"document {i}: {e}") from e
    return out

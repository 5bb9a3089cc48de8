"""Merging strategies and the persistent per-user compression store.

Mean pooling is the default merge: order-agnostic, fixed footprint, and
incrementally updatable. Concatenation variants back the merging ablations.
Merges accumulate in float64, summing in a content-sorted order, so
permutation invariance holds bitwise.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tokenizer
from .autodiff import Tensor, add, concat, scale
from .backbone import Backbone, LoraAdapter
from .compressor import Compression, CompressionEmbeddings, compress_ids
from .container import read_container, write_container
from .errors import ContractViolation, IntegrityError


def _check_same_shape(compressions: list[Compression]) -> None:
    if not compressions:
        raise ContractViolation("cannot merge an empty list of compressions")
    shape = compressions[0].matrix.shape
    for c in compressions[1:]:
        if c.matrix.shape != shape:
            raise ContractViolation(f"shape mismatch in merge: {c.matrix.shape} != {shape}")


def merge_mean(compressions: list[Compression]) -> Compression:
    """Element-wise mean over single-document compressions."""
    _check_same_shape(compressions)
    for c in compressions:
        if c.doc_count != 1:
            raise ContractViolation("merge_mean expects single-document compressions")
    ordered = sorted(compressions, key=lambda c: c.matrix.tobytes())
    acc = np.zeros(ordered[0].matrix.shape, dtype=np.float64)
    for c in ordered:
        acc += c.matrix.astype(np.float64)
    mean = (acc / len(ordered)).astype(np.float32)
    return Compression(matrix=mean, doc_count=len(compressions))


def merge_mean_graph(blocks: list[Tensor]) -> Tensor:
    """In-graph mean of per-document compression nodes (fixed input order)."""
    if not blocks:
        raise ContractViolation("cannot merge an empty list of compressions")
    acc = blocks[0]
    for b in blocks[1:]:
        acc = add(acc, b)
    return scale(acc, 1.0 / len(blocks)) if len(blocks) > 1 else acc


def merge_concat(compressions: list[Compression]) -> Compression:
    """Row-wise concatenation in input order; shape (sum m_i, d)."""
    if not compressions:
        raise ContractViolation("cannot merge an empty list of compressions")
    d = compressions[0].matrix.shape[1]
    for c in compressions[1:]:
        if c.matrix.shape[1] != d:
            raise ContractViolation("merge_concat requires equal d_model")
    matrix = np.concatenate([c.matrix for c in compressions], axis=0)
    return Compression(matrix=matrix, doc_count=len(compressions))


def merge_concat_graph(blocks: list[Tensor]) -> Tensor:
    if not blocks:
        raise ContractViolation("cannot merge an empty list of compressions")
    return blocks[0] if len(blocks) == 1 else concat(blocks, axis=0)


def sep_join_ids(docs: list[str]) -> list[int]:
    """Token-level join of documents with the SEP token; no trailing SEP."""
    ids: list[int] = []
    for i, doc in enumerate(docs):
        if i:
            ids.append(tokenizer.SEP)
        ids.extend(tokenizer.encode(doc))
    return ids


def compress_concat_docs_ids(docs: list[str], embeddings: CompressionEmbeddings,
                             bb: Backbone, lora: LoraAdapter | None,
                             train_mode: bool = False,
                             rng: np.random.Generator | None = None) -> Tensor:
    if not docs:
        raise ContractViolation("compress_concat_docs needs at least one document")
    return compress_ids(sep_join_ids(docs), embeddings, bb, lora,
                        train_mode=train_mode, rng=rng)


def compress_concat_docs(docs: list[str], embeddings: CompressionEmbeddings,
                         bb: Backbone, lora: LoraAdapter | None,
                         train_mode: bool = False,
                         rng: np.random.Generator | None = None) -> Compression:
    """Join documents with SEP and compress the whole sequence at once."""
    out = compress_concat_docs_ids(docs, embeddings, bb, lora,
                                   train_mode=train_mode, rng=rng)
    return Compression(matrix=np.asarray(out.data, dtype=np.float32), doc_count=len(docs))


# ---------------------------------------------------------------------------
# Per-user persistent store with O(1) incremental updates
# ---------------------------------------------------------------------------


def doc_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class CompressionStore:
    """Aggregated compression for one user, kept consistent with the running
    mean of everything added so far.

    The aggregate is held in float64 so that streaming updates match the batch
    mean tightly. By default only document hashes are retained; `keep_texts`
    enables audit mode, which stores the raw documents so the batch mean can
    be recomputed from scratch.
    """
    user_id: str
    m: int
    d_model: int
    keep_texts: bool = False
    directory: str | None = None
    aggregate: np.ndarray = None
    doc_count: int = 0
    version: int = 0
    provenance: list[str] = field(default_factory=list)
    texts: list[str] = field(default_factory=list)
    duplicates: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.aggregate is None:
            self.aggregate = np.zeros((self.m, self.d_model), dtype=np.float64)

    def snapshot(self) -> Compression | None:
        if self.doc_count == 0:
            return None
        return Compression(matrix=self.aggregate.astype(np.float32),
                           doc_count=self.doc_count)

    def save(self) -> None:
        if self.directory is None:
            return
        os.makedirs(self.directory, exist_ok=True)
        write_container(os.path.join(self.directory, "aggregate.cmmr"),
                        role="compression_store",
                        tensors={"aggregate": self.aggregate.astype(np.float32)},
                        metadata={"user_id": self.user_id, "n": self.doc_count,
                                  "version": self.version, "m": self.m,
                                  "d_model": self.d_model})
        manifest = {"user_id": self.user_id, "n": self.doc_count,
                    "version": self.version, "hashes": self.provenance,
                    "duplicates": self.duplicates}
        if self.keep_texts:
            manifest["texts"] = self.texts
        tmp = os.path.join(self.directory, "manifest.json.tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, os.path.join(self.directory, "manifest.json"))

    @classmethod
    def load(cls, directory: str) -> "CompressionStore":
        with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as f:
            manifest = json.load(f)
        c = read_container(os.path.join(directory, "aggregate.cmmr"))
        if c.role != "compression_store":
            raise IntegrityError(f"{directory}: unexpected role {c.role!r}")
        meta = c.metadata
        if meta["n"] != manifest["n"] or meta["version"] != manifest["version"]:
            raise IntegrityError(f"{directory}: manifest and aggregate disagree")
        store = cls(user_id=manifest["user_id"], m=meta["m"], d_model=meta["d_model"],
                    keep_texts="texts" in manifest, directory=directory,
                    aggregate=c.tensors["aggregate"].astype(np.float64),
                    doc_count=manifest["n"], version=manifest["version"],
                    provenance=list(manifest["hashes"]),
                    texts=list(manifest.get("texts", [])),
                    duplicates=list(manifest.get("duplicates", [])))
        return store


def store_add(store: CompressionStore, new: Compression,
              doc_text: str | None = None) -> CompressionStore:
    """Fold one new single-document compression into the running mean.

    aggregate <- (n * aggregate + new) / (n + 1). Duplicate content hashes are
    accepted but flagged, since repeats legitimately shift the mean. The
    update is persisted (when the store is directory-backed) before returning.
    """
    if new.doc_count != 1:
        raise ContractViolation("store_add expects a single-document compression")
    if new.matrix.shape != (store.m, store.d_model):
        raise ContractViolation(
            f"compression shape {new.matrix.shape} does not match store "
            f"({store.m}, {store.d_model})")
    h = doc_hash(doc_text) if doc_text is not None else doc_hash(new.matrix.tobytes().hex())
    if h in store.provenance:
        store.duplicates.append(h)
    n = store.doc_count
    store.aggregate = (n * store.aggregate + new.matrix.astype(np.float64)) / (n + 1)
    store.doc_count = n + 1
    store.version += 1
    store.provenance.append(h)
    if store.keep_texts and doc_text is not None:
        store.texts.append(doc_text)
    store.save()
    return store


def store_audit(store: CompressionStore, embeddings: CompressionEmbeddings,
                bb: Backbone, lora: LoraAdapter | None,
                tol: float = 1e-6) -> tuple[bool, float]:
    """Recompress retained documents and compare their batch mean with the
    aggregate. Requires audit mode (keep_texts)."""
    if not store.keep_texts:
        raise ContractViolation("audit requires a store created with keep_texts=True")
    if len(store.texts) != store.doc_count:
        raise IntegrityError("store does not retain all documents")
    if store.doc_count == 0:
        return True, 0.0
    comps = [Compression(np.asarray(
        compress_ids(tokenizer.encode(t), embeddings, bb, lora).data, dtype=np.float32), 1)
        for t in store.texts]
    batch = merge_mean(comps)
    diff = float(np.abs(batch.matrix.astype(np.float64) - store.aggregate).max())
    return diff <= tol, diff

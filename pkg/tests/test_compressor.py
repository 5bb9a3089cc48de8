"""Compression contracts: fixed footprint, determinism, independence, and
gradient routing into exactly the trainable pieces."""

import numpy as np
import pytest

from commer import tokenizer
from commer.autodiff import backward, sum_all, zero_grads
from commer.backbone import LoraAdapter, LoraConfig
from commer.compressor import (Compression, CompressionEmbeddings, compress,
                               compress_batch, compress_ids)
from commer.errors import ContractViolation
from tests.conftest import TINY_CONFIG


@pytest.fixture()
def emb(rng):
    return CompressionEmbeddings(4, TINY_CONFIG.d_model, rng)


@pytest.fixture()
def lora(tiny_backbone, rng):
    return LoraAdapter(LoraConfig(rank=4), tiny_backbone.config, rng)


def test_shape_contract(tiny_backbone, emb, lora):
    c = compress("any document", emb, tiny_backbone, lora)
    assert c.matrix.shape == (4, TINY_CONFIG.d_model)
    assert c.doc_count == 1 and c.m == 4 and c.d == TINY_CONFIG.d_model


def test_output_size_independent_of_doc_length(tiny_backbone, emb, lora):
    short = compress("ab", emb, tiny_backbone, lora)
    long = compress("the quick fox " * 10, emb, tiny_backbone, lora)
    assert short.matrix.shape == long.matrix.shape


def test_deterministic_without_dropout(tiny_backbone, emb, lora):
    c1 = compress("same doc twice", emb, tiny_backbone, lora, train_mode=False)
    c2 = compress("same doc twice", emb, tiny_backbone, lora, train_mode=False)
    assert c1.matrix.tobytes() == c2.matrix.tobytes()


def test_empty_document_is_defined(tiny_backbone, emb, lora):
    c = compress("", emb, tiny_backbone, lora)
    assert c.matrix.shape == (4, TINY_CONFIG.d_model)
    # equals the backbone reading the bare embedding table
    bare = compress_ids([], emb, tiny_backbone, lora)
    assert c.matrix.tobytes() == np.asarray(bare.data, dtype=np.float32).tobytes()


def test_independence_across_documents(tiny_backbone, emb, lora):
    alone = compress("the red fox", emb, tiny_backbone, lora)
    with_others = compress_batch(["other words first", "the red fox", "and after"],
                                 emb, tiny_backbone, lora)
    assert alone.matrix.tobytes() == with_others[1].matrix.tobytes()


def test_batch_equals_map(tiny_backbone, emb, lora):
    docs = ["one", "two tokens", "three more tokens"]
    batch = compress_batch(docs, emb, tiny_backbone, lora)
    single = [compress(d, emb, tiny_backbone, lora) for d in docs]
    assert len(batch) == 3
    for b, s in zip(batch, single):
        assert b.matrix.tobytes() == s.matrix.tobytes()
    assert compress_batch([], emb, tiny_backbone, lora) == []


def test_overlength_rejected_with_index(tiny_backbone, emb, lora):
    big = "x" * TINY_CONFIG.max_positions
    with pytest.raises(ContractViolation, match="pre-truncate"):
        compress(big, emb, tiny_backbone, lora)
    with pytest.raises(ContractViolation, match="document 1"):
        compress_batch(["fine", big], emb, tiny_backbone, lora)


def test_gradients_reach_only_trainable_pieces(tiny_backbone, emb, lora):
    out = compress_ids(tokenizer.encode("route the gradient"), emb,
                       tiny_backbone, lora)
    grads = backward(sum_all(out))
    trainable_ids = {emb.table.id} | {t.id for t in lora.tensors()}
    assert set(grads) <= trainable_ids
    assert emb.table.id in grads
    b_ids = {t.id for k, t in lora.params.items() if k.endswith(".B")}
    assert b_ids <= set(grads)
    for t in tiny_backbone.params.values():
        assert t.grad is None
    zero_grads([emb.table] + lora.tensors())


def test_compression_validates_its_fields(rng):
    with pytest.raises(ContractViolation):
        Compression(matrix=np.zeros((2, 3), dtype=np.float32), doc_count=0)
    with pytest.raises(ContractViolation):
        Compression(matrix=np.full((2, 3), np.nan, dtype=np.float32), doc_count=1)

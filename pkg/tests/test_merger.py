"""Merge algebra, the concatenation ablations, and the persistent store."""

import numpy as np
import pytest

from commer import tokenizer
from commer.backbone import LoraAdapter, LoraConfig
from commer.compressor import Compression, CompressionEmbeddings, compress
from commer.errors import ContractViolation, IntegrityError
from commer.merger import (CompressionStore, compress_concat_docs, doc_hash,
                           merge_concat, merge_mean, sep_join_ids, store_add,
                           store_audit)
from tests.conftest import TINY_CONFIG


def _comp(rng, m=4, d=8):
    return Compression(rng.normal(size=(m, d)).astype(np.float32), 1)


def test_mean_of_one_is_identity(rng):
    c = _comp(rng)
    out = merge_mean([c])
    assert out.matrix.tobytes() == c.matrix.tobytes()
    assert out.doc_count == 1


def test_destructive_interference_cancels(rng):
    c = _comp(rng)
    neg = Compression(-c.matrix, 1)
    out = merge_mean([c, neg])
    np.testing.assert_array_equal(out.matrix, np.zeros_like(c.matrix))
    assert out.doc_count == 2


def test_permutation_invariance_bitwise(rng):
    comps = [_comp(rng) for _ in range(8)]
    base = merge_mean(comps)
    for _ in range(20):
        perm = [comps[i] for i in rng.permutation(8)]
        out = merge_mean(perm)
        assert out.matrix.tobytes() == base.matrix.tobytes()


def test_merge_mean_contracts(rng):
    with pytest.raises(ContractViolation):
        merge_mean([])
    with pytest.raises(ContractViolation):
        merge_mean([_comp(rng, m=4), _comp(rng, m=8)])
    merged = merge_mean([_comp(rng), _comp(rng)])
    with pytest.raises(ContractViolation):
        merge_mean([merged, _comp(rng)])  # only single-document inputs


def test_merge_concat_shapes_and_round_trip(rng):
    c1, c2 = _comp(rng), _comp(rng)
    single = merge_concat([c1])
    assert single.matrix.tobytes() == c1.matrix.tobytes()
    out = merge_concat([c1, c2])
    assert out.matrix.shape == (8, 8)
    assert out.doc_count == 2
    assert out.matrix[:4].tobytes() == c1.matrix.tobytes()
    assert out.matrix[4:].tobytes() == c2.matrix.tobytes()
    # order sensitive by construction
    assert merge_concat([c2, c1]).matrix.tobytes() != out.matrix.tobytes()


def test_sep_join_ids():
    ids = sep_join_ids(["ab", "cd"])
    assert ids == [97, 98, tokenizer.SEP, 99, 100]
    assert sep_join_ids(["ab"]) == [97, 98]


def test_compress_concat_single_doc_equals_compress(tiny_backbone, rng):
    emb = CompressionEmbeddings(4, TINY_CONFIG.d_model, rng)
    lora = LoraAdapter(LoraConfig(rank=4), tiny_backbone.config, rng)
    direct = compress("just one doc", emb, tiny_backbone, lora)
    joined = compress_concat_docs(["just one doc"], emb, tiny_backbone, lora)
    assert joined.matrix.tobytes() == direct.matrix.tobytes()
    assert joined.doc_count == 1


def test_compress_concat_is_order_sensitive(tiny_backbone, rng):
    emb = CompressionEmbeddings(4, TINY_CONFIG.d_model, rng)
    lora = LoraAdapter(LoraConfig(rank=4), tiny_backbone.config, rng)
    ab = compress_concat_docs(["first doc", "second doc"], emb, tiny_backbone, lora)
    ba = compress_concat_docs(["second doc", "first doc"], emb, tiny_backbone, lora)
    assert ab.matrix.shape == (4, TINY_CONFIG.d_model)
    assert ab.doc_count == 2
    assert ab.matrix.tobytes() != ba.matrix.tobytes()


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------


def test_store_first_add_is_identity(rng):
    st = CompressionStore(user_id="u", m=4, d_model=8)
    c = _comp(rng)
    store_add(st, c, doc_text="doc one")
    assert st.doc_count == 1 and st.version == 1
    np.testing.assert_allclose(st.aggregate, c.matrix.astype(np.float64))


def test_store_two_point_mean(rng):
    st = CompressionStore(user_id="u", m=4, d_model=8)
    c1, c2 = _comp(rng), _comp(rng)
    store_add(st, c1, "a")
    store_add(st, c2, "b")
    want = (c1.matrix.astype(np.float64) + c2.matrix.astype(np.float64)) / 2
    np.testing.assert_allclose(st.aggregate, want, atol=1e-12)


def test_streaming_matches_batch_mean(rng):
    comps = [_comp(rng) for _ in range(16)]
    st = CompressionStore(user_id="u", m=4, d_model=8)
    for i, c in enumerate(comps):
        store_add(st, c, f"doc {i}")
    batch = merge_mean(comps)
    diff = np.abs(st.aggregate - batch.matrix.astype(np.float64)).max()
    assert diff <= 1e-6
    assert st.doc_count == 16
    assert len(st.provenance) == 16


def test_duplicates_flagged_but_counted(rng):
    st = CompressionStore(user_id="u", m=4, d_model=8)
    c = _comp(rng)
    store_add(st, c, "same text")
    store_add(st, c, "same text")
    assert st.doc_count == 2
    assert st.duplicates == [doc_hash("same text")]


def test_store_rejects_mismatched_shapes(rng):
    st = CompressionStore(user_id="u", m=4, d_model=8)
    with pytest.raises(ContractViolation):
        store_add(st, _comp(rng, m=8), "x")
    merged = merge_mean([_comp(rng), _comp(rng)])
    with pytest.raises(ContractViolation):
        store_add(st, merged, "x")


def test_store_persistence_round_trip(tmp_path, rng):
    st = CompressionStore(user_id="u42", m=4, d_model=8, keep_texts=True,
                          directory=str(tmp_path / "u42"))
    for i in range(3):
        store_add(st, _comp(rng), f"doc number {i}")
    loaded = CompressionStore.load(str(tmp_path / "u42"))
    assert loaded.user_id == "u42" and loaded.doc_count == 3 and loaded.version == 3
    assert loaded.texts == st.texts
    np.testing.assert_allclose(loaded.aggregate, st.aggregate, atol=1e-6)


def test_store_manifest_mismatch_detected(tmp_path, rng):
    st = CompressionStore(user_id="u", m=4, d_model=8, directory=str(tmp_path / "u"))
    store_add(st, _comp(rng), "a")
    manifest = tmp_path / "u" / "manifest.json"
    manifest.write_text(manifest.read_text().replace('"n": 1', '"n": 5'))
    with pytest.raises(IntegrityError):
        CompressionStore.load(str(tmp_path / "u"))


def test_store_audit_recovers_batch_mean(tiny_backbone, rng):
    emb = CompressionEmbeddings(4, TINY_CONFIG.d_model, rng)
    lora = LoraAdapter(LoraConfig(rank=4), tiny_backbone.config, rng)
    st = CompressionStore(user_id="u", m=4, d_model=TINY_CONFIG.d_model, keep_texts=True)
    for text in ("the red fox", "a cold river", "why try why"):
        store_add(st, compress(text, emb, tiny_backbone, lora), text)
    ok, diff = store_audit(st, emb, tiny_backbone, lora)
    assert ok and diff <= 1e-6
    st_no_audit = CompressionStore(user_id="u", m=4, d_model=TINY_CONFIG.d_model)
    store_add(st_no_audit, compress("x", emb, tiny_backbone, lora), "x")
    with pytest.raises(ContractViolation):
        store_audit(st_no_audit, emb, tiny_backbone, lora)

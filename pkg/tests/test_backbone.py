"""Backbone contracts: adapter identity at init, causality, mixed soft/token
inputs, pretraining behavior, and persistence."""

import itertools

import numpy as np
import pytest

from commer import tokenizer
from commer.autodiff import constant, sum_all
from commer.backbone import (Backbone, BackboneConfig, LoraAdapter, LoraConfig,
                             SoftInput, pretrain_backbone)
from commer.data import gen_backbone_corpus
from commer.errors import ConfigError, ContractViolation, IntegrityError
from commer.gradcheck import grad_check
from tests.conftest import TINY_CONFIG


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(d_model=30, n_heads=4)
    cfg = BackboneConfig()
    assert cfg.d_model == 64 and cfg.n_layers == 4 and cfg.n_heads == 4
    assert cfg.d_ff == 256 and cfg.max_positions == 512


def test_embed_shapes_and_lookup(tiny_backbone):
    out = tiny_backbone.embed([65])
    assert out.shape == (1, TINY_CONFIG.d_model)
    rep = tiny_backbone.embed([66, 66, 66])
    assert np.array_equal(rep.data[0], rep.data[1])
    with pytest.raises(ContractViolation):
        tiny_backbone.embed([tokenizer.VOCAB_SIZE])


def test_zero_init_adapter_is_identity(tiny_backbone, rng):
    lora = LoraAdapter(LoraConfig(rank=4), tiny_backbone.config, rng)
    ids = tokenizer.encode("the red fox")
    _, base = tiny_backbone.forward(SoftInput([ids]))
    _, adapted = tiny_backbone.forward(SoftInput([ids]), lora=lora)
    assert base.data.tobytes() == adapted.data.tobytes()


def test_nonzero_adapter_changes_output(tiny_backbone, rng):
    lora = LoraAdapter(LoraConfig(rank=4), tiny_backbone.config, rng)
    for k, t in lora.params.items():
        if k.endswith(".B"):
            t.data[...] = rng.normal(0, 0.1, size=t.data.shape).astype(np.float32)
    ids = tokenizer.encode("the red fox")
    _, base = tiny_backbone.forward(SoftInput([ids]))
    _, adapted = tiny_backbone.forward(SoftInput([ids]), lora=lora)
    assert base.data.tobytes() != adapted.data.tobytes()


def test_causality_future_token_cannot_leak(tiny_backbone):
    a = tokenizer.encode("the red fox runs")
    b = list(a)
    b[-1] = ord("z")
    _, la = tiny_backbone.forward(SoftInput([a]))
    _, lb = tiny_backbone.forward(SoftInput([b]))
    n = len(a)
    assert la.data[: n - 1].tobytes() == lb.data[: n - 1].tobytes()
    assert not np.array_equal(la.data[n - 1], lb.data[n - 1])


def test_softmax_of_logits_rows_normalized(tiny_backbone):
    _, logits = tiny_backbone.forward(SoftInput([tokenizer.encode("hello")]))
    z = logits.data.astype(np.float64)
    p = np.exp(z - z.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_soft_hard_equivalence_bitwise(tiny_backbone):
    ids = tokenizer.encode("soft is hard")
    emb = tiny_backbone.embed(ids)
    _, hard = tiny_backbone.forward(SoftInput([ids]))
    _, soft = tiny_backbone.forward(SoftInput([constant(emb.data)]))
    assert hard.data.tobytes() == soft.data.tobytes()


def test_mixed_segments_and_length_contract(tiny_backbone, rng):
    block = constant(rng.normal(size=(3, TINY_CONFIG.d_model)).astype(np.float32))
    si = SoftInput([block, tokenizer.encode("ok")])
    assert si.total_len() == 5
    h, _ = tiny_backbone.forward(si)
    assert h.shape == (5, TINY_CONFIG.d_model)
    too_long = SoftInput([tokenizer.encode("x" * (TINY_CONFIG.max_positions + 1))])
    with pytest.raises(ContractViolation):
        tiny_backbone.forward(too_long)
    with pytest.raises(ContractViolation):
        tiny_backbone.forward(SoftInput([constant(np.zeros((2, 7), dtype=np.float32))]))


def test_embedding_table_gradient_matches_finite_differences(rng):
    cfg = BackboneConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32,
                         max_positions=32, vocab_size=40)
    bb = Backbone.init(cfg, seed=1)
    for name, t in bb.params.items():
        t.requires_grad = name == "tok_emb"
    ids = [3, 5, 7]

    def builder(ps):
        table = ps[0]
        bb.params["tok_emb"] = table
        h = bb.hidden(SoftInput([ids]))
        return sum_all(h)

    res = grad_check(builder, [bb.params["tok_emb"]], max_coords_per_param=24, seed=0)
    assert res.max_rel_error <= 1e-3


def test_dropout_only_in_train_mode(tiny_backbone, rng):
    lora = LoraAdapter(LoraConfig(rank=4, dropout_p=0.5), tiny_backbone.config,
                       np.random.default_rng(0))
    for k, t in lora.params.items():
        if k.endswith(".B"):
            t.data[...] = 0.05
    ids = tokenizer.encode("drop me")
    h_eval_1 = tiny_backbone.hidden(SoftInput([ids]), lora=lora).data
    h_eval_2 = tiny_backbone.hidden(SoftInput([ids]), lora=lora).data
    assert h_eval_1.tobytes() == h_eval_2.tobytes()
    h_train = tiny_backbone.hidden(SoftInput([ids]), lora=lora, train_mode=True,
                                   rng=np.random.default_rng(1)).data
    assert h_train.tobytes() != h_eval_1.tobytes()
    with pytest.raises(ContractViolation):
        tiny_backbone.hidden(SoftInput([ids]), lora=lora, train_mode=True)


def test_pretraining_loss_decreases_and_beats_uniform():
    corpus = list(itertools.islice(gen_backbone_corpus(5), 600))
    cfg = BackboneConfig(d_model=32, n_layers=2, n_heads=2, d_ff=64, max_positions=256)
    trace = []
    bb = pretrain_backbone(corpus, cfg, steps=60, seed=0, batch_size=4,
                           loss_trace=trace)
    assert bb.frozen
    assert len(trace) == 60
    assert np.mean(trace[-10:]) < np.mean(trace[:10])
    # held-out next-token perplexity beats the uniform bound (= vocab size)
    from commer.autodiff import cross_entropy_logits
    held_out = list(itertools.islice(gen_backbone_corpus(99), 20))
    total, count = 0.0, 0
    for line in held_out:
        ids = tokenizer.encode(line)[:200] + [tokenizer.EOS]
        h = bb.hidden(SoftInput([ids[:-1]]))
        node = cross_entropy_logits(bb.logits(h), np.asarray(ids[1:]))
        total += float(node.aux.sum())
        count += len(ids) - 1
    assert np.exp(total / count) < tokenizer.VOCAB_SIZE


def test_pretraining_same_seed_identical():
    corpus = list(itertools.islice(gen_backbone_corpus(5), 100))
    cfg = BackboneConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_positions=256)
    b1 = pretrain_backbone(corpus, cfg, steps=8, seed=4, batch_size=2)
    b2 = pretrain_backbone(corpus, cfg, steps=8, seed=4, batch_size=2)
    assert b1.weight_hash() == b2.weight_hash()
    b3 = pretrain_backbone(corpus, cfg, steps=8, seed=5, batch_size=2)
    assert b3.weight_hash() != b1.weight_hash()


def test_sep_embedding_mirrors_newline():
    corpus = list(itertools.islice(gen_backbone_corpus(5), 50))
    cfg = BackboneConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_positions=256)
    bb = pretrain_backbone(corpus, cfg, steps=4, seed=0, batch_size=2)
    np.testing.assert_array_equal(bb.params["tok_emb"].data[tokenizer.SEP],
                                  bb.params["tok_emb"].data[ord("\n")])


def test_empty_corpus_rejected():
    cfg = BackboneConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32)
    with pytest.raises(ContractViolation):
        pretrain_backbone([], cfg, steps=2, seed=0)


def test_save_load_round_trip(tiny_backbone, tmp_path):
    path = tmp_path / "backbone.cmmr"
    tiny_backbone.save(path)
    loaded = Backbone.load(path)
    assert loaded.weight_hash() == tiny_backbone.weight_hash()
    assert loaded.frozen
    assert loaded.config == tiny_backbone.config
    ids = tokenizer.encode("same output")
    _, l1 = tiny_backbone.forward(SoftInput([ids]))
    _, l2 = loaded.forward(SoftInput([ids]))
    assert l1.data.tobytes() == l2.data.tobytes()


def test_load_rejects_tampered_weights(tiny_backbone, tmp_path):
    path = tmp_path / "backbone.cmmr"
    tiny_backbone.save(path)
    raw = bytearray(path.read_bytes())
    raw[-100] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        Backbone.load(path)

"""Training-run contracts: determinism, early stopping, the trainable-set
audit, and checkpoint persistence."""

import dataclasses
import math

import numpy as np
import pytest

from commer.data import gen_pretrain_dataset
from commer.errors import ConfigError, ContractViolation, IntegrityError, NumericFault
from commer.training import (Checkpoint, RunConfig, load_checkpoint, make_parts,
                             parts_from_checkpoint, pretrain_compressor,
                             save_checkpoint, total_steps_for, train)


def _cfg(**kw) -> RunConfig:
    base = dict(method="commer", n_docs=2, m=4, max_steps=4, batch_size=4,
                eval_every=2, seed=0, lora_rank=2)
    base.update(kw)
    return RunConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(method="nope", max_steps=1)
    with pytest.raises(ConfigError):
        RunConfig(method="commer")  # neither epochs nor max_steps
    cfg = _cfg()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert total_steps_for(RunConfig(method="commer", epochs=2.0, batch_size=4), 10) == 6


def test_same_seed_runs_are_identical(tiny_backbone, skill_splits):
    cfg = _cfg()
    c1, t1 = train(cfg, skill_splits.train, skill_splits.val, tiny_backbone)
    c2, t2 = train(cfg, skill_splits.train, skill_splits.val, tiny_backbone)
    assert set(c1.tensors) == set(c2.tensors)
    for k in c1.tensors:
        assert c1.tensors[k].tobytes() == c2.tensors[k].tobytes()
    assert t1 == t2
    c3, _ = train(_cfg(seed=1), skill_splits.train, skill_splits.val, tiny_backbone)
    assert any(c1.tensors[k].tobytes() != c3.tensors[k].tobytes() for k in c1.tensors)


def test_early_stopping_returns_minimum(tiny_backbone, skill_splits):
    cfg = _cfg(max_steps=8, eval_every=2, patience=2)
    ckpt, trace = train(cfg, skill_splits.train, skill_splits.val, tiny_backbone)
    evaluated = [row["perplexity"] for row in trace if row["split"] == "val"]
    assert ckpt.best_perplexity == min(evaluated)
    assert all(ckpt.best_perplexity <= p for p in evaluated)
    assert (ckpt.best_step, ckpt.best_perplexity) in \
        [(s, p) for s, p in ckpt.val_history]


def test_frozen_backbone_and_trainable_set_audit(tiny_backbone, skill_splits):
    before = tiny_backbone.weight_hash()
    for method, expected in [
        ("commer", lambda ks: "compression_embeddings" in ks
            and any(k.startswith("lora.") for k in ks)
            and all(k == "compression_embeddings" or k.startswith("lora.") for k in ks)),
        ("prompt_tuning", lambda ks: set(ks) == {"soft_prompt"}),
    ]:
        cfg = _cfg(method=method, max_steps=3)
        audit = {}
        train(cfg, skill_splits.train, skill_splits.val, tiny_backbone,
              audit_out=audit)
        assert expected(set(audit["changed"])), (method, audit["changed"])
        assert audit["backbone_hash_before"] == audit["backbone_hash_after"] == before
    assert tiny_backbone.weight_hash() == before


def test_unfrozen_backbone_refused(skill_splits):
    from commer.backbone import Backbone
    from tests.conftest import TINY_CONFIG
    bb = Backbone.init(TINY_CONFIG, seed=0)  # not frozen
    with pytest.raises(ConfigError):
        train(_cfg(), skill_splits.train, skill_splits.val, bb)


def test_zero_document_run_still_learns(tiny_backbone, skill_splits):
    cfg = _cfg(n_docs=0, max_steps=40, eval_every=10, batch_size=8,
               lr_embeddings=2e-2, patience=10)
    ckpt, _ = train(cfg, skill_splits.train, skill_splits.val, tiny_backbone)
    init_ppl = ckpt.val_history[0][1]
    assert ckpt.best_perplexity < init_ppl


def test_nan_loss_aborts_with_step(tiny_backbone, skill_splits):
    cfg = _cfg(max_steps=3)
    poisoned = make_parts(cfg, tiny_backbone)
    tensors = {k: v.data.copy() for k, v in poisoned.trainable().items()}
    tensors["compression_embeddings"][...] = np.nan
    bad = Checkpoint(tensors=tensors, config=cfg,
                     backbone_hash=tiny_backbone.weight_hash())
    with pytest.raises(NumericFault, match="step"):
        train(cfg, skill_splits.train, skill_splits.val, tiny_backbone, init_from=bad)


def test_checkpoint_round_trip_bytes(tmp_path, tiny_backbone, skill_splits):
    ckpt, _ = train(_cfg(max_steps=2), skill_splits.train, skill_splits.val,
                    tiny_backbone)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(ckpt, p1)
    loaded = load_checkpoint(p1, tiny_backbone)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.config == ckpt.config
    assert loaded.val_history == ckpt.val_history


def test_checkpoint_tamper_detected(tmp_path, tiny_backbone, skill_splits):
    ckpt, _ = train(_cfg(max_steps=2), skill_splits.train, skill_splits.val,
                    tiny_backbone)
    path = tmp_path / "c.bin"
    save_checkpoint(ckpt, path)
    raw = bytearray(path.read_bytes())
    raw[-48] ^= 0x10
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_checkpoint(path, tiny_backbone)


def test_checkpoint_shape_and_hash_guards(tmp_path, tiny_backbone, skill_splits):
    ckpt, _ = train(_cfg(max_steps=2, m=8), skill_splits.train, skill_splits.val,
                    tiny_backbone)
    path = tmp_path / "m8.bin"
    save_checkpoint(ckpt, path)
    with pytest.raises(ConfigError, match="m="):
        load_checkpoint(path, tiny_backbone, expect=_cfg(m=16))
    other = dataclasses.replace(ckpt, backbone_hash="0" * 64)
    other_path = tmp_path / "other.bin"
    save_checkpoint(other, other_path)
    with pytest.raises(IntegrityError):
        load_checkpoint(other_path, tiny_backbone)
    with pytest.raises(IntegrityError):
        train(_cfg(), skill_splits.train, skill_splits.val, tiny_backbone,
              init_from=other)


def test_run_directory_artifacts(tmp_path, tiny_backbone, skill_splits):
    out = tmp_path / "run"
    train(_cfg(max_steps=2), skill_splits.train, skill_splits.val, tiny_backbone,
          out_dir=str(out))
    assert (out / "ckpt.bin").exists()
    assert (out / "config.toml").exists()
    header = (out / "trace.csv").read_text().splitlines()[0]
    assert header == "step,split,loss,perplexity"


def test_pretrain_compressor_consumes_one_epoch(tiny_backbone):
    examples = gen_pretrain_dataset(40, seed=3, max_docs=2)
    cfg = _cfg(n_docs=2, batch_size=4, max_steps=None, epochs=1.0, eval_every=5)
    ckpt, trace = pretrain_compressor(cfg, examples, tiny_backbone)
    n_train_rows = sum(1 for r in trace if r["split"] == "train")
    assert n_train_rows == math.ceil((40 - 2) / 4)  # 5% held out for the trace
    assert ckpt.config.epochs == 1.0
    with pytest.raises(ConfigError):
        pretrain_compressor(_cfg(method="prompt_tuning"), examples, tiny_backbone)


def test_parts_from_checkpoint_is_inference_ready(tiny_backbone, skill_splits):
    ckpt, _ = train(_cfg(max_steps=2), skill_splits.train, skill_splits.val,
                    tiny_backbone)
    parts = parts_from_checkpoint(ckpt, tiny_backbone)
    assert all(not t.requires_grad for t in parts.trainable().values())
    with pytest.raises(IntegrityError):
        parts_from_checkpoint(dataclasses.replace(ckpt, backbone_hash="x"),
                              tiny_backbone)


def test_empty_sets_rejected(tiny_backbone, skill_splits):
    with pytest.raises(ContractViolation):
        train(_cfg(), [], skill_splits.val, tiny_backbone)
    with pytest.raises(ContractViolation):
        train(_cfg(), skill_splits.train, [], tiny_backbone)

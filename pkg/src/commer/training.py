"""Training runs: parameter-group AdamW under a shared cosine schedule,
periodic validation perplexity with patience-based early stopping, and
checkpoints that carry only the trainable tensors plus the backbone hash.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import backward, zero_grads
from .backbone import Backbone, LoraConfig
from .container import read_container, tensor_dict_hash, write_container
from .data import Example
from .errors import ConfigError, ContractViolation, IntegrityError, NumericFault
from .optim import AdamState, LrSchedule, ParamGroup, adamw_step, clip_global_norm
from .pipeline import (COMPRESSION_METHODS, METHODS, ModelParts, example_loss,
                       example_nll, init_parts, pick_docs)


@dataclass(frozen=True)
class RunConfig:
    method: str = "commer"
    n_docs: int = 2
    m: int = 4
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    lora_targets: tuple = ("wq", "wk", "wv", "wo")
    lr_embeddings: float = 1e-2     # compression embeddings peak lr
    lr_lora: float = 1e-4           # adapter factors peak lr
    lr_soft_prompt: float = 3e-2    # prompt-tuning table peak lr
    batch_size: int = 16
    epochs: float | None = None
    max_steps: int | None = None
    warmup_fraction: float = 0.03
    weight_decay: float = 0.001
    decay_embeddings: bool = True   # False: decay only the adapter factors
    clip_norm: float = 0.3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 50
    patience: int = 5
    budget_tokens: int | None = None
    val_examples: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.epochs is None and self.max_steps is None:
            raise ConfigError("one of epochs or max_steps must be set")
        for name in ("batch_size", "m", "eval_every", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_docs < 0:
            raise ConfigError("n_docs must be >= 0")

    def lora_config(self) -> LoraConfig:
        return LoraConfig(rank=self.lora_rank, alpha=self.lora_alpha,
                          dropout_p=self.lora_dropout, targets=tuple(self.lora_targets))

    def to_dict(self) -> dict:
        return {
            "method": self.method, "n_docs": self.n_docs, "m": self.m,
            "lora_rank": self.lora_rank, "lora_alpha": self.lora_alpha,
            "lora_dropout": self.lora_dropout, "lora_targets": list(self.lora_targets),
            "lr_embeddings": self.lr_embeddings, "lr_lora": self.lr_lora,
            "lr_soft_prompt": self.lr_soft_prompt, "batch_size": self.batch_size,
            "epochs": self.epochs, "max_steps": self.max_steps,
            "warmup_fraction": self.warmup_fraction, "weight_decay": self.weight_decay,
            "decay_embeddings": self.decay_embeddings, "clip_norm": self.clip_norm,
            "adam_betas": list(self.adam_betas), "adam_eps": self.adam_eps,
            "seed": self.seed, "eval_every": self.eval_every, "patience": self.patience,
            "budget_tokens": self.budget_tokens, "val_examples": self.val_examples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kw = dict(d)
        if "lora_targets" in kw:
            kw["lora_targets"] = tuple(kw["lora_targets"])
        if "adam_betas" in kw:
            kw["adam_betas"] = tuple(kw["adam_betas"])
        return cls(**kw)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: RunConfig
    backbone_hash: str
    val_history: list = field(default_factory=list)  # (step, perplexity)
    best_step: int = -1

    @property
    def best_perplexity(self) -> float:
        return min(p for _, p in self.val_history) if self.val_history else math.inf


def make_parts(config: RunConfig, backbone: Backbone, seed: int | None = None) -> ModelParts:
    return init_parts(config.method, backbone, config.m, config.lora_config(),
                      config.seed if seed is None else seed,
                      budget_tokens=config.budget_tokens)


def parts_from_checkpoint(ckpt: Checkpoint, backbone: Backbone) -> ModelParts:
    """Rebuild inference-ready model parts from stored tensors."""
    if ckpt.backbone_hash != backbone.weight_hash():
        raise IntegrityError("checkpoint was trained against a different backbone")
    parts = make_parts(ckpt.config, backbone)
    _load_tensors_into(parts, ckpt.tensors)
    for t in parts.trainable().values():
        t.requires_grad = False
    return parts


def _load_tensors_into(parts: ModelParts, tensors: dict[str, np.ndarray]) -> None:
    own = parts.trainable()
    if set(own) != set(tensors):
        raise ConfigError(f"tensor set mismatch: {sorted(own)} vs {sorted(tensors)}")
    for name, arr in tensors.items():
        if own[name].data.shape != arr.shape:
            raise ConfigError(f"shape mismatch for {name}: "
                              f"{own[name].data.shape} vs {arr.shape}")
        own[name].data[...] = arr


def param_groups(config: RunConfig, parts: ModelParts) -> list[ParamGroup]:
    wd_soft = None if config.decay_embeddings else 0.0
    if config.method == "prompt_tuning":
        return [ParamGroup("soft_prompt", [parts.soft_prompt.table],
                           peak_lr=config.lr_soft_prompt, weight_decay=wd_soft)]
    return [
        ParamGroup("compression_embeddings", [parts.embeddings.table],
                   peak_lr=config.lr_embeddings, weight_decay=wd_soft),
        ParamGroup("lora", parts.lora.tensors(), peak_lr=config.lr_lora),
    ]


def _validation_perplexity(parts: ModelParts, val_set: list[Example],
                           config: RunConfig) -> float:
    cap = config.val_examples or len(val_set)
    total, count = 0.0, 0
    for idx, ex in enumerate(val_set[:cap]):
        docs = pick_docs(ex, config.n_docs, config.seed, idx)
        nll = example_nll(parts, ex, docs)
        total += float(nll.sum())
        count += nll.shape[0]
    if count == 0:
        raise ContractViolation("empty validation set")
    return math.exp(total / count)


def total_steps_for(config: RunConfig, n_train: int) -> int:
    if config.max_steps is not None:
        return config.max_steps
    return max(1, math.ceil(config.epochs * math.ceil(n_train / config.batch_size)))


def train(config: RunConfig, train_set: list[Example], val_set: list[Example],
          backbone: Backbone, init_from: Checkpoint | None = None,
          out_dir: str | None = None, log_every: int = 0,
          full_epochs: bool = False,
          audit_out: dict | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run one training job and return (best checkpoint, metric trace).

    The backbone must be frozen; its weight hash is recorded in the returned
    checkpoint and re-verified when initializing from a previous one.
    `full_epochs` disables early stopping (used by the single-epoch
    compressor pretraining phase). When `audit_out` is given, it is filled
    with the names of tensors whose bytes changed over the run and the
    backbone hash before/after.
    """
    if not train_set or not val_set:
        raise ContractViolation("train and validation sets must be non-empty")
    if not backbone.frozen:
        raise ConfigError("backbone must be frozen before training")
    bb_hash = backbone.weight_hash()
    if init_from is not None:
        if init_from.backbone_hash != bb_hash:
            raise IntegrityError("initialization checkpoint does not match this backbone")
        if init_from.config.method not in COMPRESSION_METHODS or \
                config.method not in COMPRESSION_METHODS:
            if init_from.config.method != config.method:
                raise ConfigError("method mismatch between init checkpoint and run")

    parts = make_parts(config, backbone)
    if init_from is not None:
        _load_tensors_into(parts, init_from.tensors)
    init_bytes = {k: v.data.tobytes() for k, v in parts.trainable().items()}
    params = list(parts.trainable().values())
    groups = param_groups(config, parts)
    steps = total_steps_for(config, len(train_set))
    schedule = LrSchedule(total_steps=steps, warmup_fraction=config.warmup_fraction)
    state = AdamState()
    order_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])

    trace: list[dict] = []
    best: Checkpoint | None = None
    val_history: list = []
    evals_since_best = 0
    order: list[int] = []

    def run_eval(step: int) -> float:
        ppl = _validation_perplexity(parts, val_set, config)
        val_history.append((step, ppl))
        trace.append({"step": step, "split": "val",
                      "loss": math.log(ppl), "perplexity": ppl})
        return ppl

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(tensors={k: v.data.copy() for k, v in parts.trainable().items()},
                          config=config, backbone_hash=bb_hash,
                          val_history=list(val_history), best_step=step)

    ppl0 = run_eval(0)
    best = snapshot(0)
    stopped = False
    for step in range(steps):
        batch = []
        for _ in range(config.batch_size):
            if not order:
                order = list(order_rng.permutation(len(train_set)))
            batch.append(order.pop())
        zero_grads(params)
        batch_loss = 0.0
        for idx in batch:
            ex = train_set[idx]
            docs = pick_docs(ex, config.n_docs, config.seed, idx)
            node, _ = example_loss(parts, ex, docs, train_mode=True, rng=dropout_rng)
            if np.isnan(node.data):
                raise NumericFault(f"NaN loss at step {step}")
            batch_loss += float(node.data)
            backward(node)
        grads = {p.id: p.grad for p in params if p.grad is not None}
        for g in grads.values():
            g *= g.dtype.type(1.0 / config.batch_size)
        clip_global_norm(grads, config.clip_norm)
        adamw_step(groups, grads, state, step, schedule,
                   betas=config.adam_betas, eps=config.adam_eps,
                   weight_decay=config.weight_decay)
        batch_loss /= config.batch_size
        trace.append({"step": step + 1, "split": "train",
                      "loss": batch_loss, "perplexity": math.exp(batch_loss)})
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}/{steps}: train loss {batch_loss:.4f}")
        if (step + 1) % config.eval_every == 0 or step + 1 == steps:
            ppl = run_eval(step + 1)
            if ppl < best.best_perplexity:
                best = snapshot(step + 1)
                evals_since_best = 0
            else:
                evals_since_best += 1
                if not full_epochs and evals_since_best >= config.patience:
                    stopped = True
        if stopped:
            break

    best.val_history = list(val_history)
    if audit_out is not None:
        audit_out["changed"] = sorted(
            k for k, v in parts.trainable().items()
            if v.data.tobytes() != init_bytes[k])
        audit_out["backbone_hash_before"] = bb_hash
        audit_out["backbone_hash_after"] = backbone.weight_hash()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(best, os.path.join(out_dir, "ckpt.bin"))
        write_trace_csv(os.path.join(out_dir, "trace.csv"), trace)
        write_config_toml(os.path.join(out_dir, "config.toml"), config)
    return best, trace


def pretrain_compressor(config: RunConfig, examples: list[Example],
                        backbone: Backbone, val_fraction: float = 0.05,
                        log_every: int = 0) -> tuple[Checkpoint, list[dict]]:
    """One full epoch over reconstruction examples; the returned checkpoint
    seeds downstream fine-tuning runs."""
    if config.method not in COMPRESSION_METHODS:
        raise ConfigError("compressor pretraining applies to compression methods only")
    n_val = max(1, int(len(examples) * val_fraction))
    val, tr = examples[:n_val], examples[n_val:]
    cfg = replace(config, epochs=1.0, max_steps=None)
    return train(cfg, tr, val, backbone, full_epochs=True, log_every=log_every)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    write_container(
        path, role="checkpoint", tensors=ckpt.tensors,
        metadata={"config": ckpt.config.to_dict(),
                  "val_history": [[int(s), float(p)] for s, p in ckpt.val_history],
                  "best_step": ckpt.best_step},
        hashes={"backbone": ckpt.backbone_hash,
                "weights": tensor_dict_hash(ckpt.tensors)})


def load_checkpoint(path, backbone: Backbone,
                    expect: RunConfig | None = None) -> Checkpoint:
    c = read_container(path)
    if c.role != "checkpoint":
        raise IntegrityError(f"{path}: expected role 'checkpoint', got {c.role!r}")
    if c.hashes.get("weights") != tensor_dict_hash(c.tensors):
        raise IntegrityError(f"{path}: tensor payload hash mismatch")
    config = RunConfig.from_dict(c.metadata["config"])
    ckpt = Checkpoint(tensors=c.tensors, config=config,
                      backbone_hash=c.hashes.get("backbone", ""),
                      val_history=[(s, p) for s, p in c.metadata["val_history"]],
                      best_step=c.metadata["best_step"])
    if ckpt.backbone_hash != backbone.weight_hash():
        raise IntegrityError(f"{path}: checkpoint requires a backbone with hash "
                             f"{ckpt.backbone_hash[:12]}..")
    if expect is not None:
        if config.m != expect.m:
            raise ConfigError(f"checkpoint has m={config.m}, run expects m={expect.m}")
        if config.method != expect.method:
            raise ConfigError(f"checkpoint method {config.method!r} != run "
                              f"method {expect.method!r}")
    return ckpt


def write_trace_csv(path, trace: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,split,loss,perplexity\n")
        for row in trace:
            f.write(f"{row['step']},{row['split']},{row['loss']!r},{row['perplexity']!r}\n")


def write_config_toml(path, config: RunConfig) -> None:
    from .toml_io import dump_toml
    with open(path, "w", encoding="utf-8") as f:
        f.write(dump_toml(config.to_dict()))

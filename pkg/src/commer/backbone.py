"""Tiny decoder-only transformer used both as frozen generator and, with a
low-rank adapter enabled, as the compressor body.

Pre-norm blocks with RMS normalization, GELU feed-forward, learned absolute
positions, and a weight-tied output head. Inputs are mixed sequences of soft
embedding blocks and token ids; the causal mask covers the concatenation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tokenizer
from .autodiff import (Tensor, add, backward, concat, cross_entropy_logits, dropout,
                       embedding, gelu, matmul, rms_norm, slice_axis, softmax, zero_grads)
from .container import read_container, tensor_dict_hash, write_container
from .errors import ConfigError, ContractViolation, IntegrityError, NumericFault
from .optim import AdamState, LrSchedule, ParamGroup, adamw_step, clip_global_norm


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_positions: int = 512
    vocab_size: int = tokenizer.VOCAB_SIZE
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return {"d_model": self.d_model, "n_layers": self.n_layers,
                "n_heads": self.n_heads, "d_ff": self.d_ff,
                "max_positions": self.max_positions, "vocab_size": self.vocab_size,
                "norm_eps": self.norm_eps}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**{k: d[k] for k in ("d_model", "n_layers", "n_heads", "d_ff",
                                        "max_positions", "vocab_size", "norm_eps")})


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout_p: float = 0.1
    targets: tuple = ("wq", "wk", "wv", "wo")


@dataclass
class SoftInput:
    """Ordered mix of soft embedding blocks and token id runs.

    `prompt_tokens` is the reported prompt cost (prefix rows plus instruction
    tokens); builders fill it in.
    """
    segments: list
    prompt_tokens: int = 0

    def total_len(self) -> int:
        n = 0
        for seg in self.segments:
            n += seg.shape[0] if isinstance(seg, Tensor) else len(seg)
        return n


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    mask = _MASK_CACHE.get(n)
    if mask is None:
        mask = np.triu(np.full((n, n), -1e9, dtype=np.float32), k=1)
        _MASK_CACHE[n] = mask
    return mask


class LoraAdapter:
    """Per-target low-rank factor pairs; zero-initialized B keeps the adapted
    forward exactly equal to the frozen forward at step 0."""

    def __init__(self, config: LoraConfig, backbone_config: BackboneConfig,
                 rng: np.random.Generator, init_std: float = 0.02):
        self.config = config
        self.params: dict[str, Tensor] = {}
        dims = {"wq": (backbone_config.d_model, backbone_config.d_model),
                "wk": (backbone_config.d_model, backbone_config.d_model),
                "wv": (backbone_config.d_model, backbone_config.d_model),
                "wo": (backbone_config.d_model, backbone_config.d_model),
                "w1": (backbone_config.d_model, backbone_config.d_ff),
                "w2": (backbone_config.d_ff, backbone_config.d_model)}
        for li in range(backbone_config.n_layers):
            for t in config.targets:
                d_in, d_out = dims[t]
                a = rng.normal(0.0, init_std, size=(config.rank, d_in)).astype(np.float32)
                self.params[f"lora.{li}.{t}.A"] = Tensor(a, requires_grad=True,
                                                         name=f"lora.{li}.{t}.A")
                self.params[f"lora.{li}.{t}.B"] = Tensor(
                    np.zeros((d_out, config.rank), dtype=np.float32),
                    requires_grad=True, name=f"lora.{li}.{t}.B")

    def tensors(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


class Backbone:
    def __init__(self, config: BackboneConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: BackboneConfig, seed: int | None = None) -> "Backbone":
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}

        def gauss(name, shape):
            p[name] = Tensor(rng.normal(0.0, 0.02, size=shape).astype(np.float32),
                             requires_grad=True, name=name)

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape, dtype=np.float32), requires_grad=True, name=name)

        gauss("tok_emb", (config.vocab_size, config.d_model))
        gauss("pos_emb", (config.max_positions, config.d_model))
        for li in range(config.n_layers):
            ones(f"layers.{li}.attn_norm", (config.d_model,))
            for w in ("wq", "wk", "wv", "wo"):
                gauss(f"layers.{li}.{w}", (config.d_model, config.d_model))
            ones(f"layers.{li}.mlp_norm", (config.d_model,))
            gauss(f"layers.{li}.w1", (config.d_model, config.d_ff))
            gauss(f"layers.{li}.w2", (config.d_ff, config.d_model))
        ones("final_norm", (config.d_model,))
        return cls(config, p)

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.params.values())

    def weight_hash(self) -> str:
        return tensor_dict_hash({k: t.data for k, t in self.params.items()})

    # -- forward ------------------------------------------------------------

    def embed(self, ids) -> Tensor:
        return embedding(self.params["tok_emb"], np.asarray(ids, dtype=np.int64))

    def _proj(self, x: Tensor, li: int, name: str, lora: LoraAdapter | None,
              train_mode: bool, rng) -> Tensor:
        base = matmul(x, self.params[f"layers.{li}.{name}"])
        if lora is not None and name in lora.config.targets:
            a = lora.params[f"lora.{li}.{name}.A"]
            b = lora.params[f"lora.{li}.{name}.B"]
            xin = dropout(x, lora.config.dropout_p, rng) if train_mode else x
            upd = matmul(matmul(xin, a, tb=True), b, tb=True,
                         scale=lora.config.alpha / lora.config.rank)
            return add(base, upd)
        return base

    def hidden(self, soft_input: SoftInput, lora: LoraAdapter | None = None,
               train_mode: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Final-layer hidden states (post final norm) for a mixed input."""
        cfg = self.config
        if train_mode and lora is not None and lora.config.dropout_p > 0 and rng is None:
            raise ContractViolation("train_mode dropout needs an rng")
        blocks = []
        for seg in soft_input.segments:
            if isinstance(seg, Tensor):
                if seg.shape[-1] != cfg.d_model:
                    raise ContractViolation(
                        f"soft block width {seg.shape[-1]} != d_model {cfg.d_model}")
                blocks.append(seg)
            else:
                if len(seg):
                    blocks.append(self.embed(seg))
        if not blocks:
            raise ContractViolation("empty input sequence")
        x = blocks[0] if len(blocks) == 1 else concat(blocks, axis=0)
        n = x.shape[0]
        if n > cfg.max_positions:
            raise ContractViolation(f"sequence of {n} exceeds max_positions {cfg.max_positions}")
        x = add(x, slice_axis(self.params["pos_emb"], 0, n, axis=0))

        hd = cfg.d_model // cfg.n_heads
        inv = 1.0 / math.sqrt(hd)
        mask = _causal_mask(n)
        for li in range(cfg.n_layers):
            xn = rms_norm(x, self.params[f"layers.{li}.attn_norm"], cfg.norm_eps)
            q = self._proj(xn, li, "wq", lora, train_mode, rng)
            k = self._proj(xn, li, "wk", lora, train_mode, rng)
            v = self._proj(xn, li, "wv", lora, train_mode, rng)
            heads = []
            for h in range(cfg.n_heads):
                s, e = h * hd, (h + 1) * hd
                qh = slice_axis(q, s, e, axis=1)
                kh = slice_axis(k, s, e, axis=1)
                vh = slice_axis(v, s, e, axis=1)
                attn = softmax(matmul(qh, kh, tb=True, scale=inv), additive_mask=mask)
                heads.append(matmul(attn, vh))
            merged = heads[0] if cfg.n_heads == 1 else concat(heads, axis=1)
            x = add(x, self._proj(merged, li, "wo", lora, train_mode, rng))

            xn = rms_norm(x, self.params[f"layers.{li}.mlp_norm"], cfg.norm_eps)
            x = add(x, matmul(gelu(matmul(xn, self.params[f"layers.{li}.w1"])),
                              self.params[f"layers.{li}.w2"]))
        return rms_norm(x, self.params["final_norm"], cfg.norm_eps)

    def logits(self, hidden: Tensor) -> Tensor:
        """Weight-tied head: hidden @ tok_emb^T."""
        return matmul(hidden, self.params["tok_emb"], tb=True)

    def forward(self, soft_input: SoftInput, lora: LoraAdapter | None = None,
                train_mode: bool = False, rng: np.random.Generator | None = None
                ) -> tuple[Tensor, Tensor]:
        h = self.hidden(soft_input, lora=lora, train_mode=train_mode, rng=rng)
        return h, self.logits(h)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        tensors = {k: t.data for k, t in self.params.items()}
        write_container(path, role="backbone", tensors=tensors,
                        metadata={"config": self.config.to_dict(),
                                  "vocab": tokenizer.Vocab().layout()},
                        hashes={"weights": self.weight_hash()})

    @classmethod
    def load(cls, path) -> "Backbone":
        c = read_container(path)
        if c.role != "backbone":
            raise IntegrityError(f"{path}: expected role 'backbone', got {c.role!r}")
        config = BackboneConfig.from_dict(c.metadata["config"])
        params = {k: Tensor(v, requires_grad=False, name=k) for k, v in c.tensors.items()}
        bb = cls(config, params)
        got = bb.weight_hash()
        want = c.hashes.get("weights")
        if want is not None and got != want:
            raise IntegrityError(f"{path}: weight hash mismatch ({got} != {want})")
        return bb


def pretrain_backbone(corpus, config: BackboneConfig, steps: int, seed: int,
                      batch_size: int = 8, peak_lr: float = 3e-3,
                      warmup_fraction: float = 0.03, clip_norm: float = 1.0,
                      log_every: int = 0,
                      loss_trace: list | None = None) -> Backbone:
    """Next-token pretraining on a text corpus, then freeze.

    `corpus` is a finite sequence (cycled) or an iterator yielding at least
    steps*batch_size lines. Before freezing, the SEP embedding row is copied
    from the newline byte so the separator token behaves like the boundary
    character seen in pretraining text. Per-step mean losses are appended to
    `loss_trace` when given.
    """
    def stream():
        if isinstance(corpus, (list, tuple)):
            if not corpus:
                raise ContractViolation("empty pretraining corpus")
            while True:
                yield from corpus
        else:
            yield from corpus

    lines = stream()
    bb = Backbone.init(config, seed=seed)
    params = [bb.params[k] for k in sorted(bb.params)]
    schedule = LrSchedule(total_steps=steps, warmup_fraction=warmup_fraction)
    group = ParamGroup("backbone", params, peak_lr=peak_lr)
    state = AdamState()
    losses = []
    for step in range(steps):
        zero_grads(params)
        total = 0.0
        for _ in range(batch_size):
            try:
                line = next(lines)
            except StopIteration:
                raise ContractViolation("pretraining corpus exhausted") from None
            ids = tokenizer.encode(line)[: config.max_positions - 1] + [tokenizer.EOS]
            if len(ids) < 2:
                continue
            h = bb.hidden(SoftInput([ids[:-1]]))
            loss = cross_entropy_logits(bb.logits(h), np.asarray(ids[1:]))
            if np.isnan(loss.data):
                raise NumericFault(f"NaN loss at pretraining step {step}")
            total += float(loss.data)
            backward(loss)
        grads = {p.id: p.grad for p in params if p.grad is not None}
        for g in grads.values():
            g *= np.float32(1.0 / batch_size)
        clip_global_norm(grads, clip_norm)
        adamw_step([group], grads, state, step, schedule)
        losses.append(total / batch_size)
        if loss_trace is not None:
            loss_trace.append(losses[-1])
        if log_every and step % log_every == 0:
            print(f"backbone step {step}: loss {losses[-1]:.4f}")

    emb = bb.params["tok_emb"].data
    emb[tokenizer.SEP] = emb[tokenizer.SEP_SURROGATE]
    bb.freeze()
    return bb

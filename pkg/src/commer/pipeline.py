"""Method-level assembly: everything between an Example and a scalar loss.

Supported methods:
    commer        per-document compression, mean-pool merge
    commer_concat per-document compression, concatenated merge
    concat_commer single compression of SEP-joined documents
    prompt_tuning trainable soft prompt over raw documents

For the compression methods with zero documents the compressor runs on the
empty document, so the run still has trainable parameters and the reported
prompt cost keeps its m rows; the bare no-prefix input path remains available
through generator.build_input_commer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tokenizer
from .autodiff import Tensor
from .backbone import Backbone, LoraAdapter, LoraConfig, SoftInput
from .compressor import CompressionEmbeddings, compress_ids
from .data import Example, subsample_docs
from .errors import ConfigError
from .generator import (SoftPromptBaseline, build_input_commer,
                        build_input_prompt_tuning, decode_greedy, loss)
from .merger import compress_concat_docs_ids, merge_concat_graph, merge_mean_graph

METHODS = ("commer", "commer_concat", "concat_commer", "prompt_tuning")
COMPRESSION_METHODS = ("commer", "commer_concat", "concat_commer")


@dataclass
class ModelParts:
    """The trainable pieces for one run plus the frozen backbone."""
    method: str
    backbone: Backbone
    embeddings: CompressionEmbeddings | None = None
    lora: LoraAdapter | None = None
    soft_prompt: SoftPromptBaseline | None = None
    budget_tokens: int | None = None

    def trainable(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.embeddings is not None:
            out[self.embeddings.table.name] = self.embeddings.table
        if self.lora is not None:
            out.update(self.lora.params)
        if self.soft_prompt is not None:
            out[self.soft_prompt.table.name] = self.soft_prompt.table
        return out


def init_parts(method: str, backbone: Backbone, m: int, lora_config: LoraConfig,
               seed: int, budget_tokens: int | None = None) -> ModelParts:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    rng = np.random.default_rng(seed)
    if method == "prompt_tuning":
        return ModelParts(method, backbone,
                          soft_prompt=SoftPromptBaseline(m, backbone, rng),
                          budget_tokens=budget_tokens)
    return ModelParts(method, backbone,
                      embeddings=CompressionEmbeddings(m, backbone.config.d_model, rng),
                      lora=LoraAdapter(lora_config, backbone.config, rng),
                      budget_tokens=budget_tokens)


def prefix_graph(parts: ModelParts, docs: list[str], train_mode: bool,
                 rng: np.random.Generator | None) -> Tensor:
    """Merged compression node for one example's documents."""
    bb, emb, lora = parts.backbone, parts.embeddings, parts.lora
    if parts.method == "concat_commer" and docs:
        return compress_concat_docs_ids(docs, emb, bb, lora, train_mode, rng)
    id_runs = [tokenizer.encode(d) for d in docs] if docs else [[]]
    blocks = [compress_ids(ids, emb, bb, lora, train_mode, rng) for ids in id_runs]
    if parts.method == "commer_concat":
        return merge_concat_graph(blocks)
    return merge_mean_graph(blocks)


def build_input(parts: ModelParts, docs: list[str], x: str, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> SoftInput:
    if parts.method == "prompt_tuning":
        return build_input_prompt_tuning(parts.soft_prompt, docs, x,
                                         budget_tokens=parts.budget_tokens)
    return build_input_commer(prefix_graph(parts, docs, train_mode, rng), x)


def pick_docs(example: Example, n_docs: int, seed: int, index: int) -> list[str]:
    """Deterministic per-example document subset."""
    rng = np.random.default_rng([seed, index])
    return subsample_docs(example.docs, example.y, n_docs, rng)


def example_loss(parts: ModelParts, example: Example, docs: list[str],
                 train_mode: bool = False, rng: np.random.Generator | None = None):
    """Scalar loss node plus per-target-token NLLs for one example."""
    si = build_input(parts, docs, example.x, train_mode=train_mode, rng=rng)
    return loss(si, example.y, parts.backbone)


def example_nll(parts: ModelParts, example: Example, docs: list[str]) -> np.ndarray:
    """Inference-mode per-token negative log-likelihoods of the target."""
    _, nll = example_loss(parts, example, docs, train_mode=False)
    return nll


def example_prompt_tokens(parts: ModelParts, example: Example, docs: list[str]) -> int:
    return build_input(parts, docs, example.x).prompt_tokens


def decode_example(parts: ModelParts, example: Example, docs: list[str],
                   max_new_tokens: int = 64) -> str:
    si = build_input(parts, docs, example.x)
    return decode_greedy(si, parts.backbone, max_new_tokens)

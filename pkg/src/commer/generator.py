"""Frozen-backbone input assembly, masked target loss, and greedy decoding.

Prompt layout for the compression path: [merged soft prompt rows; instruction
bytes; newline boundary]. The prompt-tuning baseline instead prepends its own
trainable table to the raw documents (SEP-joined) and the instruction. The
loss is cross-entropy averaged over exactly the target tokens plus EOS, so
perplexity is exp(loss) directly.
"""

from __future__ import annotations

import numpy as np

from . import tokenizer
from .autodiff import Tensor, constant, cross_entropy_logits, matmul, slice_axis
from .backbone import Backbone, SoftInput
from .compressor import Compression
from .errors import ContractViolation

BOUNDARY = ord("\n")  # instruction/target separator byte


class SoftPromptBaseline:
    """Trainable prompt-tuning table, rows drawn from the embedding table."""

    def __init__(self, m: int, bb: Backbone, rng: np.random.Generator):
        table = bb.params["tok_emb"].data
        rows = rng.integers(0, table.shape[0], size=m)
        self.m = m
        self.table = Tensor(table[rows].copy(), requires_grad=True, name="soft_prompt")


def instruction_ids(x: str) -> list[int]:
    return tokenizer.encode(x) + [BOUNDARY]


def target_ids(y: str) -> list[int]:
    return tokenizer.encode(y) + [tokenizer.EOS]


def _as_block(prefix) -> Tensor | None:
    if prefix is None:
        return None
    if isinstance(prefix, Tensor):
        return prefix
    if isinstance(prefix, Compression):
        return constant(prefix.matrix)
    raise ContractViolation(f"unsupported prefix type {type(prefix).__name__}")


def build_input_commer(merged, x: str) -> SoftInput:
    """[merged rows; instruction]; with no merged compression (the zero
    document case) the instruction goes in alone."""
    ids = instruction_ids(x)
    block = _as_block(merged)
    if block is None:
        return SoftInput([ids], prompt_tokens=len(ids))
    return SoftInput([block, ids], prompt_tokens=block.shape[0] + len(ids))


def truncate_docs_to_budget(docs: list[str], m: int, n_instruction: int,
                            budget: int) -> list[str]:
    """Greedy packing of documents (each followed by SEP) into what remains
    of a prompt-token budget; the last document that partially fits is
    truncated at the byte level, later ones are dropped."""
    avail = budget - m - n_instruction
    kept: list[str] = []
    for doc in docs:
        if avail <= 1:
            break
        room = avail - 1  # SEP
        raw = tokenizer.encode(doc)
        if len(raw) <= room:
            kept.append(doc)
            avail -= len(raw) + 1
        else:
            kept.append(bytes(raw[:room]).decode("utf-8", errors="ignore"))
            avail = 0
    return [d for d in kept if d]


def build_input_prompt_tuning(soft: SoftPromptBaseline, docs: list[str], x: str,
                              budget_tokens: int | None = None) -> SoftInput:
    """[soft prompt; doc_1 SEP ... doc_n SEP instruction]."""
    ids = instruction_ids(x)
    if budget_tokens is not None:
        docs = truncate_docs_to_budget(docs, soft.m, len(ids), budget_tokens)
    doc_ids: list[int] = []
    for doc in docs:
        doc_ids.extend(tokenizer.encode(doc))
        doc_ids.append(tokenizer.SEP)
    return SoftInput([soft.table, doc_ids + ids],
                     prompt_tokens=soft.m + len(doc_ids) + len(ids))


def loss(soft_input: SoftInput, y: str, bb: Backbone,
         train_mode: bool = False, lora=None,
         rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
    """Teacher-forced loss over the target tokens plus EOS.

    Returns the scalar loss node and the per-token negative log-likelihoods.
    Only the hidden rows that predict target positions are pushed through the
    output head, so non-target labels cannot influence the loss.
    """
    if not y:
        raise ContractViolation("target must be non-empty")
    y_ids = target_ids(y)
    prompt_len = soft_input.total_len()
    full = SoftInput(list(soft_input.segments) + [y_ids])
    total = prompt_len + len(y_ids)
    if total > bb.config.max_positions:
        raise ContractViolation(f"sequence of {total} exceeds max_positions")
    h = bb.hidden(full, lora=lora, train_mode=train_mode, rng=rng)
    rows = slice_axis(h, prompt_len - 1, total - 1, axis=0)
    node = cross_entropy_logits(matmul(rows, bb.params["tok_emb"], tb=True),
                                np.asarray(y_ids))
    return node, node.aux


def decode_greedy(soft_input: SoftInput, bb: Backbone, max_new_tokens: int) -> str:
    """Repeated argmax continuation; stops at EOS or the token limit.

    np.argmax resolves ties toward the lowest token id.
    """
    if max_new_tokens < 1:
        raise ContractViolation("max_new_tokens must be >= 1")
    generated: list[int] = []
    for _ in range(max_new_tokens):
        segs = list(soft_input.segments) + ([generated] if generated else [])
        si = SoftInput(segs)
        n = si.total_len()
        if n >= bb.config.max_positions:
            break
        h = bb.hidden(si)
        last = slice_axis(h, n - 1, n, axis=0)
        logits = matmul(last, bb.params["tok_emb"], tb=True)
        nxt = int(np.argmax(logits.data[0]))
        if nxt == tokenizer.EOS:
            break
        generated.append(nxt)
    return tokenizer.decode(generated)

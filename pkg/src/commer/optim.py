"""Optimization primitives: cosine schedule, global-norm clipping, AdamW.

Parameter groups let the two trainable families (adapter factors and soft
embeddings) run at different peak learning rates under one shared schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ContractViolation


@dataclass(frozen=True)
class LrSchedule:
    total_steps: int
    warmup_fraction: float = 0.03
    kind: str = "cosine"

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ContractViolation("total_steps must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ContractViolation("warmup_fraction must lie in [0, 1)")
        if self.kind != "cosine":
            raise ContractViolation(f"unsupported schedule kind {self.kind!r}")

    @property
    def warmup_steps(self) -> int:
        return math.floor(self.warmup_fraction * self.total_steps)


def cosine_lr(step: int, schedule: LrSchedule, peak_lr: float) -> float:
    """Linear warmup to peak_lr, then cosine decay to zero at total_steps."""
    w, total = schedule.warmup_steps, schedule.total_steps
    if step < 0:
        raise ContractViolation("step must be non-negative")
    if step > total:
        return 0.0
    if step < w:
        return peak_lr * step / w
    # warmup_fraction < 1 guarantees w < total
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total - w)))


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Mutates the gradient buffers in place and returns (grads, observed norm).
    The norm is accumulated in float64 over sorted keys for determinism.
    """
    if max_norm <= 0:
        raise ContractViolation("max_norm must be positive")
    sq = 0.0
    for key in sorted(grads):
        g = grads[key]
        sq += float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
    norm = math.sqrt(sq)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= g.dtype.type(factor)
    return grads, norm


@dataclass
class ParamGroup:
    name: str
    params: list[Tensor]
    peak_lr: float
    weight_decay: float | None = None  # None: use the step-level default

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ContractViolation(f"group {self.name!r} needs peak_lr > 0")
        for p in self.params:
            if p.name is None:
                raise ConfigError(f"group {self.name!r} contains an unnamed parameter")


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(groups: list[ParamGroup], grads: dict[int, np.ndarray], state: AdamState,
               step: int, schedule: LrSchedule, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One AdamW update over all groups at their scheduled learning rates.

    Weight decay is decoupled (applied to the parameter before the moment
    update term) and may be overridden per group. `grads` is keyed by tensor
    id as produced by the backward sweep; a gradient whose id matches no
    grouped parameter is a configuration error.
    """
    b1, b2 = betas
    t = step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    covered = set()
    for group in groups:
        lr = cosine_lr(step, schedule, group.peak_lr)
        wd = weight_decay if group.weight_decay is None else group.weight_decay
        for p in group.params:
            covered.add(p.id)
            g = grads.get(p.id)
            if g is None:
                continue
            dt = p.data.dtype
            if wd:
                p.data -= dt.type(lr * wd) * p.data
            m = state.m.get(p.name)
            if m is None:
                m = state.m[p.name] = np.zeros_like(p.data)
            v = state.v.get(p.name)
            if v is None:
                v = state.v[p.name] = np.zeros_like(p.data)
            m *= dt.type(b1)
            m += dt.type(1.0 - b1) * g
            v *= dt.type(b2)
            v += dt.type(1.0 - b2) * (g * g)
            m_hat = m / dt.type(c1)
            v_hat = v / dt.type(c2)
            p.data -= dt.type(lr) * m_hat / (np.sqrt(v_hat) + dt.type(eps))
    stray = set(grads) - covered
    if stray:
        raise ConfigError(f"gradients for parameters outside every group: {sorted(stray)}")

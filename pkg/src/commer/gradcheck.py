"""Finite-difference gradient checking in float64.

The checker owns its float64 clones of the supplied parameters, so callers
can hand over float32 training tensors unchanged. Coordinate subsampling is
seeded and reported in the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, backward, zero_grads
from .errors import DeterminismError

LossBuilder = Callable[[list[Tensor]], Tensor]


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_coords: int
    seed: int
    step: float
    per_param: dict[str, float] = field(default_factory=dict)

    def __repr__(self) -> str:
        return (f"GradCheckResult(max_rel_error={self.max_rel_error:.3e}, "
                f"n_coords={self.n_coords}, seed={self.seed})")


def grad_check(loss_builder: LossBuilder, params: list[Tensor], step: float = 1e-4,
               max_coords_per_param: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    `loss_builder` must be a deterministic function of the parameter list; it
    is evaluated twice up front and a bitwise mismatch raises
    DeterminismError. Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    clones = [Tensor(p.data.astype(np.float64), requires_grad=True,
                     name=p.name or f"p{i}") for i, p in enumerate(params)]

    loss_a = loss_builder(clones)
    loss_b = loss_builder(clones)
    if loss_a.data.tobytes() != loss_b.data.tobytes():
        raise DeterminismError("loss_builder produced different values on identical inputs")

    zero_grads(clones)
    backward(loss_a)

    rng = np.random.default_rng(seed)
    result = GradCheckResult(0.0, 0, seed, step)
    for clone in clones:
        flat = clone.data.reshape(-1)
        n = flat.shape[0]
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = np.sort(rng.choice(n, size=max_coords_per_param, replace=False))
        else:
            coords = np.arange(n)
        analytic = np.zeros(n) if clone.grad is None else clone.grad.reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = float(loss_builder(clones).data)
            flat[c] = orig - step
            f_minus = float(loss_builder(clones).data)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        result.per_param[clone.name] = worst
        result.n_coords += len(coords)
        result.max_rel_error = max(result.max_rel_error, worst)
    return result

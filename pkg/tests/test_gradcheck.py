"""The checker itself: exactness on quadratics, sensitivity to wrong rules,
and the determinism guard."""

import numpy as np
import pytest

from commer import autodiff as ad
from commer.autodiff import mul, param, sum_all
from commer.errors import DeterminismError
from commer.gradcheck import grad_check


def test_quadratic_is_exact():
    p = param(np.array([0.3, -1.2, 2.0]), "p", dtype=np.float64)
    res = grad_check(lambda ps: sum_all(mul(ps[0], ps[0])), [p])
    assert res.max_rel_error <= 1e-9
    assert res.n_coords == 3


def test_detects_corrupted_backward_rule():
    def bad_square(x):
        def bwd(g):
            ad._accum(x, 3.0 * x.data * g)  # wrong factor; true rule is 2x
        return ad._node(x.data * x.data, (x,), "bad_square", bwd)

    p = param(np.array([0.5, 1.5]), "p", dtype=np.float64)
    res = grad_check(lambda ps: sum_all(bad_square(ps[0])), [p])
    assert res.max_rel_error > 1e-1


def test_nondeterministic_builder_rejected():
    state = {"calls": 0}

    def builder(ps):
        state["calls"] += 1
        return sum_all(mul(ps[0], ad.constant(np.full(2, float(state["calls"])),
                                              dtype=np.float64)))

    p = param(np.ones(2), "p", dtype=np.float64)
    with pytest.raises(DeterminismError):
        grad_check(builder, [p])


def test_subsampling_is_seeded_and_reported():
    p = param(np.arange(100, dtype=np.float64), "p", dtype=np.float64)
    r1 = grad_check(lambda ps: sum_all(mul(ps[0], ps[0])), [p],
                    max_coords_per_param=7, seed=5)
    r2 = grad_check(lambda ps: sum_all(mul(ps[0], ps[0])), [p],
                    max_coords_per_param=7, seed=5)
    assert r1.n_coords == r2.n_coords == 7
    assert r1.seed == 5
    assert r1.max_rel_error == r2.max_rel_error


def test_checker_does_not_mutate_original_params():
    data = np.array([1.0, 2.0], dtype=np.float32)
    p = param(data.copy(), "p")
    grad_check(lambda ps: sum_all(mul(ps[0], ps[0])), [p])
    np.testing.assert_array_equal(p.data, data)
    assert p.grad is None

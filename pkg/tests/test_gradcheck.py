"""Contracts of the central-difference gradient checker."""

import numpy as np
import pytest

from seunet_trans.gradcheck import finite_diff_gradcheck
from seunet_trans.ops import gelu
from seunet_trans.tensor import AutodiffError, Tensor, _accum, _record, matmul, tensor_sum


def test_linear_map_is_exact_to_rounding():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(6, 4))

    def f(t):
        return tensor_sum(matmul(t, Tensor(w)))

    report = finite_diff_gradcheck(f, Tensor(rng.normal(size=(3, 6))), tolerance=1e-10)
    assert report.passed
    assert report.max_rel_err <= 1e-10


def test_gelu_at_one_matches_central_difference():
    def f(t):
        return tensor_sum(gelu(t))

    report = finite_diff_gradcheck(f, Tensor(np.array([1.0])), tolerance=1e-6)
    assert report.passed
    # the analytic value approx 0.841345 comes from the normal CDF at 1
    point = Tensor(np.array([1.0]))
    out = gelu(point)
    np.testing.assert_allclose(out.data, [0.8413447], atol=1e-6)


def _doubled_backward_identity(x: Tensor) -> Tensor:
    """An op whose backward rule is deliberately wrong by a factor of 2."""
    out = Tensor(x.data.copy())

    def backward(g):
        _accum(x, 2.0 * g)

    _record(out, backward)
    return out


def test_corrupted_backward_rule_fails():
    def f(t):
        return tensor_sum(_doubled_backward_identity(t))

    report = finite_diff_gradcheck(f, Tensor(np.ones(5)), tolerance=1e-4)
    assert not report.passed
    assert report.max_rel_err > 0.4


def test_non_scalar_target_raises():
    with pytest.raises(AutodiffError, match="scalar"):
        finite_diff_gradcheck(lambda t: t + t, Tensor(np.ones(3)))


def test_float32_point_rejected():
    with pytest.raises(AutodiffError, match="float64"):
        finite_diff_gradcheck(lambda t: tensor_sum(t), Tensor(np.ones(3, dtype=np.float32)))


def test_large_tensors_sample_at_least_64_coordinates():
    def f(t):
        return tensor_sum(t * t)

    report = finite_diff_gradcheck(f, Tensor(np.random.default_rng(1).normal(size=(40, 40))))
    assert report.coords_checked == 64
    assert report.passed


def test_small_tensors_check_every_coordinate():
    def f(t):
        return tensor_sum(t * t)

    report = finite_diff_gradcheck(f, Tensor(np.random.default_rng(1).normal(size=(3, 5))))
    assert report.coords_checked == 15

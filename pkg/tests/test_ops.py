"""Forward values, invariants, and error contracts of the neural operators."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from seunet_trans import ops
from seunet_trans.tensor import ShapeError, Tape, Tensor, backward_accumulate


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_conv2d_all_ones_3x3():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ops.conv2d(x, w, stride=1, padding=1)
    assert_array_equal(out.data[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv2d_1x1_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 4, 4)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    b = Tensor(np.zeros(1))
    assert_array_equal(ops.conv2d(x, w, b).data, x.data)


def test_conv_output_extent_formula():
    assert ops.ConvSpec(1, 1, kernel=3, stride=4, padding=1).output_extent(256) == 64


def test_conv_kernel_larger_than_padded_input_errors():
    with pytest.raises(ShapeError, match="larger than padded input"):
        ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), padding=1)
    with pytest.raises(ShapeError, match="larger"):
        ops.ConvSpec(1, 1, kernel=5, stride=1, padding=1).output_extent(2)


def test_conv2d_channel_mismatch_errors():
    with pytest.raises(ShapeError, match="channel mismatch"):
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


# ---------------------------------------------------------------------------
# conv_transpose2d
# ---------------------------------------------------------------------------


def test_conv_transpose_scatters_single_input():
    v = 3.25
    x = Tensor(np.full((1, 1, 1, 1), v))
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = ops.conv_transpose2d(x, w, stride=2)
    assert out.shape == (1, 1, 2, 2)
    assert_array_equal(out.data, np.full((1, 1, 2, 2), v))


def test_conv_transpose_extent_doubles():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 5, 5)))
    w = Tensor(np.random.default_rng(1).normal(size=(2, 3, 2, 2)))
    assert ops.conv_transpose2d(x, w, stride=2).shape == (1, 3, 10, 10)


@pytest.mark.parametrize("stride,padding,kernel", [(1, 1, 3), (2, 0, 2)])
def test_conv_adjoint_identity(stride, padding, kernel):
    # <conv(x; W), y> == <x, conv_transpose(y; W)> at 64-bit on random 4x4 maps
    rng = np.random.default_rng(42)
    x = Tensor(rng.normal(size=(1, 1, 4, 4)))
    w_arr = rng.normal(size=(1, 1, kernel, kernel))
    y_map = ops.conv2d(x, Tensor(w_arr), stride=stride, padding=padding)
    y = Tensor(rng.normal(size=y_map.shape))
    lhs = float((y_map.data * y.data).sum())
    back = ops.conv_transpose2d(y, Tensor(w_arr), stride=stride, padding=padding)
    rhs = float((x.data * back.data).sum())
    assert abs(lhs - rhs) <= 1e-10


# ---------------------------------------------------------------------------
# maxpool2d
# ---------------------------------------------------------------------------


def test_maxpool_takes_window_maximum():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert_array_equal(ops.maxpool2d(x).data, [[[[4.0]]]])


def test_maxpool_constant_map_stays_constant():
    x = Tensor(np.full((1, 2, 6, 6), 0.7))
    out = ops.maxpool2d(x)
    assert out.shape == (1, 2, 3, 3)
    assert_array_equal(out.data, np.full((1, 2, 3, 3), 0.7))


def test_maxpool_odd_extent_errors():
    with pytest.raises(ShapeError, match="even"):
        ops.maxpool2d(Tensor(np.ones((1, 1, 3, 4))))


def test_maxpool_gradient_routes_to_argmax():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(1, 1, 4, 4))
    x = Tensor(data)
    with Tape() as tape:
        loss = ops.maxpool2d(x).sum()
        backward_accumulate(tape, loss)
    for wy in range(2):
        for wx in range(2):
            window = data[0, 0, 2 * wy : 2 * wy + 2, 2 * wx : 2 * wx + 2]
            grads = x.grad[0, 0, 2 * wy : 2 * wy + 2, 2 * wx : 2 * wx + 2]
            expected = np.zeros((2, 2))
            expected[np.unravel_index(window.argmax(), (2, 2))] = 1.0
            assert_array_equal(grads, expected)


def test_maxpool_tie_goes_to_first_occurrence():
    x = Tensor(np.zeros((1, 1, 2, 2)))
    with Tape() as tape:
        loss = ops.maxpool2d(x).sum()
        backward_accumulate(tape, loss)
    assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------


def _bn_state(channels, training=True, **kwargs):
    defaults = dict(
        gamma=Tensor(np.ones(channels)),
        beta=Tensor(np.zeros(channels)),
        training=training,
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
    )
    defaults.update(kwargs)
    return ops.NormState(**defaults)


def test_batchnorm_train_normalizes_per_channel():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(loc=2.0, scale=3.0, size=(4, 3, 5, 5)))
    out = ops.batchnorm2d(x, _bn_state(3)).data
    assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_batchnorm_constant_channel_maps_to_zero():
    x = Tensor(np.full((2, 1, 4, 4), 5.0))
    out = ops.batchnorm2d(x, _bn_state(1)).data
    assert_allclose(out, 0.0, atol=1e-5)


def test_batchnorm_eval_hand_case():
    # stored mean 2, var 4, gamma 1, beta 0, x=4, tiny eps: (4 - 2) / 2 = 1
    state = _bn_state(1, training=False, running_mean=np.array([2.0]), running_var=np.array([4.0]))
    state.eps = 1e-12
    out = ops.batchnorm2d(Tensor(np.full((1, 1, 2, 2), 4.0)), state).data
    assert_allclose(out, 1.0, atol=1e-9)


def test_batchnorm_single_sample_train_errors():
    with pytest.raises(ShapeError, match=">= 2 samples"):
        ops.batchnorm2d(Tensor(np.ones((1, 2, 1, 1))), _bn_state(2))


def test_batchnorm_eval_is_affine():
    rng = np.random.default_rng(7)
    state = _bn_state(
        3,
        training=False,
        gamma=Tensor(rng.normal(size=3)),
        beta=Tensor(rng.normal(size=3)),
        running_mean=rng.normal(size=3),
        running_var=rng.uniform(0.5, 2.0, size=3),
    )
    x = rng.normal(size=(2, 3, 4, 4))
    y = rng.normal(size=(2, 3, 4, 4))
    alpha, beta_c = 0.3, 1.7
    f = lambda arr: ops.batchnorm2d(Tensor(arr), state).data
    combined = f(alpha * x + beta_c * y)
    # affine map: f(ax + by) - f(0) == a (f(x) - f(0)) + b (f(y) - f(0))
    f0 = f(np.zeros_like(x))
    assert_allclose(combined - f0, alpha * (f(x) - f0) + beta_c * (f(y) - f0), atol=1e-9)


def test_batchnorm_updates_running_statistics():
    state = _bn_state(1)
    x = Tensor(np.random.default_rng(0).normal(loc=3.0, size=(2, 1, 4, 4)))
    ops.batchnorm2d(x, state)
    assert state.running_mean[0] != 0.0
    assert state.running_var[0] != 1.0
    assert state.running_var[0] >= 0.0


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------


def _ln_state(width):
    return ops.NormState(gamma=Tensor(np.ones(width)), beta=Tensor(np.zeros(width)))


def test_layernorm_token_mean_zero_var_one():
    rng = np.random.default_rng(5)
    t = Tensor(rng.normal(loc=4.0, scale=2.0, size=(2, 6, 8)))
    out = ops.layernorm(t, _ln_state(8)).data
    assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)


def test_layernorm_constant_token_is_zero():
    t = Tensor(np.full((1, 2, 4), 3.0))
    assert_allclose(ops.layernorm(t, _ln_state(4)).data, 0.0, atol=1e-5)


def test_layernorm_two_point_token():
    t = Tensor(np.array([[[1.0, 3.0]]]))
    out = ops.layernorm(t, _ln_state(2)).data
    assert_allclose(out, [[[-1.0, 1.0]]], atol=1e-4)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def test_activation_definitional_points():
    assert_array_equal(ops.relu(Tensor(np.array([-2.0, 3.0]))).data, [0.0, 3.0])
    assert_array_equal(ops.gelu(Tensor(np.array([0.0]))).data, [0.0])
    assert_array_equal(ops.sigmoid(Tensor(np.array([0.0]))).data, [0.5])


def test_gelu_exact_gaussian_cdf_at_one():
    assert_allclose(ops.gelu(Tensor(np.array([1.0]))).data, [0.841345], atol=1e-6)


def test_sigmoid_symmetry():
    x = np.random.default_rng(0).normal(scale=3.0, size=32)
    s = ops.sigmoid(Tensor(x)).data + ops.sigmoid(Tensor(-x)).data
    assert_allclose(s, 1.0, atol=1e-12)


def test_activation_dispatch_and_unknown_kind():
    x = Tensor(np.array([1.0]))
    assert_array_equal(ops.activation(x, "relu").data, [1.0])
    with pytest.raises(ValueError, match="unknown activation"):
        ops.activation(x, "tanh")


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_uniform_on_constant_rows():
    out = ops.softmax_lastdim(Tensor(np.zeros((1, 4)))).data
    assert_allclose(out, 0.25, atol=1e-12)


def test_softmax_hand_case_log3():
    out = ops.softmax_lastdim(Tensor(np.array([0.0, np.log(3.0)]))).data
    assert_allclose(out, [0.25, 0.75], atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(3, 5))
    a = ops.softmax_lastdim(Tensor(x)).data
    b = ops.softmax_lastdim(Tensor(x + 17.3)).data
    assert_allclose(a, b, atol=1e-12)


def test_softmax_rows_stochastic_and_positive():
    rng = np.random.default_rng(12)
    out = ops.softmax_lastdim(Tensor(rng.normal(scale=20.0, size=(64, 33)))).data
    assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert (out > 0).all()


# ---------------------------------------------------------------------------
# bilinear resize
# ---------------------------------------------------------------------------


def test_bilinear_constant_map_stays_constant():
    x = Tensor(np.full((1, 2, 3, 3), 0.4))
    out = ops.bilinear_resize(x, 4)
    assert out.shape == (1, 2, 12, 12)
    assert_allclose(out.data, 0.4, atol=1e-12)


def test_bilinear_factor_four_extents():
    x = Tensor(np.zeros((1, 1, 64, 64)))
    assert ops.bilinear_resize(x, 4).shape == (1, 1, 256, 256)


def test_bilinear_row_hand_case():
    x = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
    out = ops.bilinear_resize(x, 2)
    assert_allclose(out.data[0, 0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)


def test_bilinear_factor_zero_errors():
    with pytest.raises(ValueError, match="positive integer"):
        ops.bilinear_resize(Tensor(np.zeros((1, 1, 2, 2))), 0)


# ---------------------------------------------------------------------------
# channel concat and linear
# ---------------------------------------------------------------------------


def test_concat_channel_counts_add():
    a = Tensor(np.zeros((1, 2, 8, 8)))
    b = Tensor(np.ones((1, 3, 8, 8)))
    assert ops.concat_channels(a, b).shape == (1, 5, 8, 8)


def test_concat_preserves_first_operand_first():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(1, 2, 4, 4)))
    b = Tensor(rng.normal(size=(1, 2, 4, 4)))
    out = ops.concat_channels(a, b)
    assert_array_equal(out.data[:, 0], a.data[:, 0])
    assert_array_equal(out.data[:, 2], b.data[:, 0])


def test_concat_spatial_mismatch_errors():
    with pytest.raises(ShapeError) as err:
        ops.concat_channels(Tensor(np.ones((1, 2, 8, 8))), Tensor(np.ones((1, 2, 4, 4))))
    assert "(1, 2, 8, 8)" in str(err.value) and "(1, 2, 4, 4)" in str(err.value)


def test_linear_identity():
    t = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
    out = ops.linear(t, Tensor(np.eye(4)), Tensor(np.zeros(4)))
    assert_allclose(out.data, t.data, atol=1e-12)


def test_linear_hand_case():
    t = Tensor(np.array([[1.0, 2.0]]))
    w = Tensor(np.array([[1.0, 0.0], [1.0, 1.0]]))
    b = Tensor(np.array([0.5, 0.5]))
    assert_allclose(ops.linear(t, w, b).data, [[3.5, 2.5]], atol=1e-12)


def test_linear_zero_weight_returns_bias():
    t = Tensor(np.random.default_rng(0).normal(size=(2, 5, 3)))
    b = np.array([1.0, -2.0])
    out = ops.linear(t, Tensor(np.zeros((3, 2))), Tensor(b))
    assert_array_equal(out.data, np.broadcast_to(b, (2, 5, 2)))


def test_linear_width_mismatch_errors():
    with pytest.raises(ShapeError, match="width"):
        ops.linear(Tensor(np.ones((1, 2, 3))), Tensor(np.ones((4, 2))))

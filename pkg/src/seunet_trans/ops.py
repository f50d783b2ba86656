"""Neural-network operators: forward rules plus hand-written backward rules.

Everything here is a function of Tensors that registers a vector-Jacobian
closure on the active tape. Convolutions use an im2col/col2im formulation so
the inner loop is a single BLAS matmul; the integer-factor bilinear resize is
decomposed by output phase into pure strided-slice arithmetic, which keeps
the adjoint exact and fast.

Conventions: convolution is cross-correlation with zero padding, output
extents follow ``floor((H - E + 2P) / S) + 1``; bilinear sampling uses
half-pixel centers with edge clamping; GeLU is the exact Gaussian-CDF form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import ShapeError, Tensor, _accum, _record, add, concat, matmul, reshape

__all__ = [
    "ConvSpec",
    "NormState",
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "batchnorm2d",
    "layernorm",
    "relu",
    "gelu",
    "sigmoid",
    "activation",
    "softmax_lastdim",
    "bilinear_resize",
    "concat_channels",
    "linear",
]


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-d convolution layer."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid conv spec {self}")

    def output_extent(self, extent: int) -> int:
        """Spatial output extent: floor((H - E + 2P) / S) + 1."""
        span = extent - self.kernel + 2 * self.padding
        if span < 0:
            raise ShapeError(
                f"kernel {self.kernel} larger than padded input extent {extent + 2 * self.padding}"
            )
        return span // self.stride + 1


class NormState:
    """Learned scale/shift plus (for batch norm) running statistics.

    ``training`` selects between batch statistics (which also update the
    running estimates in place) and the stored running statistics.
    """

    def __init__(
        self,
        gamma: Tensor,
        beta: Tensor,
        eps: float = 1e-5,
        momentum: float = 0.1,
        training: bool = True,
        running_mean: Optional[np.ndarray] = None,
        running_var: Optional[np.ndarray] = None,
    ):
        self.gamma = gamma
        self.beta = beta
        self.eps = eps
        self.momentum = momentum
        self.training = training
        self.running_mean = running_mean
        self.running_var = running_var


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, int, int]:
    """[B, C, Hp, Wp] -> contiguous [C*E*E, B*H_out*W_out] plus output extents.

    Folding the batch into the column axis turns the whole convolution into
    one GEMM.
    """
    windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    b, c, h_out, w_out = windows.shape[:4]
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kernel * kernel, b * h_out * w_out)
    return np.ascontiguousarray(cols), h_out, w_out


def _col2im(
    g_cols: np.ndarray,
    x_shape: tuple[int, ...],
    kernel: int,
    stride: int,
    padding: int,
    h_out: int,
    w_out: int,
) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter column gradients back onto the image."""
    b, c, h, w = x_shape
    acc = np.zeros((c, b, h + 2 * padding, w + 2 * padding), dtype=g_cols.dtype)
    g = g_cols.reshape(c, kernel, kernel, b, h_out, w_out)
    for e1 in range(kernel):
        row_stop = e1 + (h_out - 1) * stride + 1
        for e2 in range(kernel):
            col_stop = e2 + (w_out - 1) * stride + 1
            acc[:, :, e1:row_stop:stride, e2:col_stop:stride] += g[:, e1, e2]
    if padding:
        acc = acc[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of ``x`` [B, C_in, H, W] with ``weight`` [C_out, C_in, E, E]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and weight, got {x.shape} and {weight.shape}")
    b, c_in, h, w = x.shape
    c_out, c_in_w, e, e2 = weight.shape
    if e != e2:
        raise ShapeError(f"conv2d kernel must be square, got {weight.shape}")
    if c_in != c_in_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if e > h + 2 * padding or e > w + 2 * padding:
        raise ShapeError(
            f"kernel {e}x{e} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    cols, h_out, w_out = _im2col(_pad2d(x.data, padding), e, stride)
    w_mat = weight.data.reshape(c_out, c_in * e * e)
    out2 = np.matmul(w_mat, cols)  # [C_out, B*L]
    out_data = np.ascontiguousarray(
        out2.reshape(c_out, b, h_out, w_out).transpose(1, 0, 2, 3)
    )
    if bias is not None:
        out_data += bias.data.reshape(1, c_out, 1, 1)
    out = Tensor(out_data)

    def backward(g: np.ndarray) -> None:
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, b * h_out * w_out)
        if bias is not None:
            _accum(bias, g2.sum(axis=1))
        _accum(weight, np.matmul(g2, cols.T).reshape(weight.shape))
        g_cols = np.matmul(w_mat.T, g2)
        _accum(x, _col2im(g_cols, x.shape, e, stride, padding, h_out, w_out))

    _record(out, backward)
    return out


def _dilate2d(x: Tensor, stride: int) -> Tensor:
    """Insert ``stride - 1`` zeros between spatial elements."""
    if stride == 1:
        return x
    b, c, h, w = x.shape
    out_data = np.zeros((b, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=x.dtype)
    out_data[:, :, ::stride, ::stride] = x.data
    out = Tensor(out_data)

    def backward(g: np.ndarray) -> None:
        _accum(x, np.ascontiguousarray(g[:, :, ::stride, ::stride]))

    _record(out, backward)
    return out


def _swap_flip_weight(weight: Tensor) -> Tensor:
    """[C_in, C_out, E, E] -> [C_out, C_in, E, E] with both spatial axes flipped."""
    out = Tensor(np.ascontiguousarray(weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]))

    def backward(g: np.ndarray) -> None:
        _accum(weight, np.ascontiguousarray(g.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]))

    _record(out, backward)
    return out


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Adjoint of ``conv2d``; ``weight`` is [C_in, C_out, E, E].

    Output spatial extent is ``(H - 1) * S - 2P + E``. Realized as zero
    insertion followed by a stride-1 convolution with the flipped kernel, so
    the adjoint identity with ``conv2d`` holds exactly.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d x and weight, got {x.shape}, {weight.shape}")
    c_in, c_out, e, e2 = weight.shape
    if e != e2:
        raise ShapeError(f"conv_transpose2d kernel must be square, got {weight.shape}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if padding > e - 1:
        raise ShapeError(f"conv_transpose2d requires padding <= kernel-1, got P={padding}, E={e}")
    dilated = _dilate2d(x, stride)
    return conv2d(dilated, _swap_flip_weight(weight), bias, stride=1, padding=e - 1 - padding)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient goes to the first argmax per window."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial extents, got {x.shape}")
    windows = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(b, c, h // 2, w // 2, 4)
    arg = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0])

    def backward(g: np.ndarray) -> None:
        g4 = np.zeros_like(windows)
        np.put_along_axis(g4, arg[..., None], g[..., None], axis=-1)
        dx = g4.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        _accum(x, np.ascontiguousarray(dx))

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def batchnorm2d(x: Tensor, state: NormState) -> Tensor:
    """Per-channel batch normalization over (batch, height, width)."""
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects [B, C, H, W], got {x.shape}")
    b, c, h, w = x.shape
    if state.gamma.shape != (c,):
        raise ShapeError(f"batchnorm2d gamma shape {state.gamma.shape} != ({c},)")
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    beta = state.beta.data.reshape(1, c, 1, 1)

    if state.training:
        n = b * h * w
        if n < 2:
            raise ShapeError("batchnorm2d in train mode needs >= 2 samples per channel")
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        x_hat = (x.data - mean) * inv_std
        if state.running_mean is not None:
            m = state.momentum
            state.running_mean *= 1.0 - m
            state.running_mean += m * mean.reshape(c)
            state.running_var *= 1.0 - m
            state.running_var += m * var.reshape(c) * (n / (n - 1))
    else:
        if state.running_mean is None:
            raise ShapeError("batchnorm2d eval mode needs running statistics")
        mean = state.running_mean.reshape(1, c, 1, 1)
        inv_std = 1.0 / np.sqrt(state.running_var.reshape(1, c, 1, 1) + state.eps)
        x_hat = (x.data - mean) * inv_std

    out = Tensor(gamma * x_hat + beta)
    training = state.training

    def backward(g: np.ndarray) -> None:
        _accum(state.beta, g.sum(axis=(0, 2, 3)))
        _accum(state.gamma, (g * x_hat).sum(axis=(0, 2, 3)))
        if training:
            n = b * h * w
            g_mean = g.mean(axis=(0, 2, 3), keepdims=True)
            gx_mean = (g * x_hat).mean(axis=(0, 2, 3), keepdims=True)
            dx = gamma * inv_std * (g - g_mean - x_hat * gx_mean)
        else:
            dx = gamma * inv_std * g
        _accum(x, dx.astype(x.dtype, copy=False))

    _record(out, backward)
    return out


def layernorm(t: Tensor, state: NormState) -> Tensor:
    """Normalize each token over its embedding axis, then scale and shift."""
    d = t.shape[-1]
    if state.gamma.shape != (d,):
        raise ShapeError(f"layernorm gamma shape {state.gamma.shape} != ({d},)")
    mean = t.data.mean(axis=-1, keepdims=True)
    var = t.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    t_hat = (t.data - mean) * inv_std
    out = Tensor(state.gamma.data * t_hat + state.beta.data)
    reduce_axes = tuple(range(t.ndim - 1))

    def backward(g: np.ndarray) -> None:
        _accum(state.beta, g.sum(axis=reduce_axes))
        _accum(state.gamma, (g * t_hat).sum(axis=reduce_axes))
        gs = g * state.gamma.data
        g_mean = gs.mean(axis=-1, keepdims=True)
        gx_mean = (gs * t_hat).mean(axis=-1, keepdims=True)
        _accum(t, (inv_std * (gs - g_mean - t_hat * gx_mean)).astype(t.dtype, copy=False))

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# activations and softmax
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def backward(g: np.ndarray) -> None:
        _accum(x, g * (x.data > 0))

    _record(out, backward)
    return out


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form ``x * Phi(x)`` (not the tanh approximation)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)

    def backward(g: np.ndarray) -> None:
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accum(x, (g * (cdf + x.data * pdf)).astype(x.dtype, copy=False))

    _record(out, backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_stable(x.data)
    out = Tensor(s)

    def backward(g: np.ndarray) -> None:
        _accum(x, g * s * (1.0 - s))

    _record(out, backward)
    return out


def _sigmoid_stable(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


def softmax_lastdim(x: Tensor) -> Tensor:
    # the scratch buffer never escapes, so exp and the normalization run in place
    s = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def backward(g: np.ndarray) -> None:
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accum(x, s * (g - inner))

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# resizing and concatenation
# ---------------------------------------------------------------------------


def _phase_offsets(factor: int) -> list[tuple[int, float]]:
    """Per output phase p: (floor source offset, interpolation weight)."""
    offsets = []
    for p in range(factor):
        c = (p + 0.5) / factor - 0.5
        i0 = int(np.floor(c))
        offsets.append((i0, c - i0))
    return offsets


def _upsample_last_axis(x: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upscale of the last axis: half-pixel centers, edge clamped."""
    n = x.shape[-1]
    out = np.empty(x.shape[:-1] + (n * factor,), dtype=x.dtype)
    for p, (i0, w) in enumerate(_phase_offsets(factor)):
        lo = x if i0 == 0 else np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
        hi = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1) if i0 == 0 else x
        out[..., p::factor] = (1.0 - w) * lo + w * hi
    return out


def _upsample_last_axis_adjoint(g: np.ndarray, n: int, factor: int) -> np.ndarray:
    dx = np.zeros(g.shape[:-1] + (n,), dtype=g.dtype)
    for p, (i0, w) in enumerate(_phase_offsets(factor)):
        gp = g[..., p::factor]
        if i0 == 0:
            dx += (1.0 - w) * gp
            dx[..., 1:] += w * gp[..., :-1]
            dx[..., -1] += w * gp[..., -1]
        else:  # i0 == -1: the first window clamps to index 0
            dx[..., 0] += (1.0 - w) * gp[..., 0]
            dx[..., :-1] += (1.0 - w) * gp[..., 1:]
            dx += w * gp
    return dx


def bilinear_resize(x: Tensor, factor: int) -> Tensor:
    """Upscale spatial extents of [B, C, H, W] by an integer ``factor``."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"bilinear_resize needs a positive integer factor, got {factor!r}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects [B, C, H, W], got {x.shape}")
    factor = int(factor)
    if factor == 1:
        out_data = x.data.copy()
    else:
        rows = _upsample_last_axis(np.ascontiguousarray(x.data.swapaxes(-1, -2)), factor)
        out_data = _upsample_last_axis(np.ascontiguousarray(rows.swapaxes(-1, -2)), factor)
    out = Tensor(out_data)
    h, w = x.shape[2], x.shape[3]

    def backward(g: np.ndarray) -> None:
        if factor == 1:
            _accum(x, g)
            return
        cols = _upsample_last_axis_adjoint(g, w, factor)
        dx = _upsample_last_axis_adjoint(np.ascontiguousarray(cols.swapaxes(-1, -2)), h, factor)
        _accum(x, np.ascontiguousarray(dx.swapaxes(-1, -2)))

    _record(out, backward)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate feature maps along the channel axis; a's channels come first."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels expects 4-d maps, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    return concat([a, b], axis=1)


def linear(t: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-token affine map: ``t @ weight + bias`` over the last axis."""
    if t.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {t.shape} does not match weight {weight.shape}")
    out = matmul(t, weight)
    if bias is not None:
        out = add(out, bias)
    return out

"""The gradient-check suite: every operator plus a thin end-to-end model.

Each named check builds a float64 scalar function of one tensor and runs the
central-difference comparison. Smooth operators are held to 1e-6, kinked or
branchy ones (convolution, pooling, batch norm, resize) to 1e-4, and the full
model with its loss to 1e-3. Checks are seeded, so a run is reproducible.

Outputs of non-scalar ops are reduced by a fixed random weighted sum, which
exercises all output coordinates without hiding sign errors the way a plain
sum can.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ops
from .arch import (
    AttentionHeadParams,
    MultiHeadAttention,
    PredictionHead,
    SeUNetTrans,
    TokenMerger,
    TransformerBlock,
    UNetBlock,
    UNetBlockConfig,
    build_variant,
    sr_attention_head,
)
from .gradcheck import GradCheckReport, finite_diff_gradcheck
from .tensor import Tensor, matmul, mul, tensor_sum
from .train import bce_loss

__all__ = ["CheckOutcome", "SUITE", "run_gradcheck_suite", "THIN_OVERRIDES"]

TOL_SMOOTH = 1e-6
TOL_DEFAULT = 1e-4
TOL_END_TO_END = 1e-3

# thin build used for architecture-level checks: same topology, few channels
THIN_OVERRIDES = dict(
    encoder_widths=(4, 8, 16, 32),
    bottleneck_width=64,
    embed_dim=8,
    bridge_channels=8,
    num_heads=2,
    depth=1,
    cbr_widths=(8, 4),
)


def _proj(out: Tensor, weights: np.ndarray) -> Tensor:
    return tensor_sum(mul(out, Tensor(weights)))


def _scalarize(fn: Callable[[Tensor], Tensor], rng: np.random.Generator, out_shape) -> Callable:
    w = rng.normal(size=out_shape)

    def f(point: Tensor) -> Tensor:
        return _proj(fn(point), w)

    return f


@dataclass
class CheckOutcome:
    name: str
    tolerance: float
    passed: bool
    max_rel_err: float
    seeds: int

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name} max_rel_err={self.max_rel_err:.3e} "
            f"tol={self.tolerance:.0e} seeds={self.seeds}"
        )


# each builder: rng -> (f, point); the check runs finite_diff_gradcheck(f, point)


def _check_matmul(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    b = rng.normal(size=(4, 5))
    return _scalarize(lambda t: matmul(t, Tensor(b)), rng, (3, 5)), a


def _check_matmul_rhs(rng):
    a = rng.normal(size=(2, 3, 4))
    b = Tensor(rng.normal(size=(4, 5)))
    return _scalarize(lambda t: matmul(Tensor(a), t), rng, (2, 3, 5)), b


def _check_linear(rng):
    t = Tensor(rng.normal(size=(2, 5, 6)))
    w = rng.normal(size=(6, 3))
    bias = rng.normal(size=3)
    return _scalarize(lambda p: ops.linear(p, Tensor(w), Tensor(bias)), rng, (2, 5, 3)), t


def _check_linear_weight(rng):
    t = rng.normal(size=(2, 5, 6))
    w = Tensor(rng.normal(size=(6, 3)))
    return _scalarize(lambda p: ops.linear(Tensor(t), p), rng, (2, 5, 3)), w


def _check_softmax(rng):
    x = Tensor(rng.normal(size=(4, 7)))
    return _scalarize(ops.softmax_lastdim, rng, (4, 7)), x


def _check_gelu(rng):
    # keep points away from the zero of the gelu derivative (x ~ -0.7518),
    # where the relative-error criterion is ill-conditioned
    x = rng.normal(size=(5, 6))
    x = np.where(np.abs(x + 0.7518) < 0.15, x + 0.4, x)
    return _scalarize(ops.gelu, rng, (5, 6)), Tensor(x)


def _check_layernorm(rng):
    state = ops.NormState(gamma=Tensor(rng.normal(size=8)), beta=Tensor(rng.normal(size=8)))
    x = Tensor(rng.normal(size=(2, 3, 8)))
    return _scalarize(lambda p: ops.layernorm(p, state), rng, (2, 3, 8)), x


def _check_layernorm_gain(rng):
    gamma = Tensor(rng.normal(size=8))
    beta = Tensor(rng.normal(size=8))
    x = rng.normal(size=(2, 3, 8))

    def fn(p: Tensor) -> Tensor:
        return ops.layernorm(Tensor(x), ops.NormState(gamma=p, beta=beta))

    return _scalarize(fn, rng, (2, 3, 8)), gamma


def _away_from_zero(rng, shape):
    # keep relu/pool inputs off the kink so the difference quotient is clean
    return rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _check_relu(rng):
    x = Tensor(_away_from_zero(rng, (4, 6)))
    return _scalarize(ops.relu, rng, (4, 6)), x


def _check_sigmoid(rng):
    x = Tensor(rng.normal(size=(4, 6)))
    return _scalarize(ops.sigmoid, rng, (4, 6)), x


def _check_conv2d_input(rng):
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)))
    fn = lambda p: ops.conv2d(p, Tensor(w), Tensor(b), stride=1, padding=1)
    return _scalarize(fn, rng, (2, 4, 6, 6)), x


def _check_conv2d_weight(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    fn = lambda p: ops.conv2d(Tensor(x), p, None, stride=1, padding=1)
    return _scalarize(fn, rng, (2, 4, 6, 6)), w


def _check_conv2d_strided(rng):
    # odd extent exercises the floor in the output-size rule
    w = rng.normal(size=(2, 3, 3, 3))
    x = Tensor(rng.normal(size=(1, 3, 7, 7)))
    fn = lambda p: ops.conv2d(p, Tensor(w), None, stride=2, padding=1)
    return _scalarize(fn, rng, (1, 2, 4, 4)), x


def _check_conv_transpose_input(rng):
    w = rng.normal(size=(3, 4, 2, 2))
    b = rng.normal(size=4)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    fn = lambda p: ops.conv_transpose2d(p, Tensor(w), Tensor(b), stride=2)
    return _scalarize(fn, rng, (2, 4, 8, 8)), x


def _check_conv_transpose_weight(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    w = Tensor(rng.normal(size=(3, 4, 2, 2)))
    fn = lambda p: ops.conv_transpose2d(Tensor(x), p, None, stride=2)
    return _scalarize(fn, rng, (2, 4, 8, 8)), w


def _check_maxpool(rng):
    x = Tensor(rng.normal(size=(2, 3, 6, 6)))
    return _scalarize(ops.maxpool2d, rng, (2, 3, 3, 3)), x


def _bn_state(rng, channels, training):
    return ops.NormState(
        gamma=Tensor(rng.normal(size=channels)),
        beta=Tensor(rng.normal(size=channels)),
        training=training,
        running_mean=rng.normal(size=channels),
        running_var=rng.uniform(0.5, 2.0, size=channels),
    )


def _check_batchnorm_input(rng):
    state = _bn_state(rng, 4, training=True)
    x = Tensor(rng.normal(size=(3, 4, 5, 5)))
    return _scalarize(lambda p: ops.batchnorm2d(p, state), rng, (3, 4, 5, 5)), x


def _check_batchnorm_gain(rng):
    x = rng.normal(size=(3, 4, 5, 5))
    gamma = Tensor(rng.normal(size=4))
    beta = Tensor(rng.normal(size=4))
    rm = rng.normal(size=4)
    rv = rng.uniform(0.5, 2.0, size=4)

    def fn(p: Tensor) -> Tensor:
        state = ops.NormState(gamma=p, beta=beta, training=True, running_mean=rm, running_var=rv)
        return ops.batchnorm2d(Tensor(x), state)

    return _scalarize(fn, rng, (3, 4, 5, 5)), gamma


def _check_batchnorm_eval(rng):
    state = _bn_state(rng, 4, training=False)
    x = Tensor(rng.normal(size=(2, 4, 5, 5)))
    return _scalarize(lambda p: ops.batchnorm2d(p, state), rng, (2, 4, 5, 5)), x


def _check_bilinear_resize(rng):
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    return _scalarize(lambda p: ops.bilinear_resize(p, 2), rng, (2, 3, 10, 10)), x


def _check_concat_channels(rng):
    b = rng.normal(size=(2, 3, 4, 4))
    a = Tensor(rng.normal(size=(2, 2, 4, 4)))
    fn = lambda p: ops.concat_channels(p, Tensor(b))
    return _scalarize(fn, rng, (2, 5, 4, 4)), a


def _check_unet_block(rng):
    block = UNetBlock(UNetBlockConfig(3, 4, 4), rng=rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)))
    return _scalarize(block, rng, (2, 4, 6, 6)), x


def _check_token_merger(rng):
    spec = build_variant("M", **THIN_OVERRIDES)
    merger = TokenMerger(spec, rng=rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 8, 8, 8)))
    return _scalarize(lambda p: merger(p)[0], rng, (2, 4, 8)), x


def _check_sr_attention(rng):
    d, dh, r = 4, 2, 2
    params = AttentionHeadParams(
        wq=Tensor(rng.normal(size=(d, dh))),
        wk=Tensor(rng.normal(size=(d, dh))),
        wv=Tensor(rng.normal(size=(d, dh))),
        reduce_weight=Tensor(rng.normal(size=(d * r, d))),
        reduce_bias=Tensor(rng.normal(size=d)),
        reduce_norm=ops.NormState(gamma=Tensor(np.ones(d)), beta=Tensor(np.zeros(d))),
    )
    t = Tensor(rng.normal(size=(1, 8, d)))
    fn = lambda p: sr_attention_head(p, p, r, params)
    return _scalarize(fn, rng, (1, 8, dh)), t


def _check_multi_head_attention(rng):
    spec = build_variant("M", **THIN_OVERRIDES)
    mha = MultiHeadAttention(spec, rng=rng, dtype=np.float64)
    t = Tensor(rng.normal(size=(1, 8, spec.embed_dim)))
    return _scalarize(mha, rng, (1, 8, spec.embed_dim)), t


def _check_transformer_block(rng):
    spec = build_variant("M", **THIN_OVERRIDES)
    block = TransformerBlock(spec, rng=rng, dtype=np.float64)
    t = Tensor(rng.normal(size=(1, 8, spec.embed_dim)))
    return _scalarize(block, rng, (1, 8, spec.embed_dim)), t


def _check_prediction_head(rng):
    spec = build_variant("M", **THIN_OVERRIDES)
    head = PredictionHead(spec, rng=rng, dtype=np.float64)
    t = Tensor(rng.normal(size=(2, 4, spec.embed_dim)))
    fn = lambda p: head.forward_logits(p, 2, 2)
    return _scalarize(fn, rng, (2, 1, 8, 8)), t


def _check_bce_loss(rng):
    y = (rng.uniform(size=(2, 1, 4, 4)) > 0.5).astype(np.float64)
    logits = Tensor(rng.normal(size=(2, 1, 4, 4)))
    return (lambda p: bce_loss(p, y)), logits


def _thin_model(rng) -> tuple[SeUNetTrans, Tensor, np.ndarray]:
    spec = build_variant("M", **THIN_OVERRIDES)
    model = SeUNetTrans(spec, seed=int(rng.integers(0, 2**31)), dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 3, 16, 16)))
    y = (rng.uniform(size=(2, 1, 16, 16)) > 0.5).astype(np.float64)
    return model, x, y


def _check_end_to_end_input(rng):
    model, x, y = _thin_model(rng)
    model.train()
    return (lambda p: bce_loss(model.forward_logits(p), y)), x


def _check_end_to_end_weight(rng):
    model, x, y = _thin_model(rng)
    model.train()
    point = model.encoder.blocks[0].conv1.weight
    return (lambda _p: bce_loss(model.forward_logits(x), y)), point


# name -> (builder, tolerance) or (builder, tolerance, step). The end-to-end
# loss has strong curvature along weight coordinates (batch statistics move
# with the weights), so those checks need a smaller difference step.
SUITE: dict[str, tuple] = {
    "matmul": (_check_matmul, TOL_SMOOTH),
    "matmul_rhs": (_check_matmul_rhs, TOL_SMOOTH),
    "linear": (_check_linear, TOL_SMOOTH),
    "linear_weight": (_check_linear_weight, TOL_SMOOTH),
    "softmax_lastdim": (_check_softmax, TOL_SMOOTH),
    "gelu": (_check_gelu, TOL_SMOOTH),
    "layernorm": (_check_layernorm, TOL_SMOOTH),
    "layernorm_gain": (_check_layernorm_gain, TOL_SMOOTH),
    "relu": (_check_relu, TOL_DEFAULT),
    "sigmoid": (_check_sigmoid, TOL_DEFAULT),
    "conv2d_input": (_check_conv2d_input, TOL_DEFAULT),
    "conv2d_weight": (_check_conv2d_weight, TOL_DEFAULT),
    "conv2d_strided": (_check_conv2d_strided, TOL_DEFAULT),
    "conv_transpose2d_input": (_check_conv_transpose_input, TOL_DEFAULT),
    "conv_transpose2d_weight": (_check_conv_transpose_weight, TOL_DEFAULT),
    "maxpool2d": (_check_maxpool, TOL_DEFAULT),
    "batchnorm2d_input": (_check_batchnorm_input, TOL_DEFAULT),
    "batchnorm2d_gain": (_check_batchnorm_gain, TOL_DEFAULT),
    "batchnorm2d_eval": (_check_batchnorm_eval, TOL_DEFAULT),
    "bilinear_resize": (_check_bilinear_resize, TOL_DEFAULT),
    "concat_channels": (_check_concat_channels, TOL_DEFAULT),
    "unet_block": (_check_unet_block, TOL_DEFAULT),
    "token_merger": (_check_token_merger, TOL_DEFAULT),
    "sr_attention_head": (_check_sr_attention, TOL_DEFAULT),
    "multi_head_attention": (_check_multi_head_attention, TOL_DEFAULT),
    "transformer_block": (_check_transformer_block, TOL_DEFAULT),
    "prediction_head": (_check_prediction_head, TOL_DEFAULT),
    "bce_loss": (_check_bce_loss, TOL_DEFAULT),
    "end_to_end_input": (_check_end_to_end_input, TOL_END_TO_END, 3e-8),
    "end_to_end_weight": (_check_end_to_end_weight, TOL_END_TO_END, 3e-8),
}


def run_gradcheck_suite(
    seeds: int = 20,
    tolerance: float = 0.0,
    names: Optional[list[str]] = None,
) -> list[CheckOutcome]:
    """Run every named check over ``seeds`` seeds; worst error wins.

    ``tolerance`` is a floor: each check runs at ``max(its own threshold,
    tolerance)``, so a loose floor relaxes the strict checks but never
    tightens one below its stated threshold.
    """
    outcomes: list[CheckOutcome] = []
    selected = names if names is not None else list(SUITE)
    for name in selected:
        entry = SUITE[name]
        builder, default_tol = entry[0], entry[1]
        step = entry[2] if len(entry) > 2 else 1e-5
        tol = max(default_tol, tolerance)
        worst = 0.0
        passed = True
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            f, point = builder(rng)
            report: GradCheckReport = finite_diff_gradcheck(
                f, point, step=step, tolerance=tol, rng=np.random.default_rng(seed + 1)
            )
            worst = max(worst, report.max_rel_err)
            passed = passed and report.passed
        outcomes.append(
            CheckOutcome(name=name, tolerance=tol, passed=passed, max_rel_err=worst, seeds=seeds)
        )
    return outcomes

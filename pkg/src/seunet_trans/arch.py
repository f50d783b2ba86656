"""The segmentation network: UNet backbone, bridge, token head, variants.

Data flow: a four-stage UNet encoder/decoder produces full-resolution feature
maps, a 1x1 bridge convolution widens them to the token embedding width, a
strided merge convolution turns each remaining spatial site into one token
(no positional code is added), a stack of pre-norm transformer blocks with
spatially reduced keys/values mixes the tokens, and a small convolutional
head maps the re-assembled map to one output channel.

Variants L/M/S trade attention cost against merge resolution through the
locked (reduction ratio, merge stride) pairs (4,2), (2,4), (1,8).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    kaiming_uniform,
)
from .tensor import Parameter, ShapeError, Tensor, add, concat, matmul, reshape, transpose

__all__ = [
    "VARIANTS",
    "ENCODER_PRESETS",
    "VariantSpec",
    "UNetBlockConfig",
    "UNetBlock",
    "Encoder",
    "Decoder",
    "TokenMerger",
    "AttentionHeadParams",
    "sr_attention_head",
    "MultiHeadAttention",
    "TransformerBlock",
    "PredictionHead",
    "SeUNetTrans",
    "build_variant",
    "count_attention_scores",
    "AttentionScoreCounter",
]

# variant name -> (reduction ratio over key/value tokens, merge stride)
VARIANTS: dict[str, tuple[int, int]] = {"L": (4, 2), "M": (2, 4), "S": (1, 8)}

# encoder widths + bottleneck width
ENCODER_PRESETS: dict[str, tuple[tuple[int, ...], int]] = {
    "desk": ((16, 32, 64, 128), 256),
    "paper": ((64, 128, 256, 512), 1024),
}


@dataclass(frozen=True)
class VariantSpec:
    """All architecture hyperparameters for one model build."""

    name: str
    reduction_ratio: int
    merge_stride: int
    merge_kernel: int = 3
    merge_padding: int = 1
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 3
    bridge_channels: int = 64
    in_channels: int = 3
    encoder_widths: tuple[int, ...] = (16, 32, 64, 128)
    bottleneck_width: int = 256
    # wide head: at desk scale the output-layer alignment rate under Adam is
    # proportional to the head width, and narrow heads leave the logits
    # under-saturated within the training budget
    cbr_widths: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.name not in VARIANTS:
            raise ValueError(f"unknown variant {self.name!r}; expected one of {sorted(VARIANTS)}")
        locked = VARIANTS[self.name]
        if (self.reduction_ratio, self.merge_stride) != locked:
            raise ValueError(
                f"variant {self.name} is locked to (R, S)={locked}, "
                f"got ({self.reduction_ratio}, {self.merge_stride})"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.num_heads}")
        if self.bridge_channels != self.embed_dim:
            raise ValueError("bridge channel count must equal the token embedding width")
        if len(self.encoder_widths) != 4:
            raise ValueError(f"encoder needs exactly 4 stage widths, got {self.encoder_widths}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def merge_spec(self) -> ops.ConvSpec:
        return ops.ConvSpec(
            self.bridge_channels,
            self.bridge_channels,
            self.merge_kernel,
            self.merge_stride,
            self.merge_padding,
        )

    def token_count(self, h: int, w: int) -> int:
        spec = self.merge_spec()
        return spec.output_extent(h) * spec.output_extent(w)


def build_variant(
    name: str,
    encoder_widths: Optional[tuple[int, ...]] = None,
    cbr_widths: Optional[tuple[int, int]] = None,
    **overrides,
) -> VariantSpec:
    """Return the spec for variant ``name`` with its locked (R, S) pair."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    r, s = VARIANTS[name]
    kwargs = dict(name=name, reduction_ratio=r, merge_stride=s)
    if encoder_widths is not None:
        widths = tuple(encoder_widths)
        if len(widths) == 5:
            kwargs["encoder_widths"] = widths[:4]
            kwargs["bottleneck_width"] = widths[4]
        else:
            kwargs["encoder_widths"] = widths
    if cbr_widths is not None:
        kwargs["cbr_widths"] = tuple(cbr_widths)
    kwargs.update(overrides)
    return VariantSpec(**kwargs)


# ---------------------------------------------------------------------------
# attention instrumentation
# ---------------------------------------------------------------------------


@dataclass
class AttentionScoreCounter:
    """Collects (query_len, key_len, entries) per attention-score matrix."""

    records: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def total_entries(self) -> int:
        return sum(r[2] for r in self.records)


_ACTIVE_COUNTER: Optional[AttentionScoreCounter] = None


@contextmanager
def count_attention_scores():
    global _ACTIVE_COUNTER
    counter = AttentionScoreCounter()
    previous = _ACTIVE_COUNTER
    _ACTIVE_COUNTER = counter
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER = previous


def _note_scores(query_len: int, key_len: int) -> None:
    if _ACTIVE_COUNTER is not None:
        _ACTIVE_COUNTER.records.append((query_len, key_len, query_len * key_len))


# ---------------------------------------------------------------------------
# UNet backbone
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UNetBlockConfig:
    c_in: int
    c_h: int
    c_o: int

    def __post_init__(self):
        if min(self.c_in, self.c_h, self.c_o) < 1:
            raise ValueError(f"channel counts must be positive: {self}")


class UNetBlock(Module):
    """Two (3x3 conv -> batch norm -> ReLU) stages; spatial extents preserved."""

    def __init__(self, cfg: UNetBlockConfig, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.conv1 = Conv2d(cfg.c_in, cfg.c_h, 3, 1, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(cfg.c_h, dtype=dtype)
        self.conv2 = Conv2d(cfg.c_h, cfg.c_o, 3, 1, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(cfg.c_o, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.c_in:
            raise ShapeError(f"block expects {self.cfg.c_in} input channels, got {x.shape}")
        x = ops.relu(self.bn1(self.conv1(x)))
        return ops.relu(self.bn2(self.conv2(x)))


class Encoder(Module):
    """Four UNet stages with 2x2 max pooling, then a bottleneck block.

    Returns the bottleneck map and the four pre-pool skip maps in order of
    decreasing resolution.
    """

    def __init__(
        self,
        in_channels: int,
        widths: tuple[int, ...],
        bottleneck_width: int,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.blocks = ModuleList()
        c_prev = in_channels
        for w in widths:
            self.blocks.append(UNetBlock(UNetBlockConfig(c_prev, w, w), rng=rng, dtype=dtype))
            c_prev = w
        self.bottleneck = UNetBlock(
            UNetBlockConfig(c_prev, bottleneck_width, bottleneck_width), rng=rng, dtype=dtype
        )

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"encoder expects [B, {self.in_channels}, H, W], got {x.shape}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeError(f"input extents must be divisible by 16, got {x.shape}")
        skips: list[Tensor] = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = ops.maxpool2d(x)
        return self.bottleneck(x), skips


class Decoder(Module):
    """Mirror of the encoder: upsample, concatenate the matching skip, refine."""

    def __init__(
        self,
        widths: tuple[int, ...],
        bottleneck_width: int,
        *,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        super().__init__()
        self.ups = ModuleList()
        self.blocks = ModuleList()
        c_prev = bottleneck_width
        for w in reversed(widths):
            self.ups.append(ConvTranspose2d(c_prev, w, 2, stride=2, rng=rng, dtype=dtype))
            self.blocks.append(UNetBlock(UNetBlockConfig(2 * w, w, w), rng=rng, dtype=dtype))
            c_prev = w

    def forward(self, bottleneck: Tensor, skips: list[Tensor]) -> Tensor:
        x = bottleneck
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = up(x)
            x = ops.concat_channels(x, skip)
            x = block(x)
        return x


# ---------------------------------------------------------------------------
# token head
# ---------------------------------------------------------------------------


class TokenMerger(Module):
    """Strided merge convolution followed by flattening sites into tokens.

    Each surviving spatial site becomes one token of width ``bridge_channels``;
    the map is purely convolutional, so no site-dependent (positional) term
    exists.
    """

    def __init__(self, spec: VariantSpec, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        cs = spec.merge_spec()
        self.conv = Conv2d(cs.in_channels, cs.out_channels, cs.kernel, cs.stride, cs.padding,
                           rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> tuple[Tensor, tuple[int, int]]:
        y = self.conv(x)
        b, c, h_out, w_out = y.shape
        tokens = reshape(transpose(y, (0, 2, 3, 1)), (b, h_out * w_out, c))
        return tokens, (h_out, w_out)


@dataclass
class AttentionHeadParams:
    """Projections for one attention head plus the shared reduction map."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    reduce_weight: Optional[Tensor] = None
    reduce_bias: Optional[Tensor] = None
    reduce_norm: Optional[ops.NormState] = None


def sr_attention_head(
    q_in: Tensor,
    kv_in: Tensor,
    reduction_ratio: int,
    params: AttentionHeadParams,
) -> Tensor:
    """Scaled dot-product attention with sequence-reduced keys and values.

    For R > 1 the key/value source is reshaped from N tokens to N/R tokens of
    R-fold width, mapped back to the embedding width by a learned linear
    layer, and layer-normalized; queries always come from the unreduced
    sequence. The score matrix therefore has N * N/R entries.
    """
    b, n, d = q_in.shape
    if reduction_ratio > 1:
        if n % reduction_ratio:
            raise ShapeError(f"token count {n} not divisible by reduction ratio {reduction_ratio}")
        kv = reshape(kv_in, (b, n // reduction_ratio, d * reduction_ratio))
        kv = ops.linear(kv, params.reduce_weight, params.reduce_bias)
        kv = ops.layernorm(kv, params.reduce_norm)
    else:
        kv = kv_in
    q = matmul(q_in, params.wq)
    k = matmul(kv, params.wk)
    v = matmul(kv, params.wv)
    _note_scores(n, k.shape[1])
    # scaling q instead of the N x N/R score matrix avoids a large temporary
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q * scale, transpose(k, (0, 2, 1)))
    weights = ops.softmax_lastdim(scores)
    return matmul(weights, v)


class MultiHeadAttention(Module):
    """Per-head q/k/v projections, shared kv reduction, output projection.

    The output projection is a plain ``embed_dim x embed_dim`` matrix with no
    bias, so zeroing it makes the whole operator vanish.
    """

    def __init__(self, spec: VariantSpec, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        d, dh = spec.embed_dim, spec.head_dim
        self.reduction_ratio = spec.reduction_ratio
        if spec.reduction_ratio > 1:
            self.reduce = Linear(d * spec.reduction_ratio, d, rng=rng, dtype=dtype)
            self.reduce_norm = LayerNorm(d, dtype=dtype)
        else:
            self.reduce = None
            self.reduce_norm = None
        self.heads = ModuleList(
            _AttentionHead(d, dh, rng=rng, dtype=dtype) for _ in range(spec.num_heads)
        )
        self.wo = Parameter(kaiming_uniform(rng, (d, d), d, dtype))

    def _head_params(self, head: "_AttentionHead") -> AttentionHeadParams:
        if self.reduce is None:
            return AttentionHeadParams(head.wq, head.wk, head.wv)
        return AttentionHeadParams(
            head.wq,
            head.wk,
            head.wv,
            reduce_weight=self.reduce.weight,
            reduce_bias=self.reduce.bias,
            reduce_norm=self.reduce_norm.state(),
        )

    def forward(self, t: Tensor) -> Tensor:
        outs = [
            sr_attention_head(t, t, self.reduction_ratio, self._head_params(h)) for h in self.heads
        ]
        merged = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
        return matmul(merged, self.wo)


class _AttentionHead(Module):
    def __init__(self, width: int, head_dim: int, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.wq = Parameter(kaiming_uniform(rng, (width, head_dim), width, dtype))
        self.wk = Parameter(kaiming_uniform(rng, (width, head_dim), width, dtype))
        self.wv = Parameter(kaiming_uniform(rng, (width, head_dim), width, dtype))


class TransformerBlock(Module):
    """Pre-norm attention and MLP, each wrapped in a residual connection."""

    def __init__(self, spec: VariantSpec, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        d = spec.embed_dim
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(spec, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.mlp_in = Linear(d, 4 * d, rng=rng, dtype=dtype)
        self.mlp_out = Linear(4 * d, d, rng=rng, dtype=dtype)

    def forward(self, t: Tensor) -> Tensor:
        t = add(self.attn(self.norm1(t)), t)
        return add(self.mlp_out(ops.gelu(self.mlp_in(self.norm2(t)))), t)


class PredictionHead(Module):
    """Tokens back to a map: reshape, bilinear upscale by the merge stride,
    then conv-BN-ReLU twice and a final 1x1 convolution to one channel."""

    def __init__(self, spec: VariantSpec, *, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        c = spec.bridge_channels
        c_h1, c_h2 = spec.cbr_widths
        self.upsample_factor = spec.merge_stride
        self.conv1 = Conv2d(c, c_h1, 3, 1, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(c_h1, dtype=dtype)
        self.conv2 = Conv2d(c_h1, c_h2, 3, 1, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(c_h2, dtype=dtype)
        self.conv3 = Conv2d(c_h2, 1, 1, rng=rng, dtype=dtype)

    def forward_logits(self, t: Tensor, h_out: int, w_out: int) -> Tensor:
        b, n, d = t.shape
        if n != h_out * w_out:
            raise ShapeError(f"token count {n} does not equal {h_out}x{w_out}")
        fm = transpose(reshape(t, (b, h_out, w_out, d)), (0, 3, 1, 2))
        fm = ops.bilinear_resize(fm, self.upsample_factor)
        x = ops.relu(self.bn1(self.conv1(fm)))
        x = ops.relu(self.bn2(self.conv2(x)))
        return self.conv3(x)

    def forward(self, t: Tensor, h_out: int, w_out: int) -> Tensor:
        return ops.sigmoid(self.forward_logits(t, h_out, w_out))


class SeUNetTrans(Module):
    """The full network. ``forward`` returns probabilities in (0, 1);
    ``forward_logits`` exposes the pre-sigmoid map for the stable loss."""

    def __init__(self, spec: VariantSpec, seed: int = 0, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.dtype = dtype
        self.encoder = Encoder(
            spec.in_channels, spec.encoder_widths, spec.bottleneck_width, rng=rng, dtype=dtype
        )
        self.decoder = Decoder(spec.encoder_widths, spec.bottleneck_width, rng=rng, dtype=dtype)
        self.bridge = Conv2d(spec.encoder_widths[0], spec.bridge_channels, 1, rng=rng, dtype=dtype)
        self.merger = TokenMerger(spec, rng=rng, dtype=dtype)
        self.blocks = ModuleList(
            TransformerBlock(spec, rng=rng, dtype=dtype) for _ in range(spec.depth)
        )
        self.head = PredictionHead(spec, rng=rng, dtype=dtype)
        self.bind_parameter_names()

    def forward_logits(self, x: Tensor) -> Tensor:
        bottleneck, skips = self.encoder(x)
        decoded = self.decoder(bottleneck, skips)
        bridged = self.bridge(decoded)
        tokens, (h_out, w_out) = self.merger(bridged)
        for block in self.blocks:
            tokens = block(tokens)
        return self.head.forward_logits(tokens, h_out, w_out)

    def forward(self, x: Tensor, mode: Optional[str] = None) -> Tensor:
        if mode is None:
            return ops.sigmoid(self.forward_logits(x))
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        previous = self.training
        self.train(mode == "train")
        try:
            return ops.sigmoid(self.forward_logits(x))
        finally:
            self.train(previous)

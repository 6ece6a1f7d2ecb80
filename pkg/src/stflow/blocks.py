"""Network building blocks: time-distributed encoder with residual units and
downsampling, the cascading gated-unit block bridging encoder and decoder,
the external-factor branch, and the decoder with long skip connections plus
channel and spatial attention.

Shape conventions (channels last): the encoder maps a closeness stack
(B, p, N, M, 2) to (B, p, N/2^L, M/2^L, C'); the cascade reduces the p frames
pairwise to one; the decoder maps the latent frame back to (B, N, M, 2) with
tanh output in (-1, 1).
"""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .nnops import (
    BatchNormParams, Conv2DParams, DenseParams, batchnorm, conv_layer,
    conv_transpose_layer, dense, global_pool_spatial, pool_channelwise,
    time_distribute,
)
from .tensor import Tensor, relu, sigmoid, tanh, add, mul, reshape, concat

# incremented by cmu(); tests reset it to count applications
CMU_APPLICATIONS = 0


# ---------------------------------------------------------------------------
# residual unit

@dataclass
class ResUnitParams:
    conv1: Conv2DParams
    bn1: BatchNormParams
    conv2: Conv2DParams
    bn2: BatchNormParams

    @classmethod
    def create(cls, rng, channels, kernel, dtype):
        return cls(
            Conv2DParams.create(rng.child(0), channels, channels, kernel,
                                dtype=dtype),
            BatchNormParams.create(channels, dtype=dtype),
            Conv2DParams.create(rng.child(1), channels, channels, kernel,
                                dtype=dtype),
            BatchNormParams.create(channels, dtype=dtype),
        )


def res_unit(x, p: ResUnitParams, train: bool) -> Tensor:
    """conv-ReLU-BN twice, then add the block input (shape-preserving)."""
    c1 = batchnorm(relu(conv_layer(x, p.conv1)), p.bn1, train)
    c2 = batchnorm(relu(conv_layer(c1, p.conv2)), p.bn2, train)
    return add(x, c2)


# ---------------------------------------------------------------------------
# encoder

@dataclass
class EncoderLevelParams:
    res: ResUnitParams
    down: Conv2DParams
    down_bn: BatchNormParams


@dataclass
class EncoderParams:
    conv0: Conv2DParams
    bn0: BatchNormParams
    levels: list
    close: Conv2DParams
    close_bn: BatchNormParams

    @classmethod
    def create(cls, rng, in_channels, filters, out_channels, depth, kernel,
               sampler_kernel, dtype):
        levels = [
            EncoderLevelParams(
                ResUnitParams.create(rng.child(10 + l), filters, kernel, dtype),
                Conv2DParams.create(rng.child(40 + l), filters, filters,
                                    sampler_kernel, stride=(2, 2),
                                    padding=(0, 0, 0, 0), dtype=dtype),
                BatchNormParams.create(filters, dtype=dtype),
            )
            for l in range(depth)
        ]
        return cls(
            Conv2DParams.create(rng.child(0), in_channels, filters, kernel,
                                dtype=dtype),
            BatchNormParams.create(filters, dtype=dtype),
            levels,
            Conv2DParams.create(rng.child(1), filters, out_channels, kernel,
                                dtype=dtype),
            BatchNormParams.create(out_channels, dtype=dtype),
        )


@dataclass
class EncoderState:
    """Per-level residual-unit outputs (skip sources) plus the final stack."""

    eru_levels: list      # level l: (B, p, N/2^l, M/2^l, filters), l = 0..L-1
    final: Tensor         # (B, p, N/2^L, M/2^L, out_channels)


def encode(frames, p: EncoderParams, train: bool) -> EncoderState:
    """Time-distributed encoder: opening conv, L x (res unit -> halving conv),
    closing conv that shrinks the channel count."""
    x = time_distribute(
        lambda f: batchnorm(relu(conv_layer(f, p.conv0)), p.bn0, train), frames)
    erus = []
    for lvl in p.levels:
        eru = time_distribute(lambda f: res_unit(f, lvl.res, train), x)
        erus.append(eru)
        x = time_distribute(
            lambda f: batchnorm(relu(conv_layer(f, lvl.down)), lvl.down_bn,
                                train), eru)
    final = time_distribute(
        lambda f: batchnorm(relu(conv_layer(f, p.close)), p.close_bn, train), x)
    return EncoderState(erus, final)


# ---------------------------------------------------------------------------
# multiplicative units

@dataclass
class MUParams:
    """Four channel-preserving same-padded conv gates."""

    g1: Conv2DParams
    g2: Conv2DParams
    g3: Conv2DParams
    u: Conv2DParams

    @classmethod
    def create(cls, rng, channels, kernel, dtype):
        return cls(*(Conv2DParams.create(rng.child(i), channels, channels,
                                         kernel, dtype=dtype)
                     for i in range(4)))


def mu(h, p: MUParams) -> Tensor:
    """Gated non-recurrent unit: three sigmoid gates, one tanh candidate."""
    g1 = sigmoid(conv_layer(h, p.g1))
    g2 = sigmoid(conv_layer(h, p.g2))
    g3 = sigmoid(conv_layer(h, p.g3))
    u = tanh(conv_layer(h, p.u))
    return mul(g1, tanh(add(mul(g2, h), mul(g3, u))))


@dataclass
class CMUParams:
    """Pair combiner: the older frame passes the same MU twice, the recent
    frame passes its own MU once; a gated conv pair produces the output."""

    mu_older: MUParams
    mu_recent: MUParams
    out_gate: Conv2DParams
    out_cand: Conv2DParams

    @classmethod
    def create(cls, rng, channels, kernel, dtype):
        return cls(
            MUParams.create(rng.child(0), channels, kernel, dtype),
            MUParams.create(rng.child(1), channels, kernel, dtype),
            Conv2DParams.create(rng.child(2), channels, channels, kernel,
                                dtype=dtype),
            Conv2DParams.create(rng.child(3), channels, channels, kernel,
                                dtype=dtype),
        )


def cmu(older, recent, p: CMUParams) -> Tensor:
    global CMU_APPLICATIONS
    CMU_APPLICATIONS += 1
    h = add(mu(mu(older, p.mu_older), p.mu_older), mu(recent, p.mu_recent))
    o = sigmoid(conv_layer(h, p.out_gate))
    return mul(o, tanh(conv_layer(h, p.out_cand)))


@dataclass
class CascadeParams:
    """One CMU parameter set per reduction level; weights are shared across
    the pair applications within a level."""

    levels: list

    @classmethod
    def create(cls, rng, frames, channels, kernel, dtype):
        if frames < 2:
            raise T.ShapeError(f"cascade needs >= 2 frames, got {frames}")
        return cls([CMUParams.create(rng.child(k), channels, kernel, dtype)
                    for k in range(frames - 1)])


def cascade(stack, p: CascadeParams) -> Tensor:
    """Binary pairwise reduction: level k shrinks the sequence by one by
    applying that level's CMU to each adjacent (older, recent) pair."""
    n = stack.shape[1]
    if n < 2:
        raise T.ShapeError(f"cascade needs >= 2 frames, got {n}")
    if n - 1 != len(p.levels):
        raise T.ShapeError(f"cascade built for {len(p.levels) + 1} frames, "
                           f"got {n}")
    seq = [T.take_index(stack, i, axis=1) for i in range(n)]
    for level in p.levels:
        seq = [cmu(seq[i], seq[i + 1], level) for i in range(len(seq) - 1)]
    return seq[0]


# ---------------------------------------------------------------------------
# external factors

@dataclass
class ExternalParams:
    """Per-sub-factor embeddings feeding one projection to the latent grid."""

    embeds: list          # one DenseParams per sub-factor
    project: DenseParams
    slices: list          # (start, stop) per sub-factor
    out_shape: tuple      # (n, m, channels)

    @classmethod
    def create(cls, rng, schema, embed_width, out_shape, dtype):
        slices, start = [], 0
        for _, width in schema:
            slices.append((start, start + width))
            start += width
        embeds = [DenseParams.create(rng.child(i), width, embed_width, dtype)
                  for i, (_, width) in enumerate(schema)]
        n, m, c = out_shape
        project = DenseParams.create(rng.child(99),
                                     embed_width * len(schema), n * m * c,
                                     dtype)
        return cls(embeds, project, slices, tuple(out_shape))


def external_branch(e, p: ExternalParams) -> Tensor:
    """Embed each sub-factor (ReLU), concatenate, project and reshape to the
    latent grid so the result can be added to the cascade output."""
    if e.shape[-1] != p.slices[-1][1]:
        raise T.ShapeError(f"external vector width {e.shape[-1]} != schema "
                           f"width {p.slices[-1][1]}")
    parts = [relu(dense(T.slice_axis(e, s, t, axis=-1), emb))
             for (s, t), emb in zip(p.slices, p.embeds)]
    x = dense(concat(parts, axis=-1), p.project)
    n, m, c = p.out_shape
    return reshape(x, (e.shape[0], n, m, c))


# ---------------------------------------------------------------------------
# attention

@dataclass
class AttentionParams:
    """Channel attention (shared bottleneck MLP + per-path combiners) and
    spatial attention (two 4x4 convs + per-cell combiners)."""

    ch_fc1: DenseParams   # C -> C/s, shared by max and avg paths
    ch_fc2: DenseParams   # C/s -> C
    lam1: Tensor          # (1, 1, C)
    gam1: Tensor
    sp_conv_max: Conv2DParams
    sp_conv_avg: Conv2DParams
    lam2: Tensor          # (N, M, 1)
    gam2: Tensor

    @classmethod
    def create(cls, rng, channels, ratio, grid, dtype):
        if channels % ratio:
            raise T.ShapeError(f"attention ratio {ratio} must divide the "
                               f"channel count {channels}")
        n, m = grid
        mk = lambda key, shape: Tensor(
            rng.child(key).uniform(-0.05, 0.05, shape, dtype),
            requires_grad=True)
        return cls(
            ch_fc1=DenseParams.create(rng.child(0), channels, channels // ratio,
                                      dtype),
            ch_fc2=DenseParams.create(rng.child(1), channels // ratio, channels,
                                      dtype),
            lam1=mk(2, (1, 1, channels)),
            gam1=mk(3, (1, 1, channels)),
            sp_conv_max=Conv2DParams.create(rng.child(4), 1, 1, 4, dtype=dtype),
            sp_conv_avg=Conv2DParams.create(rng.child(5), 1, 1, 4, dtype=dtype),
            lam2=mk(6, (n, m, 1)),
            gam2=mk(7, (n, m, 1)),
        )


def _channel_mlp(pooled, p: AttentionParams) -> Tensor:
    # pooled: (B, 1, 1, C) -> shared bottleneck -> (B, 1, 1, C)
    b, c = pooled.shape[0], pooled.shape[-1]
    v = reshape(pooled, (b, c))
    v = dense(relu(dense(v, p.ch_fc1)), p.ch_fc2)
    return reshape(v, (b, 1, 1, c))


def channel_attention(d, p: AttentionParams) -> Tensor:
    """Reweight channels: pooled descriptors through a shared bottleneck,
    combined with trainable per-channel weights, sigmoid-gated."""
    xmax = _channel_mlp(global_pool_spatial(d, "max"), p)
    xavg = _channel_mlp(global_pool_spatial(d, "avg"), p)
    a_c = sigmoid(add(mul(p.lam1, xmax), mul(p.gam1, xavg)))
    return mul(a_c, d)


def spatial_attention(d, p: AttentionParams) -> Tensor:
    """Reweight grid cells: channel-wise max/avg maps through per-map 4x4
    convs (linear), combined with trainable per-cell weights, one sigmoid."""
    xmax = conv_layer(pool_channelwise(d, "max"), p.sp_conv_max)
    xavg = conv_layer(pool_channelwise(d, "avg"), p.sp_conv_avg)
    a_s = sigmoid(add(mul(p.lam2, xmax), mul(p.gam2, xavg)))
    return mul(a_s, d)


# ---------------------------------------------------------------------------
# decoder

@dataclass
class DecoderLevelParams:
    up: Conv2DParams
    skip_bn: BatchNormParams | None   # None when the long skip is disabled
    res: ResUnitParams


@dataclass
class DecoderParams:
    conv0: Conv2DParams
    bn0: BatchNormParams
    levels: list
    attention: AttentionParams | None
    final: Conv2DParams

    @classmethod
    def create(cls, rng, in_channels, filters, depth, kernel, sampler_kernel,
               ratio, grid, long_skip, with_attention, dtype):
        levels = [
            DecoderLevelParams(
                Conv2DParams.create(rng.child(10 + l), filters, filters,
                                    sampler_kernel, stride=(2, 2),
                                    padding=(0, 0, 0, 0), dtype=dtype),
                BatchNormParams.create(filters, dtype=dtype) if long_skip
                else None,
                ResUnitParams.create(rng.child(40 + l), filters, kernel, dtype),
            )
            for l in range(depth)
        ]
        attn = (AttentionParams.create(rng.child(7), filters, ratio, grid,
                                       dtype) if with_attention else None)
        return cls(
            Conv2DParams.create(rng.child(0), in_channels, filters, kernel,
                                dtype=dtype),
            BatchNormParams.create(filters, dtype=dtype),
            levels,
            attn,
            Conv2DParams.create(rng.child(1), filters, 2, kernel, dtype=dtype),
        )


def decode(z, skips, p: DecoderParams, train: bool) -> Tensor:
    """Latent frame -> prediction. Each level doubles the grid with a
    transposed conv; with the long skip enabled the mirrored encoder residual
    output (most recent frame) is added and ReLU+BN applied before the
    residual unit. Ends with attention (when present) and a tanh conv to the
    two flow channels.

    skips[l] is the most-recent-frame residual-unit output of encoder level
    l (grid N/2^l x M/2^l); decoder level i consumes skips[L-1-i].
    """
    d = batchnorm(relu(conv_layer(z, p.conv0)), p.bn0, train)
    depth = len(p.levels)
    for i, lvl in enumerate(p.levels):
        d = conv_transpose_layer(d, lvl.up)
        if lvl.skip_bn is not None:
            if skips is None:
                raise T.ShapeError("decode: long skip enabled but no skip "
                                   "tensors supplied")
            d = batchnorm(relu(add(d, skips[depth - 1 - i])), lvl.skip_bn,
                          train)
        d = res_unit(d, lvl.res, train)
    if p.attention is not None:
        d = channel_attention(d, p.attention)
        d = spatial_attention(d, p.attention)
    return tanh(conv_layer(d, p.final))

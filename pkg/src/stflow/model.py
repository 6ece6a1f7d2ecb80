"""Model assembly: configuration, forward pass, per-layer parameter/FLOP
accounting, ablation flags, and versioned binary checkpoints.

FLOP convention (documented, applied uniformly): convolutions and dense
layers cost 2 x multiply-accumulates x output elements plus one op per output
element for the bias; elementwise ops (activations, adds, gates, batch-norm
scale/shift in eval form) cost one op per element written; pooling costs one
op per input element reduced. Counts are for batch 1 with all p frames.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, fields, asdict

import numpy as np

from . import blocks
from .blocks import (
    AttentionParams, CascadeParams, DecoderParams, EncoderParams,
    ExternalParams, cascade, decode, encode, external_branch,
)
from .data import EXTERNAL_SCHEMA, external_width
from .nnops import BatchNormParams, Conv2DParams, DenseParams
from .tensor import Rng, Tensor, TRAIN_DTYPE, add, take_index

CHECKPOINT_MAGIC = b"STFW"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """A model or run configuration violates its invariants."""


class CheckpointError(RuntimeError):
    """Checkpoint unreadable, corrupt, or built for another config."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    depth is the number of encoder/decoder halving/doubling levels; grid dims
    must be divisible by 2**depth. kernel applies to the main convolutions,
    sampler_kernel to the stride-2 halving/doubling convolutions, cmu_kernel
    to the gated-unit convolutions. Flags prune subgraphs (ablations).
    """

    p: int = 4
    depth: int = 2
    grid: tuple = (16, 8)
    base_filters: int = 64
    bottleneck_channels: int = 16
    kernel: int = 3
    sampler_kernel: int = 2
    cmu_kernel: int = 5
    attention_ratio: int = 4
    embed_width: int = 10
    long_skip: bool = True
    attention: bool = True
    external: bool = True
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(v) for v in self.grid)
        self.validate()

    def validate(self):
        n, m = self.grid
        if self.p < 2:
            raise ConfigError(f"p must be >= 2, got {self.p}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        scale = 2 ** self.depth
        if n <= 0 or m <= 0 or n % scale or m % scale or n // scale < 1 \
                or m // scale < 1:
            raise ConfigError(
                f"grid {n}x{m} not divisible into positive dims by "
                f"2^depth = {scale}")
        if self.attention and self.base_filters % self.attention_ratio:
            raise ConfigError(
                f"attention_ratio {self.attention_ratio} must divide "
                f"base_filters {self.base_filters}")
        for name in ("base_filters", "bottleneck_channels", "kernel",
                     "sampler_kernel", "cmu_kernel", "embed_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def latent_grid(self) -> tuple:
        n, m = self.grid
        return n // 2 ** self.depth, m // 2 ** self.depth

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class SummaryRow:
    name: str
    output_shape: tuple
    params: int
    flops: int


@dataclass
class ModelSummary:
    rows: list

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def to_text(self) -> str:
        width = max(len(r.name) for r in self.rows) + 2
        lines = [f"{'layer':<{width}}{'output shape':<20}{'params':>12}"
                 f"{'flops':>16}"]
        lines.append("-" * (width + 48))
        for r in self.rows:
            shape = "x".join(str(s) for s in r.output_shape)
            lines.append(f"{r.name:<{width}}{shape:<20}{r.params:>12,}"
                         f"{r.flops:>16,}")
        lines.append("-" * (width + 48))
        lines.append(f"{'total':<{width}}{'':<20}{self.total_params:>12,}"
                     f"{self.total_flops:>16,}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        out = ["layer,output_shape,params,flops"]
        for r in self.rows:
            shape = "x".join(str(s) for s in r.output_shape)
            out.append(f"{r.name},{shape},{r.params},{r.flops}")
        out.append(f"total,,{self.total_params},{self.total_flops}")
        return "\n".join(out) + "\n"


class Model:
    """Built network: parameter containers plus an ordered name registry."""

    def __init__(self, cfg: ModelConfig, dtype=TRAIN_DTYPE):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        rng = Rng(cfg.seed)
        n, m = cfg.grid
        f, c = cfg.base_filters, cfg.bottleneck_channels
        self.encoder = EncoderParams.create(
            rng.child(0), 2, f, c, cfg.depth, cfg.kernel, cfg.sampler_kernel,
            dtype)
        self.cascade = CascadeParams.create(
            rng.child(1), cfg.p, c, cfg.cmu_kernel, dtype)
        nl, ml = cfg.latent_grid
        self.external = (ExternalParams.create(
            rng.child(2), EXTERNAL_SCHEMA, cfg.embed_width, (nl, ml, c), dtype)
            if cfg.external else None)
        self.decoder = DecoderParams.create(
            rng.child(3), c, f, cfg.depth, cfg.kernel, cfg.sampler_kernel,
            cfg.attention_ratio, (n, m), cfg.long_skip, cfg.attention, dtype)
        self._params: list = []
        self._bn_stats: list = []
        for root, tag in ((self.encoder, "encoder"),
                          (self.cascade, "cascade"),
                          (self.external, "external"),
                          (self.decoder, "decoder")):
            if root is not None:
                _collect(root, tag, self._params, self._bn_stats)
        for name, t in self._params:
            t.name = name

    def parameters(self) -> list:
        """Ordered (name, Tensor) pairs of every trainable tensor."""
        return list(self._params)

    def bn_stats(self) -> list:
        """Ordered (name, BatchNormParams, attr) for running statistics."""
        return list(self._bn_stats)

    def n_params(self) -> int:
        return sum(t.size for _, t in self._params)

    def forward(self, frames, ext=None, train: bool = False) -> Tensor:
        """(B,p,N,M,2) closeness + (B,ext) factors -> (B,N,M,2) in (-1,1)."""
        cfg = self.cfg
        if not isinstance(frames, Tensor):
            frames = Tensor(np.asarray(frames, dtype=self.dtype))
        expect = (cfg.p, *cfg.grid, 2)
        if frames.ndim != 5 or frames.shape[1:] != expect:
            raise ConfigError(f"forward: frames shape {frames.shape} != "
                              f"(batch, {', '.join(map(str, expect))})")
        state = encode(frames, self.encoder, train)
        z = cascade(state.final, self.cascade)
        if self.external is not None:
            if ext is None:
                raise ConfigError("forward: model uses external factors but "
                                  "none were supplied")
            if not isinstance(ext, Tensor):
                ext = Tensor(np.asarray(ext, dtype=self.dtype))
            z = add(z, external_branch(ext, self.external))
        skips = ([take_index(eru, cfg.p - 1, axis=1)
                  for eru in state.eru_levels] if cfg.long_skip else None)
        return decode(z, skips, self.decoder, train)

    def set_trainable_grads_to_none(self):
        for _, t in self._params:
            t.grad = None


def _collect(obj, prefix, out_params, out_stats):
    """Deterministic registry walk: dataclass field order, list order."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            out_params.append((prefix, obj))
        return
    if isinstance(obj, BatchNormParams):
        out_params.append((f"{prefix}.gamma", obj.gamma))
        out_params.append((f"{prefix}.beta", obj.beta))
        out_stats.append((f"{prefix}.running_mean", obj, "running_mean"))
        out_stats.append((f"{prefix}.running_var", obj, "running_var"))
        return
    if isinstance(obj, (Conv2DParams, DenseParams)):
        out_params.append((f"{prefix}.weights", obj.weights))
        out_params.append((f"{prefix}.bias", obj.bias))
        return
    if isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _collect(v, f"{prefix}.{i}", out_params, out_stats)
        return
    if hasattr(obj, "__dataclass_fields__"):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (Tensor, BatchNormParams, Conv2DParams,
                              DenseParams, list, tuple)) or \
                    hasattr(v, "__dataclass_fields__"):
                _collect(v, f"{prefix}.{f.name}", out_params, out_stats)


def build(cfg: ModelConfig, dtype=TRAIN_DTYPE) -> Model:
    """Construct the network with deterministic seeded initialization."""
    return Model(cfg, dtype)


# ---------------------------------------------------------------------------
# analytic per-layer summary (params + FLOPs under the documented convention)

def conv_flops(kh: int, kw: int, cin: int, out_elems: int) -> int:
    """Convolution cost: 2 multiply-accumulates per kernel tap per output
    element, plus one op per output element for the bias."""
    return 2 * kh * kw * cin * out_elems + out_elems


def dense_flops(n_in: int, n_out: int) -> int:
    """Dense cost: 2 ops per weight plus one per output for the bias."""
    return 2 * n_in * n_out + n_out


def conv_transpose_flops(kh: int, kw: int, cout: int, in_elems: int,
                         out_elems: int) -> int:
    """Transposed convolution: every input element scatters through
    kh*kw*cout weights (2 ops each), plus bias once per output element."""
    return 2 * kh * kw * cout * in_elems + out_elems


def summarize(cfg: ModelConfig) -> ModelSummary:
    rows: list[SummaryRow] = []
    f, c, p = cfg.base_filters, cfg.bottleneck_channels, cfg.p
    k, sk, mk = cfg.kernel, cfg.sampler_kernel, cfg.cmu_kernel
    n, m = cfg.grid

    def conv(name, cin, cout, kk, oh, ow, frames=1, act=True, bn=True):
        oe = oh * ow * cout * frames
        fl = conv_flops(kk, kk, cin, oe)
        par = kk * kk * cin * cout + cout
        rows.append(SummaryRow(name, (frames, oh, ow, cout) if frames > 1
                               else (oh, ow, cout), par, fl))
        if act:
            rows.append(SummaryRow(f"{name}.act", (frames, oh, ow, cout)
                                   if frames > 1 else (oh, ow, cout), 0, oe))
        if bn:
            rows.append(SummaryRow(f"{name}.bn", (frames, oh, ow, cout)
                                   if frames > 1 else (oh, ow, cout),
                                   2 * cout, 2 * oe))

    def ew(name, shape, nops):
        rows.append(SummaryRow(name, shape, 0, nops))

    # encoder, time distributed over p frames
    h, w = n, m
    conv("encoder.conv0", 2, f, k, h, w, frames=p)
    for l in range(cfg.depth):
        conv(f"encoder.level{l}.res.conv1", f, f, k, h, w, frames=p)
        conv(f"encoder.level{l}.res.conv2", f, f, k, h, w, frames=p)
        ew(f"encoder.level{l}.res.add", (p, h, w, f), p * h * w * f)
        conv(f"encoder.level{l}.down", f, f, sk, h // 2, w // 2, frames=p)
        h, w = h // 2, w // 2
    conv("encoder.close", f, c, k, h, w, frames=p)
    nl, ml = h, w
    e = nl * ml * c

    # cascade: per-level shared CMUs; level k applies its CMU (p-1-k) times
    mu_par = 4 * (mk * mk * c * c + c)
    cmu_par = 2 * mu_par + 2 * (mk * mk * c * c + c)
    mu_fl = 4 * (conv_flops(mk, mk, c, e) + e) + 5 * e  # 4 convs+act, 5 ew
    cmu_fl = 3 * mu_fl + e + 2 * (conv_flops(mk, mk, c, e) + e) + e
    for lvl in range(p - 1):
        apps = p - 1 - lvl
        rows.append(SummaryRow(f"cascade.level{lvl}", (nl, ml, c), cmu_par,
                               apps * cmu_fl))

    # external branch
    if cfg.external:
        ew_width = cfg.embed_width
        epar = sum(wd * ew_width + ew_width for _, wd in EXTERNAL_SCHEMA)
        efl = sum(dense_flops(wd, ew_width) + ew_width
                  for _, wd in EXTERNAL_SCHEMA)
        rows.append(SummaryRow("external.embed",
                               (ew_width * len(EXTERNAL_SCHEMA),), epar, efl))
        win = ew_width * len(EXTERNAL_SCHEMA)
        rows.append(SummaryRow("external.project", (nl, ml, c),
                               win * e + e, dense_flops(win, e)))
        ew("external.add", (nl, ml, c), e)

    # decoder
    conv("decoder.conv0", c, f, k, nl, ml)
    h, w = nl, ml
    for l in range(cfg.depth):
        oe = (h * 2) * (w * 2) * f
        rows.append(SummaryRow(f"decoder.level{l}.up", (h * 2, w * 2, f),
                               sk * sk * f * f + f,
                               conv_transpose_flops(sk, sk, f, h * w * f, oe)))
        h, w = h * 2, w * 2
        if cfg.long_skip:
            ew(f"decoder.level{l}.skip", (h, w, f), oe)       # add ERU
            ew(f"decoder.level{l}.skip.act", (h, w, f), oe)
            rows.append(SummaryRow(f"decoder.level{l}.skip.bn", (h, w, f),
                                   2 * f, 2 * oe))
        conv(f"decoder.level{l}.res.conv1", f, f, k, h, w)
        conv(f"decoder.level{l}.res.conv2", f, f, k, h, w)
        ew(f"decoder.level{l}.res.add", (h, w, f), h * w * f)

    if cfg.attention:
        s = cfg.attention_ratio
        hw = h * w
        rows.append(SummaryRow("attention.channel.pool", (1, 1, f), 0,
                               2 * hw * f))
        mlp_par = (f * (f // s) + f // s) + ((f // s) * f + f)
        one_path = dense_flops(f, f // s) + f // s + dense_flops(f // s, f)
        rows.append(SummaryRow("attention.channel.mlp", (1, 1, f), mlp_par,
                               2 * one_path))
        rows.append(SummaryRow("attention.channel.gate", (1, 1, f), 2 * f,
                               4 * f))
        ew("attention.channel.apply", (h, w, f), hw * f)
        rows.append(SummaryRow("attention.spatial.pool", (h, w, 1), 0,
                               2 * hw * f))
        sp_fl = 2 * conv_flops(4, 4, 1, hw)
        rows.append(SummaryRow("attention.spatial.conv", (h, w, 1),
                               2 * (16 + 1), sp_fl))
        rows.append(SummaryRow("attention.spatial.gate", (h, w, 1),
                               2 * hw, 4 * hw))
        ew("attention.spatial.apply", (h, w, f), hw * f)

    conv("decoder.final", f, 2, k, h, w, act=True, bn=False)
    return ModelSummary(rows)


def count_params(model: Model) -> ModelSummary:
    """Per-layer trainable parameter table; running stats excluded."""
    summary = summarize(model.cfg)
    live = model.n_params()
    if summary.total_params != live:
        raise AssertionError(
            f"summary params {summary.total_params} != live registry {live}")
    return summary


def count_flops(model: Model, batch: int = 1) -> ModelSummary:
    """Per-layer FLOP table under the documented convention (batch x that)."""
    summary = summarize(model.cfg)
    if batch != 1:
        summary = ModelSummary([
            SummaryRow(r.name, r.output_shape, r.params, r.flops * batch)
            for r in summary.rows])
    return summary


# ---------------------------------------------------------------------------
# checkpoints

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _tensor_entries(model: Model):
    for name, t in model.parameters():
        yield name, t.data
    for name, bn, attr in model.bn_stats():
        yield name, getattr(bn, attr)


def save(model: Model, path) -> None:
    """Versioned binary checkpoint: header, named tensors, sha256 trailer."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    digest = bytes.fromhex(model.cfg.digest())
    buf.write(digest)
    cfg_json = json.dumps(model.cfg.to_dict(), sort_keys=True,
                          separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    entries = list(_tensor_entries(model))
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"),
                                                   copy=False).tobytes())
    payload = buf.getvalue()
    checksum = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(checksum)


def load(path, cfg: ModelConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint; reject corrupt files and config
    mismatches. Forward outputs of the loaded model are bit-identical to the
    saved one (BN running statistics are included)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 44 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload, checksum = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != checksum:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    off = 4
    (version,) = struct.unpack_from("<I", payload, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = payload[off:off + 32].hex()
    off += 32
    (jlen,) = struct.unpack_from("<I", payload, off)
    off += 4
    stored_cfg = ModelConfig.from_dict(json.loads(payload[off:off + jlen]))
    off += jlen
    if cfg is not None and cfg.digest() != digest:
        raise CheckpointError(
            f"{path}: checkpoint was built for config {digest[:12]}, "
            f"requested {cfg.digest()[:12]}")
    if stored_cfg.digest() != digest:
        raise CheckpointError(f"{path}: embedded config does not match digest")
    (count,) = struct.unpack_from("<I", payload, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", payload, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", payload, off)
        off += 4 * ndim
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(payload, dtype.newbyteorder("<"), count=max(
            int(np.prod(shape)), 1) if ndim else 1, offset=off)
        arr = arr.astype(dtype).reshape(shape)
        off += nbytes
        arrays[name] = arr
    dtype = (np.float64 if arrays and next(iter(arrays.values())).dtype
             == np.float64 else np.float32)
    model = Model(stored_cfg, dtype=dtype)
    for name, t in model.parameters():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if arrays[name].shape != t.data.shape:
            raise CheckpointError(f"{path}: tensor {name} shape "
                                  f"{arrays[name].shape} != {t.data.shape}")
        t.data = arrays[name].copy()
    for name, bn, attr in model.bn_stats():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        setattr(bn, attr, arrays[name].copy())
    return model

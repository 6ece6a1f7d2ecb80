"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

Every array the model touches is a :class:`Tensor` wrapping a numpy ndarray.
Operations executed inside a ``with tape() as tp:`` block are recorded on an
explicit append-only :class:`Tape`; ``tp.backward(loss)`` replays the records
in reverse, summing gradients into every ``requires_grad`` leaf, then clears
the tape. Outside a tape block nothing is recorded, so evaluation paths pay
no bookkeeping cost.

Two precisions are used deliberately: float32 for training, float64 for
gradient checking (central differences are unreliable in float32). Reductions
go through numpy's sequential per-axis kernels with BLAS pinned to the thread
count from STFLOW_THREADS (default 1), so results are bit-reproducible for a
given seed and config.
"""
from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested op kind."""


class GradcheckNaNError(ArithmeticError):
    """A NaN showed up in the analytic or numeric gradient."""


class Rng:
    """Deterministic random stream: PCG64 seeded by a 64-bit integer.

    The same seed yields the same stream on every platform and run. Children
    derived with :meth:`child` are independent streams, deterministic in
    (seed, key).
    """

    algorithm = "numpy PCG64 via SeedSequence"

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed)
        self._key = _key
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_key))
        )

    def child(self, key: int) -> "Rng":
        return Rng(self.seed, self._key + (int(key),))

    def uniform(self, low, high, shape, dtype=TRAIN_DTYPE) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def normal(self, scale, shape, dtype=TRAIN_DTYPE) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * scale).astype(dtype)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


class Tensor:
    """Row-major dense array plus autodiff metadata.

    ``data`` is always a numpy ndarray; ``shape`` is immutable after creation
    (``reshape`` returns a new view-tensor with the same element count).
    Gradients accumulate by summation into ``grad`` — there is no implicit
    averaging anywhere.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(TRAIN_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # arithmetic sugar; the functions below do the real work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int)
                       else shape[0])

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis, keepdims)


class Node:
    """One recorded primitive: inputs, output, and the saved backward."""

    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of ops; append order is topological by construction."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict:
        """Run reverse-mode accumulation from a scalar loss.

        Sums gradients into every ``requires_grad`` tensor reachable from the
        loss, returns the full {id(tensor): gradient} map, then clears the
        tape.
        """
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for node in reversed(self.nodes):
            gout = grads.get(id(node.output))
            if gout is None:
                continue
            gins = node.backward_fn(gout)
            for t, g in zip(node.inputs, gins):
                if g is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        leaves: dict[int, Tensor] = {id(loss): loss} if loss.requires_grad else {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad:
                    leaves.setdefault(id(t), t)
        for key, t in leaves.items():
            if key in grads:
                g = grads[key]
                t.grad = g.copy() if t.grad is None else t.grad + g
        self.clear()
        return grads

    def clear(self):
        self.nodes.clear()


_TAPE_STACK: list[Tape] = []


@contextmanager
def tape():
    """Record ops executed in this block onto a fresh Tape."""
    tp = Tape()
    _TAPE_STACK.append(tp)
    try:
        yield tp
    finally:
        _TAPE_STACK.pop()


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(kind, inputs, out_data, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tp = active_tape()
    if tp is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tp.nodes.append(Node(kind, inputs, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(kind, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: operands not broadcastable, "
                         f"{a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_broadcast("add", a, b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_broadcast("sub", a, b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_broadcast("mul", a, b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    return _record("matmul", (a, b), a.data @ b.data,
                   lambda g: (g @ b.data.T,
                              a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])))


def powc(a, exponent: float) -> Tensor:
    """Elementwise a**c for a constant exponent."""
    a = _coerce(a)
    out = a.data ** exponent

    def bwd(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _record("powc", (a,), out, bwd)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(int(s) for s in (shape if hasattr(shape, "__iter__") else (shape,)))
    if -1 not in shape and math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = a.data.reshape(shape)
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def moveaxis(a, src, dst) -> Tensor:
    a = _coerce(a)
    out = np.moveaxis(a.data, src, dst)
    return _record("moveaxis", (a,), out, lambda g: (np.moveaxis(g, dst, src),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out, bwd)


def take_index(a, index: int, axis: int = 0) -> Tensor:
    """Select one slice along an axis (the axis is removed)."""
    a = _coerce(a)
    index = int(index)
    out = np.take(a.data, index, axis=axis)

    def bwd(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        ga[tuple(sl)] = g
        return (ga,)

    return _record("take_index", (a,), out, bwd)


def slice_axis(a, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice [start:stop) along an axis (axis kept)."""
    a = _coerce(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    out = a.data[tuple(sl)]

    def bwd(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        ga[tuple(sl)] = g
        return (ga,)

    return _record("slice_axis", (a,), out, bwd)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _record("sum", (a,), out, bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axis, a.ndim)
    n = math.prod(a.shape[i] for i in axes)
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype, copy=False),)

    return _record("mean", (a,), out, bwd)


def amax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max-reduction. Ties split the gradient equally, which is exactly what
    central differences converge to at a tie."""
    a = _coerce(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.max(axis=axes, keepdims=keepdims)
    out_kd = a.data.max(axis=axes, keepdims=True)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        mask = (a.data == out_kd)
        counts = mask.sum(axis=axes, keepdims=True)
        return ((mask * (g / counts)).astype(a.dtype, copy=False),)

    return _record("amax", (a,), out, bwd)


def relu(a) -> Tensor:
    a = _coerce(a)
    out = np.maximum(a.data, 0)
    return _record("relu", (a,), out, lambda g: ((a.data > 0) * g,))


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: ((1.0 - out * out) * g,))


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", (a,), out, lambda g: (out * (1.0 - out) * g,))


# ---------------------------------------------------------------------------
# convolution primitives (im2col / col2im, NHWC, cross-correlation — no flip)

def same_padding(kh: int, kw: int) -> tuple:
    """(top, bottom, left, right) padding preserving dims at stride 1.

    Odd kernels pad symmetrically; even kernels pad one more at bottom/right
    (a 4x4 kernel gets (1,2,1,2))."""
    return ((kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2)


def _pad_nhwc(x: np.ndarray, padding) -> np.ndarray:
    pt, pb, pl, pr = padding
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _gather_cols(xp: np.ndarray, kh, kw, sh, sw, oh, ow) -> np.ndarray:
    """(B,Hp,Wp,C) -> (B,oh,ow,kh,kw,C) patch matrix via kh*kw strided copies."""
    b, _, _, c = xp.shape
    cols = np.empty((b, oh, ow, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + sh * oh:sh, j:j + sw * ow:sw, :]
    return cols


def _scatter_cols(cols: np.ndarray, hp, wp, sh, sw) -> np.ndarray:
    """Adjoint of _gather_cols: (B,oh,ow,kh,kw,C) -> (B,Hp,Wp,C) by summed
    scatter. Accumulation order is the fixed (i,j) kernel loop."""
    b, oh, ow, kh, kw, c = cols.shape
    xp = np.zeros((b, hp, wp, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + sh * oh:sh, j:j + sw * ow:sw, :] += cols[:, :, :, i, j, :]
    return xp


def _conv_geometry(kind, h, w, kh, kw, stride, padding):
    sh, sw = stride
    pt, pb, pl, pr = padding
    oh = (h + pt + pb - kh) // sh + 1
    ow = (w + pl + pr - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"{kind}: output dims {oh}x{ow} non-positive for input "
                         f"{h}x{w}, kernel {kh}x{kw}, stride {stride}, "
                         f"padding {padding}")
    return oh, ow


def conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0, 0, 0)) -> Tensor:
    """2-D cross-correlation (no kernel flip) + bias.

    x: (B,H,W,Cin) or (H,W,Cin); w: (kh,kw,Cin,Cout); b: (Cout,) or None.
    """
    x, w = _coerce(x), _coerce(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/kernel, got {x.shape}/{w.shape}")
    kh, kw, cin, cout = w.shape
    if xd.shape[3] != cin:
        raise ShapeError(f"conv2d: input channels {xd.shape[3]} != kernel "
                         f"in_channels {cin}")
    sh, sw = stride
    oh, ow = _conv_geometry("conv2d", xd.shape[1], xd.shape[2], kh, kw, stride,
                            padding)
    xp = _pad_nhwc(xd, padding)
    cols = _gather_cols(xp, kh, kw, sh, sw, oh, ow)
    bsz = xd.shape[0]
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols.reshape(bsz * oh * ow, kh * kw * cin) @ wmat
    out = out.reshape(bsz, oh, ow, cout)
    if b is not None:
        b = _coerce(b, x)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gm = g.reshape(bsz * oh * ow, cout)
        gw = (cols.reshape(bsz * oh * ow, kh * kw * cin).T @ gm).reshape(w.shape)
        gcols = (gm @ wmat.T).reshape(bsz, oh, ow, kh, kw, cin)
        gxp = _scatter_cols(gcols, xp.shape[1], xp.shape[2], sh, sw)
        pt, pb, pl, pr = padding
        gx = gxp[:, pt:xp.shape[1] - pb, pl:xp.shape[2] - pr, :]
        if squeeze:
            gx = gx[0]
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    out_t = _record("conv2d", inputs, out[0] if squeeze else out, bwd)
    return out_t


def conv2d_transpose(x, w, b=None, stride=(1, 1), padding=(0, 0, 0, 0)) -> Tensor:
    """Transposed convolution: the exact adjoint of ``conv2d`` with the same
    weights, stride and padding, mapping Cout-space back to Cin-space... with
    the weight layout (kh,kw,Cin,Cout) read as Cin = IN of this op.

    x: (B,H,W,Cin) or (H,W,Cin); w: (kh,kw,Cin,Cout) with adjointness
    <conv2d(u, w'), x> == <u, conv2d_transpose(x, w)> for w' = w transposed on
    the channel axes. Output dims: (H-1)*sh + kh - pt - pb (and likewise W).
    """
    x, w = _coerce(x), _coerce(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_transpose: need 4-D input/kernel, got "
                         f"{x.shape}/{w.shape}")
    kh, kw, cin, cout = w.shape
    if xd.shape[3] != cin:
        raise ShapeError(f"conv2d_transpose: input channels {xd.shape[3]} != "
                         f"kernel in_channels {cin}")
    sh, sw = stride
    pt, pb, pl, pr = padding
    h, wd = xd.shape[1], xd.shape[2]
    oh = (h - 1) * sh + kh - pt - pb
    ow = (wd - 1) * sw + kw - pl - pr
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d_transpose: output dims {oh}x{ow} non-positive")
    bsz = xd.shape[0]
    # scatter: every input pixel contributes a kh*kw*cout patch
    wmat = w.data.reshape(kh * kw, cin, cout)
    cols = np.einsum("bhwc,kco->bhwko", xd, wmat, optimize=True)
    cols = cols.reshape(bsz, h, wd, kh, kw, cout)
    yp = _scatter_cols(cols, oh + pt + pb, ow + pl + pr, sh, sw)
    out = yp[:, pt:pt + oh, pl:pl + ow, :]
    if b is not None:
        b = _coerce(b, x)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d_transpose: bias shape {b.shape} != ({cout},)")
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gp = np.pad(g, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        gcols = _gather_cols(gp, kh, kw, sh, sw, h, wd)
        gcols = gcols.reshape(bsz, h, wd, kh * kw, cout)
        gx = np.einsum("bhwko,kco->bhwc", gcols, wmat, optimize=True)
        gw = np.einsum("bhwc,bhwko->kco", xd, gcols,
                       optimize=True).reshape(w.shape)
        if squeeze:
            gx = gx[0]
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, cout).sum(axis=0)

    return _record("conv2d_transpose", inputs, out[0] if squeeze else out, bwd)


# ---------------------------------------------------------------------------
# dispatch + gradient checking

OPS = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul, "powc": powc,
    "reshape": reshape, "moveaxis": moveaxis, "concat": concat, "sum": tsum,
    "mean": tmean, "amax": amax, "relu": relu, "tanh": tanh,
    "sigmoid": sigmoid, "conv2d": conv2d, "conv2d_transpose": conv2d_transpose,
    "take_index": take_index, "slice_axis": slice_axis,
}


def forward_op(kind: str, inputs, context: dict | None = None) -> Tensor:
    """Uniform entry point: look up the primitive by kind and apply it."""
    if kind not in OPS:
        raise KeyError(f"unknown op kind {kind!r}")
    return OPS[kind](*inputs, **(context or {}))


def backward(loss: Tensor) -> dict:
    """Backward on the innermost active tape."""
    tp = active_tape()
    if tp is None:
        raise RuntimeError("backward: no active tape")
    return tp.backward(loss)


def gradcheck(f, x: Tensor, eps: float = 1e-4, indices=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic; ``x``
    should be float64. ``indices`` optionally restricts the check to a subset
    of flat coordinates. Relative error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if x.data.dtype != CHECK_DTYPE:
        raise ValueError("gradcheck requires a float64 tensor")
    x.requires_grad = True
    x.grad = None
    with tape() as tp:
        y = f(x)
        tp.backward(y)
    if x.grad is None:
        raise RuntimeError("gradcheck: f does not depend on x")
    analytic = x.grad.ravel()
    flat = x.data.ravel()
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        num = (fp - fm) / (2.0 * eps)
        ana = float(analytic[i])
        if math.isnan(num) or math.isnan(ana):
            raise GradcheckNaNError(
                f"NaN at flat index {i}: analytic={ana}, numeric={num}")
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst

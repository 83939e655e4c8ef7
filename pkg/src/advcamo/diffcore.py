"""Dense float64 tensors with taped reverse-mode differentiation.

Every backward rule is written in terms of the same primitive ops it
differentiates, so gradients of gradients (needed when a gradient-weighted
attention map feeds a downstream loss) come out of the one engine with no
special cases. Arrays are 64-bit floats throughout; evaluation is
deterministic for identical inputs in single-threaded mode.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np


class DiffcoreError(Exception):
    """Base error for tensor-engine failures."""


class ShapeError(DiffcoreError):
    """Operand shapes do not conform to a primitive's rule."""

    def __init__(self, op: str, message: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: {message}" + (f" (shapes {detail})" if shapes else ""))


class Tensor:
    """A dense float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "tensor is not scalar", self.data.shape)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through the taped primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class _Record:
    """One taped operation: output node, parent nodes, backward rule."""

    __slots__ = ("out", "parents", "rule")

    def __init__(self, out, parents, rule):
        self.out = out
        self.parents = parents
        self.rule = rule


_STATE = threading.local()


def _tape_stack():
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def _suspended() -> bool:
    return getattr(_STATE, "suspend", 0) > 0


def active_tape():
    """The innermost open Tape on this thread, or None."""
    stack = _tape_stack()
    if not stack or _suspended():
        return None
    return stack[-1]


@contextmanager
def no_record():
    """Suspend recording; ops inside evaluate forward-only."""
    _STATE.suspend = getattr(_STATE, "suspend", 0) + 1
    try:
        yield
    finally:
        _STATE.suspend -= 1


@contextmanager
def ensure_tape():
    """Yield the active tape, opening a temporary one when none is active.

    Lets functions that take gradients internally run both inside a caller's
    tape (staying differentiable end to end) and standalone.
    """
    tape = active_tape()
    if tape is not None:
        yield tape
    else:
        with Tape() as t:
            yield t


class Tape:
    """Ordered record of operations; single-writer, one per scene/thread.

    Reverse iteration over the record list is a reverse topological order,
    since an op can only read tensors recorded before it.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tape stack corrupted"
        stack.pop()
        self.clear()
        return False

    def clear(self):
        self.records.clear()

    def grad(self, output: Tensor, sources, create_graph: bool = False):
        """Gradients of a scalar output w.r.t. each source tensor.

        With create_graph=True the returned tensors are themselves recorded
        on this tape and can be differentiated again. Sources not reached by
        the backward sweep get a zero gradient.
        """
        if output.data.size != 1:
            raise ShapeError("grad", "output must be scalar", output.data.shape)
        wanted = {id(s) for s in sources}
        seeds = {id(output): Tensor(np.ones_like(output.data))}
        keep = {id(output): output}
        found = {}

        def run():
            # snapshot: rules recorded during a create_graph sweep must not
            # be visited by the sweep itself
            for rec in reversed(list(self.records)):
                g_out = seeds.pop(id(rec.out), None)
                if g_out is None:
                    continue
                keep.pop(id(rec.out), None)
                if id(rec.out) in wanted:
                    # an intermediate source: its gradient is complete once
                    # its producing record is reached
                    found[id(rec.out)] = g_out
                grads = rec.rule(g_out)
                for parent, g in zip(rec.parents, grads):
                    if g is None or not parent.requires_grad:
                        continue
                    pid = id(parent)
                    if pid in seeds:
                        seeds[pid] = add(seeds[pid], g)
                    else:
                        seeds[pid] = g
                        keep[pid] = parent

        if create_graph:
            run()
        else:
            with no_record():
                run()
        out = []
        for src in sources:
            g = found.get(id(src), seeds.get(id(src)))
            if g is None:
                g = Tensor(np.zeros_like(src.data))
            out.append(g)
        return out

    def leaf_grads(self, output: Tensor):
        """Accumulated gradient per requires_grad leaf reached from output."""
        if output.data.size != 1:
            raise ShapeError("backward", "loss must be scalar", output.data.shape)
        produced = {id(rec.out) for rec in self.records}
        seeds = {id(output): Tensor(np.ones_like(output.data))}
        keep = {id(output): output}
        with no_record():
            for rec in reversed(list(self.records)):
                g_out = seeds.pop(id(rec.out), None)
                if g_out is None:
                    continue
                keep.pop(id(rec.out), None)
                grads = rec.rule(g_out)
                for parent, g in zip(rec.parents, grads):
                    if g is None or not parent.requires_grad:
                        continue
                    pid = id(parent)
                    if pid in seeds:
                        seeds[pid] = add(seeds[pid], g)
                    else:
                        seeds[pid] = g
                        keep[pid] = parent
        return [(keep[pid], g) for pid, g in seeds.items() if id(keep[pid]) not in produced]


def backward(loss: Tensor) -> None:
    """Fill .grad on every requires_grad leaf feeding a scalar loss.

    Consumes the active tape: its records are cleared afterwards.
    """
    tape = active_tape()
    if tape is None or not tape.records:
        raise DiffcoreError("backward: no active tape with recorded operations")
    for leaf, g in tape.leaf_grads(loss):
        if leaf.grad is None:
            leaf.grad = g.data.copy()
        else:
            leaf.grad = leaf.grad + g.data
    tape.clear()


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _register(out, parents, rule) -> None:
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.records.append(_Record(out, parents, rule))


def _make(data, parents, rule) -> Tensor:
    """Create the output tensor, recording it when a tape is listening."""
    out = Tensor(data)
    _register(out, parents, rule)
    return out


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Sum a broadcast gradient back down to the parent's shape."""
    if g.data.shape == tuple(shape):
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = reduce_sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.data.shape[i] != 1)
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=True)
    if g.data.shape != tuple(shape):
        g = reshape(g, tuple(shape))
    return g


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape
    return _make(data, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape
    return _make(data, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(neg(g), bsh)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    ash, bsh = a.data.shape, b.data.shape
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(mul(g, b), ash), _unbroadcast(mul(g, a), bsh)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data
    ash, bsh = a.data.shape, b.data.shape

    def rule(g):
        ga = _unbroadcast(div(g, b), ash)
        gb = _unbroadcast(neg(mul(g, div(a, mul(b, b)))), bsh)
        return ga, gb

    return _make(data, (a, b), rule)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),))


def pow_const(a, p) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    data = a.data**p

    def rule(g):
        if p == 0.0:
            return (Tensor(np.zeros_like(a.data)),)
        return (mul(g, mul(Tensor(np.float64(p)), pow_const(a, p - 1.0))),)

    return _make(data, (a,), rule)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))
    # backward references the output node itself so gradients of gradients
    # see the full dependence on a
    _register(out, (a,), lambda g: (mul(g, out),))
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make(a.data * mask.data, (a,), lambda g: (mul(g, mask),))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = _as_tensor(a)
    m = np.where(a.data > 0, 1.0, slope)
    mask = Tensor(m)
    return _make(a.data * m, (a,), lambda g: (mul(g, mask),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = Tensor(np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)))
    one = Tensor(np.float64(1.0))
    # derivative y*(1-y) written on the output node, keeping second-order
    # gradients intact
    _register(out, (a,), lambda g: (mul(g, mul(out, sub(one, out))),))
    return out


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    return add(a, relu(sub(b, a)))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    return sub(a, relu(sub(a, b)))


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    return add(relu(a), relu(neg(a)))


# ---------------------------------------------------------------------------
# shape and linear-algebra primitives


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    orig = a.data.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", "incompatible total size", orig, shape)
    return _make(data, (a,), lambda g: (reshape(g, orig),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    orig = a.data.shape
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _make(data, (a,), lambda g: (_unbroadcast(g, orig),))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", "expects (m,k)x(k,n)", a.data.shape, b.data.shape)
    data = a.data @ b.data

    def rule(g):
        return matmul(g, transpose(b, (1, 0))), matmul(transpose(a, (1, 0)), g)

    return _make(data, (a, b), rule)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.data.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    orig = a.data.shape
    kshape = tuple(1 if i in axes else n for i, n in enumerate(orig))

    def rule(g):
        return (broadcast_to(reshape(g, kshape), orig),)

    return _make(data, (a,), rule)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    s = reduce_sum(a, axis=axes, keepdims=keepdims)
    return mul(s, Tensor(np.float64(1.0 / count)))


def reduce_max(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; ties break toward the lowest flat index."""
    a = _as_tensor(a)
    nd = a.data.ndim
    if axis is None:
        data = a.data.max()
        flat = int(np.argmax(a.data))
        onehot = np.zeros(a.data.size)
        onehot[flat] = 1.0
        onehot = Tensor(onehot.reshape(a.data.shape))
        if keepdims:
            data = np.full((1,) * nd, data)
        orig = a.data.shape
        kshape = (1,) * nd

        def rule(g):
            return (mul(broadcast_to(reshape(g, kshape), orig), onehot),)

        return _make(data, (a,), rule)
    axes = _axis_tuple(axis, nd)
    if len(axes) != 1:
        raise ShapeError("max", "axis reduction supports a single axis", a.data.shape)
    ax = axes[0]
    data = a.data.max(axis=ax, keepdims=keepdims)
    idx = np.argmax(a.data, axis=ax)
    onehot = np.zeros(a.data.shape)
    np.put_along_axis(onehot, np.expand_dims(idx, ax), 1.0, axis=ax)
    onehot_t = Tensor(onehot)
    orig = a.data.shape
    kshape = tuple(1 if i == ax else n for i, n in enumerate(orig))

    def rule(g):
        return (mul(broadcast_to(reshape(g, kshape), orig), onehot_t),)

    return _make(data, (a,), rule)


def argmax(a, axis=None):
    """Plain integer argmax of the underlying data (not differentiable)."""
    a = _as_tensor(a)
    return np.argmax(a.data, axis=axis)


# ---------------------------------------------------------------------------
# gather / scatter / concatenation


def take(a, indices) -> Tensor:
    """Gather from the flattened tensor at integer indices."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("take", "indices must be integers", idx.shape)
    size = a.data.size
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise DiffcoreError(f"take: index out of range for size {size}")
    data = np.take(a.data.reshape(-1), idx)
    orig = a.data.shape

    def rule(g):
        return (reshape(scatter_add(g, idx, size), orig),)

    return _make(data, (a,), rule)


def scatter_add(v, indices, size: int) -> Tensor:
    """Sum values into a zero vector of the given size at flat indices."""
    v = _as_tensor(v)
    idx = np.asarray(indices)
    if idx.shape != v.data.shape:
        raise ShapeError("scatter_add", "indices must match value shape", idx.shape, v.data.shape)
    data = np.bincount(idx.reshape(-1), weights=v.data.reshape(-1), minlength=size)
    vshape = v.data.shape

    def rule(g):
        return (reshape(take(g, idx), vshape),)

    return _make(data, (v,), rule)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def rule(g):
        return tuple(narrow(g, axis, int(offsets[i]), sizes[i]) for i in range(len(tensors)))

    return _make(data, tuple(tensors), rule)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    ax = axis % a.data.ndim
    sl = [slice(None)] * a.data.ndim
    sl[ax] = slice(start, start + length)
    data = np.ascontiguousarray(a.data[tuple(sl)])
    n = a.data.shape[ax]

    def rule(g):
        parts = []
        if start > 0:
            before = list(a.data.shape)
            before[ax] = start
            parts.append(Tensor(np.zeros(before)))
        parts.append(g)
        if start + length < n:
            after = list(a.data.shape)
            after[ax] = n - start - length
            parts.append(Tensor(np.zeros(after)))
        return (concat(parts, axis=ax) if len(parts) > 1 else g,)

    return _make(data, (a,), rule)


# ---------------------------------------------------------------------------
# composite operations (differentiable through the primitives above)

_IM2COL_CACHE: dict = {}
_RESIZE_CACHE: dict = {}


def _im2col_indices(batch, channels, hp, wp, kh, kw, stride):
    key = (batch, channels, hp, wp, kh, kw, stride)
    cached = _IM2COL_CACHE.get(key)
    if cached is not None:
        return cached
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    r0 = np.repeat(np.arange(oh) * stride, ow)
    c0 = np.tile(np.arange(ow) * stride, oh)
    base = r0[:, None] * wp + c0[:, None]  # (oh*ow, 1)
    koff = (np.repeat(np.arange(kh), kw) * wp + np.tile(np.arange(kw), kh))  # (kh*kw,)
    choff = np.arange(channels) * (hp * wp)
    patch = (choff[:, None] + koff[None, :]).reshape(-1)  # (channels*kh*kw,)
    per_image = base + patch[None, :]  # (oh*ow, C*kh*kw)
    boff = (np.arange(batch) * (channels * hp * wp)).repeat(oh * ow)[:, None]
    idx = (np.tile(per_image, (batch, 1)) + boff).astype(np.int64)
    out = (idx, oh, ow)
    _IM2COL_CACHE[key] = out
    return out


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the last two axes of an NCHW tensor."""
    if pad == 0:
        return _as_tensor(a)
    a = _as_tensor(a)
    b, c, h, w = a.data.shape
    zh = Tensor(np.zeros((b, c, pad, w)))
    x = concat([zh, a, zh], axis=2)
    zw = Tensor(np.zeros((b, c, h + 2 * pad, pad)))
    return concat([zw, x, zw], axis=3)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution over an NCHW tensor (gather + matmul composition)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError("conv2d", "expects x(B,C,H,W), w(O,C,kh,kw)", x.data.shape, weight.data.shape)
    out_ch, in_ch, kh, kw = weight.data.shape
    xp = pad2d(x, padding)
    b, c, hp, wp = xp.data.shape
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", "kernel larger than padded input", xp.data.shape, weight.data.shape)
    idx, oh, ow = _im2col_indices(b, c, hp, wp, kh, kw, stride)
    cols = take(xp, idx)  # (B*oh*ow, C*kh*kw)
    wmat = transpose(reshape(weight, (out_ch, in_ch * kh * kw)), (1, 0))
    out = matmul(cols, wmat)  # (B*oh*ow, O)
    if bias is not None:
        out = add(out, _as_tensor(bias))
    out = reshape(out, (b, oh, ow, out_ch))
    return transpose(out, (0, 3, 1, 2))


def _bilinear_weights(h, w, h2, w2):
    key = (h, w, h2, w2)
    cached = _RESIZE_CACHE.get(key)
    if cached is not None:
        return cached
    ys = (np.arange(h2) + 0.5) * (h / h2) - 0.5
    xs = (np.arange(w2) + 0.5) * (w / w2) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = ys - y0
    wx = xs - x0
    y0c = np.clip(y0, 0, h - 1).astype(np.int64)
    y1c = np.clip(y0 + 1, 0, h - 1).astype(np.int64)
    x0c = np.clip(x0, 0, w - 1).astype(np.int64)
    x1c = np.clip(x0 + 1, 0, w - 1).astype(np.int64)
    grid_wy = np.repeat(wy, w2)
    grid_wx = np.tile(wx, h2)
    corners = []
    for yy, fy in ((y0c, 1.0 - grid_wy), (y1c, grid_wy)):
        rows = np.repeat(yy, w2)
        for xx, fx in ((x0c, 1.0 - grid_wx), (x1c, grid_wx)):
            cols = np.tile(xx, h2)
            corners.append(((rows * w + cols).astype(np.int64), fy * fx))
    _RESIZE_CACHE[key] = corners
    return corners


def bilinear_resize(a, out_hw) -> Tensor:
    """Resize the last two axes with bilinear interpolation."""
    a = _as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError("bilinear_resize", "needs at least 2 dims", a.data.shape)
    h, w = a.data.shape[-2:]
    h2, w2 = out_hw
    lead = a.data.shape[:-2]
    nlead = int(np.prod(lead)) if lead else 1
    flat = reshape(a, (nlead, h * w))
    corners = _bilinear_weights(h, w, h2, w2)
    offs = (np.arange(nlead) * (h * w))[:, None]
    out = None
    for idx, wgt in corners:
        g = take(flat, offs + idx[None, :])
        term = mul(g, Tensor(wgt[None, :]))
        out = term if out is None else add(out, term)
    return reshape(out, tuple(lead) + (h2, w2))


def topk(a, k: int):
    """Top-k values of the flattened tensor, descending.

    Equal values prefer the lower flat index. Returns (values, indices);
    values stay differentiable, indices are a plain int array.
    """
    a = _as_tensor(a)
    if k < 1:
        raise DiffcoreError("topk: k must be >= 1")
    k = min(k, a.data.size)
    order = np.argsort(-a.data.reshape(-1), kind="stable")[:k]
    return take(a, order), order


def sort_desc(a):
    """All values sorted descending; stable toward lower flat index."""
    return topk(a, a.data.size if a.data.size else 1)


# ---------------------------------------------------------------------------
# gradient verification


def finite_difference_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be a deterministic scalar function of one tensor. Relative error
    per coordinate is |analytic - central| / (|central| + 1e-8).
    """
    if eps <= 0:
        raise DiffcoreError("finite_difference_check: eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    with Tape() as tape:
        leaf = Tensor(base.copy(), requires_grad=True)
        y = f(leaf)
        if y.data.size != 1:
            raise ShapeError("finite_difference_check", "f must return a scalar", y.data.shape)
        analytic = tape.grad(y, [leaf])[0].data.reshape(-1)

    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(base)).item()
        flat[i] = orig - eps
        lo = f(Tensor(base)).item()
        flat[i] = orig
        central = (hi - lo) / (2.0 * eps)
        err = abs(analytic[i] - central) / (abs(central) + 1e-8)
        worst = max(worst, err)
    return worst

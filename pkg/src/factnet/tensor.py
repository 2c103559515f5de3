"""Minimal reverse-mode tensor engine on top of numpy arrays.

Every operation records its parents and a closure that pushes the output
gradient back to them.  ``Tensor.backward`` walks the recorded graph in
reverse topological order.  Operations are batched over leading axes so the
scene-graph model can run one numpy call per layer instead of one per object.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NumericError(FloatingPointError):
    """A forward or backward pass produced NaN/Inf."""

    def __init__(self, op: str, stage: str = "forward"):
        super().__init__(f"non-finite values in {stage} of '{op}'")
        self.op = op
        self.stage = stage


_state = {"grad": True, "check_finite": False, "relu_masks": None}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, benchmarks)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def check_finite():
    """Raise :class:`NumericError` as soon as any op emits a non-finite value."""
    prev = _state["check_finite"]
    _state["check_finite"] = True
    try:
        yield
    finally:
        _state["check_finite"] = prev


@contextlib.contextmanager
def record_relu_masks():
    """Collect the activation mask of every relu evaluated inside the block.

    Two forward passes with equal mask lists lie on the same linear piece of
    every relu, which is what finite differencing needs.
    """
    prev = _state["relu_masks"]
    masks: list = []
    _state["relu_masks"] = masks
    try:
        yield masks
    finally:
        _state["relu_masks"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    """Dense n-d array with an optional gradient of the same layout."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    @property
    def dims(self) -> tuple:
        return self.data.shape

    shape = dims

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, op={self.op})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() needs a scalar, got dims {self.dims}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            if _state["check_finite"]:
                for p in node._parents:
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise NumericError(node.op, "backward")
            # interior gradients are not needed once propagated
            if node._parents:
                node.grad = None if node is not self else node.grad

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_lift(other, self), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *dims):
        if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
            dims = tuple(dims[0])
        return reshape(self, dims)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def __getitem__(self, idx):
        return take(self, idx)


class Parameter(Tensor):
    """Trainable tensor with a learning-rate multiplier (0.0 freezes it)."""

    __slots__ = ("lr_mult", "name")

    def __init__(self, data, lr_mult: float = 1.0, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        if lr_mult < 0:
            raise ValueError("lr_mult must be nonnegative")
        self.lr_mult = float(lr_mult)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, dims={self.dims}, lr_mult={self.lr_mult})"


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NumericError(op, "forward")
    out = Tensor(data)
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot combine {a.dims} and {b.dims}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.dims))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.dims))

    return _make(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot combine {a.dims} and {b.dims}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.dims))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.dims))

    return _make(out, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    if _state["relu_masks"] is not None:
        _state["relu_masks"].append(mask)

    def backward(g):
        x._accumulate(g * mask)

    return _make(out, (x,), backward, "relu")


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, dims) -> Tensor:
    try:
        out = x.data.reshape(dims)
    except ValueError as exc:
        raise DimensionError(f"reshape: {x.dims} -> {tuple(dims)}") from exc

    def backward(g):
        x._accumulate(g.reshape(x.dims))

    return _make(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return _make(out, (x,), backward, "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (the channel axis for feature maps)."""
    xs = [_lift(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[x.dims for x in xs]} on axis {axis}") from exc
    bounds = np.cumsum([0] + [x.dims[axis] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                x._accumulate(g[tuple(sl)])

    return _make(out, xs, backward, "concat")


def take(x: Tensor, idx) -> Tensor:
    """Index the leading axis (``x[idx]``); backward scatter-adds."""
    if isinstance(idx, (list, np.ndarray)):
        idx = np.asarray(idx, dtype=np.intp)
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        if isinstance(idx, np.ndarray):
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        x._accumulate(full)

    return _make(out, (x,), backward, "take")


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.dims))

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.dims[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / n)


def avg_pool_spatial(x: Tensor) -> Tensor:
    """Global 2-D average pooling over the two trailing axes."""
    return mean(x, axis=(-2, -1))


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` average pooling over the trailing two axes."""
    *lead, h, w = x.dims
    if h % size or w % size:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {size}")
    out = x.data.reshape(*lead, h // size, size, w // size, size).mean(axis=(-3, -1))

    def backward(g):
        g = np.repeat(np.repeat(g, size, axis=-2), size, axis=-1) / (size * size)
        x._accumulate(g)

    return _make(out, (x,), backward, "avg_pool2d")


# --------------------------------------------------------------- linear maps


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W.T + b`` over the trailing axis; leading axes are batch."""
    if x.dims[-1] != W.dims[1] or (b is not None and b.dims != (W.dims[0],)):
        raise DimensionError(
            f"linear: input {x.dims} vs weight {W.dims}" + (f" / bias {b.dims}" if b is not None else "")
        )
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ W.data)
        if W.requires_grad:
            W._accumulate(g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.dims[-1]))
        if b is not None and b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, backward, "linear")


def _im2col(x: np.ndarray, k: int, padding: int) -> np.ndarray:
    """[B, C, H, W] -> [B, C*k*k, H'*W'] patch matrix."""
    B, C, H, W = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho, Wo = H + 2 * padding - k + 1, W + 2 * padding - k + 1
    s = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x, shape=(B, C, k, k, Ho, Wo), strides=(s[0], s[1], s[2], s[3], s[2], s[3]), writeable=False
    )
    return patches.reshape(B, C * k * k, Ho * Wo)


def _col2im(cols: np.ndarray, shape: tuple, k: int, padding: int) -> np.ndarray:
    B, C, H, W = shape
    Ho, Wo = H + 2 * padding - k + 1, W + 2 * padding - k + 1
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    out = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            out[:, :, dy : dy + Ho, dx : dx + Wo] += cols[:, :, dy, dx]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x: Tensor, K: Tensor, b: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation. ``x`` is [C,H,W] or [B,C,H,W]; ``K`` is [Co,Ci,k,k]."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or K.data.ndim != 4:
        raise DimensionError(f"conv2d: input {x.dims} / kernel {K.dims}")
    B, C, H, W = xd.shape
    Co, Ci, k, k2 = K.dims
    if Ci != C or k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: input {x.dims} incompatible with kernel {K.dims}")
    Ho, Wo = H + 2 * padding - k + 1, W + 2 * padding - k + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: nonpositive output extent {Ho}x{Wo} for input {x.dims}, kernel {K.dims}")
    if b is not None and b.dims != (Co,):
        raise DimensionError(f"conv2d: bias {b.dims} for {Co} output channels")
    Wm = K.data.reshape(Co, -1)
    if k == 1:
        cols = xd.reshape(B, C, H * W)
    else:
        cols = _im2col(xd, k, padding)
    out = np.matmul(Wm, cols)  # [B, Co, Ho*Wo]
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(B, Co, Ho, Wo)
    if squeeze:
        out = out[0]

    def backward(g):
        g = g.reshape(B, Co, Ho * Wo)
        if K.requires_grad:
            K._accumulate(np.einsum("bop,bip->oi", g, cols, optimize=True).reshape(K.dims))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(Wm.T, g)
            gx = gcols.reshape(B, C, H, W) if k == 1 else _col2im(gcols, (B, C, H, W), k, padding)
            x._accumulate(gx[0] if squeeze else gx)

    parents = (x, K) if b is None else (x, K, b)
    return _make(out, parents, backward, "conv2d")


def channel_scale(maps: Tensor, scale: Tensor) -> Tensor:
    """Depthwise 1x1 convolution: ``maps[b,c,:,:] * scale[b,c]``.

    This is a group convolution whose group count equals the channel count.
    """
    if maps.dims[:2] != scale.dims or maps.data.ndim != 4:
        raise DimensionError(f"channel_scale: maps {maps.dims} vs scale {scale.dims}")
    return mul(maps, reshape(scale, scale.dims + (1, 1)))


# ----------------------------------------------------------------- softmaxes


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    if v.dims[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        v._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (v,), backward, "softmax")


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    z = v.data - v.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        v._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (v,), backward, "log_softmax")


def segment_sum(x: Tensor, seg: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``x`` into ``n`` buckets given by ``seg`` (leading axis)."""
    seg = np.asarray(seg, dtype=np.intp)
    out = np.zeros((n,) + x.dims[1:], dtype=x.dtype)
    np.add.at(out, seg, x.data)

    def backward(g):
        x._accumulate(g[seg])

    return _make(out, (x,), backward, "segment_sum")


def segment_softmax(logits: Tensor, seg: np.ndarray, n: int) -> Tensor:
    """Softmax over the rows of ``logits`` that share a segment id.

    Trailing axes are independent: for logits of shape [E, L] every column is
    normalized separately within each segment.
    """
    seg = np.asarray(seg, dtype=np.intp)
    x = logits.data
    mx = np.full((n,) + x.shape[1:], -np.inf, dtype=x.dtype)
    np.maximum.at(mx, seg, x)
    e = np.exp(x - mx[seg])
    den = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    np.add.at(den, seg, e)
    out = e / den[seg]

    def backward(g):
        gp = g * out
        tot = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
        np.add.at(tot, seg, gp)
        logits._accumulate(gp - out * tot[seg])

    return _make(out, (logits,), backward, "segment_softmax")


# -------------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood; ``logits`` is [n] or [B, n]."""
    single = logits.data.ndim == 1
    lab = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    L = reshape(logits, (1, -1)) if single else logits
    n = L.dims[-1]
    if lab.shape[0] != L.dims[0]:
        raise DimensionError(f"cross_entropy: {L.dims[0]} rows vs {lab.shape[0]} labels")
    if np.any(lab < 0) or np.any(lab >= n):
        raise IndexError(f"cross_entropy: label out of range [0, {n})")
    lp = log_softmax(L, axis=-1)
    rows = np.arange(lab.shape[0])
    picked = _make(
        lp.data[rows, lab],
        (lp,),
        lambda g: lp._accumulate(_scatter_rows(g, rows, lab, lp.dims, lp.dtype)),
        "pick",
    )
    return mul(tsum(picked), -1.0 / lab.shape[0])


def _scatter_rows(g, rows, cols, shape, dtype):
    full = np.zeros(shape, dtype=dtype)
    full[rows, cols] = g
    return full


def parameters_of(objs: Iterable) -> list[Parameter]:
    """Collect unique parameters from a nested structure of modules/params."""
    seen: dict[int, Parameter] = {}
    for o in objs:
        for p in (o.parameters() if hasattr(o, "parameters") else [o]):
            seen.setdefault(id(p), p)
    return list(seen.values())

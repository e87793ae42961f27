"""Dense tensors with a single-shot reverse-mode tape.

Arrays are numpy-backed. Operations record a node on the active :class:`Tape`
whenever one of their inputs participates in differentiation; outside a tape
everything runs as plain numpy with no bookkeeping.

Typical use::

    with Tape() as tape:
        loss = (x * x).sum()
    grads = tape.backward(loss)
    grads[x]
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "Gradients", "TensorError", "ShapeError", "NonFiniteError",
    "tensor", "zeros", "ones", "precision", "default_dtype",
    "conv2d", "pointwise_map", "sigmoid", "tanh", "softplus", "relu", "clamp",
    "affine", "exp", "log", "sqrt", "abs_", "softmax_axis", "reduce_mean",
    "reduce_sum", "group_norm", "bilinear_resize", "concat", "stack",
    "finite_diff_gradient", "matmul", "no_grad", "reshape",
]


class TensorError(ValueError):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


_DTYPE = [np.float32]


def default_dtype():
    return _DTYPE[-1]


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    """N-d real array with optional participation in the active tape."""

    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.name = name

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axes, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_shape(msg: str):
    raise ShapeError(msg)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or default_dtype()), requires_grad=requires_grad)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or default_dtype()))


def ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or default_dtype()))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_ACTIVE: list["Tape"] = []


class Gradients(dict):
    """Gradient map keyed by tensor identity; index with the tensor itself."""

    def __getitem__(self, key):
        return dict.__getitem__(self, id(key) if isinstance(key, Tensor) else key)

    def __contains__(self, key):
        return dict.__contains__(self, id(key) if isinstance(key, Tensor) else key)

    def get(self, key, default=None):
        return dict.get(self, id(key) if isinstance(key, Tensor) else key, default)


class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended in execution order, so the node list is already a
    topological order. A tape may be differentiated once.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []
        self.leaves: dict[int, Tensor] = {}
        self._used = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, kind: str, inputs: tuple[Tensor, ...], out: Tensor, backward_fn: Callable) -> None:
        for t in inputs:
            if t.requires_grad and t.node is None:
                self.leaves.setdefault(id(t), t)
        out.requires_grad = True
        out.node = len(self.nodes)
        self.nodes.append((kind, inputs, out, backward_fn))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> Gradients:
        if self._used:
            raise TensorError("tape already consumed; record a new forward pass")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node >= len(self.nodes) or self.nodes[loss.node][2] is not loss:
            raise TensorError("loss was not produced on this tape")
        self._used = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for kind, inputs, out, fn in reversed(self.nodes[: loss.node + 1]):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{kind}: gradient shape {gi.shape} != input shape {t.shape}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        targets = list(wrt) if wrt is not None else list(self.leaves.values())
        out = Gradients()
        for leaf in targets:
            g = grads.get(id(leaf))
            out[id(leaf)] = Tensor(g if g is not None else np.zeros_like(leaf.data))
        self.nodes.clear()
        return out


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on every active tape."""
    saved = _ACTIVE[:]
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE[:] = saved


def _tracking(*inputs) -> Tape | None:
    if not _ACTIVE:
        return None
    for t in inputs:
        if isinstance(t, Tensor) and t.requires_grad:
            return _ACTIVE[-1]
    return None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(f"{name}: non-finite input")


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor(a.data + b.data)
    tape = _tracking(a, b)
    if tape:
        sa, sb = a.shape, b.shape
        tape.record("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
    return out


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor(a.data - b.data)
    tape = _tracking(a, b)
    if tape:
        sa, sb = a.shape, b.shape
        tape.record("sub", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor(a.data * b.data)
    tape = _tracking(a, b)
    if tape:
        ad, bd = a.data, b.data
        tape.record("mul", (a, b), out,
                    lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))
    return out


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor(a.data / b.data)
    tape = _tracking(a, b)
    if tape:
        ad, bd = a.data, b.data
        tape.record("div", (a, b), out,
                    lambda g: (_unbroadcast(g / bd, ad.shape),
                               _unbroadcast(-g * ad / (bd * bd), bd.shape)))
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    out = Tensor(a.data ** exponent)
    tape = _tracking(a)
    if tape:
        ad = a.data
        tape.record("pow", (a,), out, lambda g: (g * exponent * ad ** (exponent - 1),))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    tape = _tracking(a)
    if tape:
        od = out.data
        tape.record("exp", (a,), out, lambda g: (g * od,))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    tape = _tracking(a)
    if tape:
        ad = a.data
        tape.record("log", (a,), out, lambda g: (g / ad,))
    return out


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    tape = _tracking(a)
    if tape:
        od = out.data
        tape.record("sqrt", (a,), out, lambda g: (g * 0.5 / od,))
    return out


def abs_(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    tape = _tracking(a)
    if tape:
        sign = np.sign(a.data)
        tape.record("abs", (a,), out, lambda g: (g * sign,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = Tensor(a.data @ b.data)
    tape = _tracking(a, b)
    if tape:
        ad, bd = a.data, b.data
        tape.record("matmul", (a, b), out, lambda g: (g @ bd.T, ad.T @ g))
    return out


# ---------------------------------------------------------------------------
# Pointwise activations
# ---------------------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def pointwise_map(x: Tensor, fn: str, *, lo: float | None = None, hi: float | None = None,
                  scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """Apply one of ``sigmoid``, ``tanh``, ``softplus``, ``relu``, ``clamp``
    or ``affine`` (``scale * x + shift``) elementwise.

    The clamp gradient is 1 strictly inside ``(lo, hi)`` and 0 elsewhere.
    """
    _check_finite(fn, x.data)
    xd = x.data
    if fn == "sigmoid":
        y = _sigmoid_np(xd)
        deriv = lambda: y * (1.0 - y)
    elif fn == "tanh":
        y = np.tanh(xd)
        deriv = lambda: 1.0 - y * y
    elif fn == "softplus":
        y = _softplus_np(xd)
        deriv = lambda: _sigmoid_np(xd)
    elif fn == "relu":
        y = np.maximum(xd, 0.0)
        deriv = lambda: (xd > 0).astype(xd.dtype)
    elif fn == "clamp":
        lo = -np.inf if lo is None else lo
        hi = np.inf if hi is None else hi
        if not lo < hi:
            raise TensorError(f"clamp needs lo < hi, got ({lo}, {hi})")
        y = np.clip(xd, lo, hi)
        deriv = lambda: ((xd > lo) & (xd < hi)).astype(xd.dtype)
    elif fn == "affine":
        y = xd * scale + shift
        deriv = None
    else:
        raise TensorError(f"unknown pointwise function {fn!r}")
    out = Tensor(np.asarray(y, dtype=xd.dtype))
    tape = _tracking(x)
    if tape:
        if deriv is None:
            tape.record(fn, (x,), out, lambda g: (g * scale,))
        else:
            tape.record(fn, (x,), out, lambda g: (g * deriv(),))
    return out


def sigmoid(x: Tensor) -> Tensor:
    return pointwise_map(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return pointwise_map(x, "tanh")


def softplus(x: Tensor) -> Tensor:
    return pointwise_map(x, "softplus")


def relu(x: Tensor) -> Tensor:
    return pointwise_map(x, "relu")


def clamp(x: Tensor, lo: float | None, hi: float | None) -> Tensor:
    return pointwise_map(x, "clamp", lo=lo, hi=hi)


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    return pointwise_map(x, "affine", scale=scale, shift=shift)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    tape = _tracking(a)
    if tape:
        s = a.shape
        tape.record("reshape", (a,), out, lambda g: (g.reshape(s),))
    return out


def getitem(a: Tensor, index) -> Tensor:
    out = Tensor(a.data[index])
    tape = _tracking(a)
    if tape:
        def back(g):
            full = np.zeros_like(a.data)
            if _is_advanced(index):
                np.add.at(full, index, g)
            else:
                full[index] = g
            return (full,)
        tape.record("getitem", (a,), out, back)
    return out


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis))
    tape = _tracking(*tensors)
    if tape:
        bounds = np.cumsum([0] + [d.shape[axis] for d in datas])

        def back(g):
            return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                         for i in range(len(datas)))
        tape.record("concat", tuple(tensors), out, back)
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))
    tape = _tracking(*tensors)
    if tape:
        n = len(tensors)
        tape.record("stack", tuple(tensors), out,
                    lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))
    return out


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = tuple(ax % ndim if -ndim <= ax < ndim else _raise_shape(f"axis {ax} out of range")
                 for ax in axes)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return norm


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, a.ndim)
    out = Tensor(np.asarray(a.data.sum(axis=ax, keepdims=keepdims)))
    tape = _tracking(a)
    if tape:
        shape = a.shape

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, shape).copy(),)
        tape.record("sum", (a,), out, back)
    return out


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over ``axes`` (all axes when ``None``)."""
    ax = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    if count == 0:
        raise ShapeError(f"empty reduction over axes {ax} of shape {a.shape}")
    out = Tensor(np.asarray(a.data.mean(axis=ax, keepdims=keepdims)))
    tape = _tracking(a)
    if tape:
        shape = a.shape

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g / count, shape).copy(),)
        tape.record("mean", (a,), out, back)
    return out


# ---------------------------------------------------------------------------
# Softmax
# ---------------------------------------------------------------------------

def softmax_axis(x: Tensor, axis: int, temperature=None) -> Tensor:
    """Softmax along ``axis``, optionally with a per-element temperature.

    ``temperature`` broadcasts against ``x`` and is treated as a constant.
    """
    xd = x.data
    if temperature is not None:
        temp = temperature.data if isinstance(temperature, Tensor) else np.asarray(temperature)
        temp = temp.astype(xd.dtype, copy=False)
        if not (temp > 0).all():
            raise TensorError("softmax temperature must be strictly positive")
        z = xd / temp
    else:
        temp = None
        z = xd
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    tape = _tracking(x)
    if tape:
        def back(g):
            gz = y * (g - (g * y).sum(axis=axis, keepdims=True))
            if temp is not None:
                gz = gz / temp
            return (gz,)
        tape.record("softmax", (x,), out, back)
    return out


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation, NCHW layout, square odd kernels."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cg, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if C % groups or O % groups or Cg != C // groups:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {weight.shape}, groups {groups}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({O},)")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")
    _check_finite("conv2d", x.data, weight.data)

    xd, wd = x.data, weight.data
    if groups == 1:
        out_d, back_core = _conv_dense(xd, wd, stride, padding, Ho, Wo)
    elif Cg == 1 and O == C:
        out_d, back_core = _conv_depthwise(xd, wd, stride, padding, Ho, Wo)
    else:
        out_d, back_core = _conv_grouped(xd, wd, stride, padding, groups, Ho, Wo)
    if bias is not None:
        out_d += bias.data[None, :, None, None]
    out = Tensor(out_d)

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    tape = _tracking(*inputs)
    if tape:
        def back(g):
            gx, gw = back_core(g)
            if bias is not None:
                return gx, gw, g.sum(axis=(0, 2, 3))
            return gx, gw
        tape.record("conv2d", inputs, out, back)
    return out


def _conv_dense(xd, wd, stride, padding, Ho, Wo):
    B, C, H, W = xd.shape
    O, _, k, _ = wd.shape
    if k == 1 and stride == 1 and padding == 0:
        w2 = wd[:, :, 0, 0]
        out = np.matmul(w2, xd.reshape(B, C, H * W)).reshape(B, O, H, W)

        def back(g):
            g2 = g.reshape(B, O, H * W)
            gx = np.matmul(w2.T, g2).reshape(B, C, H, W)
            gw = np.tensordot(g2, xd.reshape(B, C, H * W), axes=([0, 2], [0, 2]))
            return gx, gw.reshape(O, C, 1, 1)
        return out, back

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # im2col: (B, Ho, Wo, C, k, k) contiguous
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
    w2 = wd.reshape(O, C * k * k)
    out = (cols @ w2.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2).copy()

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(wd.shape)
        gcols = (g2 @ w2).reshape(B, Ho, Wo, C, k, k)
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return np.ascontiguousarray(gx), gw
    return out, back


def _conv_depthwise(xd, wd, stride, padding, Ho, Wo):
    B, C, H, W = xd.shape
    k = wd.shape[2]
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    out = np.zeros((B, C, Ho, Wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] * wd[None, :, 0, i, j, None, None]

    def back(g):
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        gw = np.zeros_like(wd)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))
                gxp[sl] += g * wd[None, :, 0, i, j, None, None]
                gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return np.ascontiguousarray(gx), gw
    return out, back


def _conv_grouped(xd, wd, stride, padding, groups, Ho, Wo):
    C = xd.shape[1]
    O = wd.shape[0]
    ci, co = C // groups, O // groups
    parts = [_conv_dense(xd[:, g * ci:(g + 1) * ci], wd[g * co:(g + 1) * co], stride, padding, Ho, Wo)
             for g in range(groups)]
    out = np.concatenate([p[0] for p in parts], axis=1)

    def back(g):
        res = [p[1](g[:, i * co:(i + 1) * co]) for i, p in enumerate(parts)]
        return np.concatenate([r[0] for r in res], axis=1), np.concatenate([r[1] for r in res], axis=0)
    return out, back


# ---------------------------------------------------------------------------
# Normalisation and resampling
# ---------------------------------------------------------------------------

def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects NCHW input, got {x.shape}")
    B, C, H, W = x.shape
    if C % num_groups:
        raise ShapeError(f"group_norm: {C} channels not divisible by {num_groups} groups")
    if eps <= 0:
        raise TensorError("group_norm eps must be positive")
    xg = x.data.reshape(B, num_groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    xc = xg - mean
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(B, C, H, W)
    gd, bd = gamma.data[None, :, None, None], beta.data[None, :, None, None]
    out = Tensor(xhat * gd + bd)
    tape = _tracking(x, gamma, beta)
    if tape:
        n = xg.shape[2]

        def back(g):
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            dxhat = (g * gd).reshape(B, num_groups, -1)
            xh = xhat.reshape(B, num_groups, -1)
            gx = inv / n * (n * dxhat - dxhat.sum(axis=2, keepdims=True)
                            - xh * (dxhat * xh).sum(axis=2, keepdims=True))
            return gx.reshape(B, C, H, W), ggamma, gbeta
        tape.record("group_norm", (x, gamma, beta), out, back)
    return out


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds the interpolation weights for output index i (half-pixel centres)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target must be positive, got {out_h}x{out_w}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW input, got {x.shape}")
    _, _, H, W = x.shape
    if (H, W) == (out_h, out_w):
        rh = rw = None
        out = Tensor(x.data.copy())
    else:
        rh = _resize_matrix(H, out_h, x.dtype)
        rw = _resize_matrix(W, out_w, x.dtype)
        out = Tensor(np.matmul(np.matmul(rh, x.data), rw.T))
    tape = _tracking(x)
    if tape:
        if rh is None:
            tape.record("resize", (x,), out, lambda g: (g,))
        else:
            tape.record("resize", (x,), out, lambda g: (np.matmul(np.matmul(rh.T, g), rw),))
    return out


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, evaluated in float64."""
    if eps <= 0:
        raise TensorError("eps must be positive")
    base = x.data.astype(np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with precision(np.float64):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(Tensor(base.copy())))
            flat[i] = orig - eps
            fm = _scalar(f(Tensor(base.copy())))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad)


def _scalar(t) -> float:
    v = float(t.data.reshape(-1)[0]) if isinstance(t, Tensor) else float(t)
    if not np.isfinite(v):
        raise NonFiniteError("function returned a non-finite value")
    return v

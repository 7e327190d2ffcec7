"""Dense float32 tensors with reverse-mode differentiation.

The heavy lifting (storage, broadcasting, matmul) is delegated to numpy;
this module owns the computation graph, the operator set used by the
denoiser and the losses, and exact backward rules for each operator.
Arithmetic is float32 throughout, including conv/linear accumulation;
that convention is the 32-bit baseline used by the memory accounting.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _np_erf

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "UnknownOpError",
    "GraphError",
    "forward_op",
    "backward",
    "sample_normal",
    "no_grad",
    "zero_grads",
    "OP_KINDS",
]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are invalid for an op; names both."""

    def __init__(self, op: str, message: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        detail = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: {message} (shapes: {detail})" if shapes else f"{op}: {message}")


class UnknownOpError(ValueError):
    """Raised for an op kind outside the supported set."""


class GraphError(RuntimeError):
    """Raised for invalid graph usage (non-scalar loss, detached backward)."""


class _GradState(threading.local):
    def __init__(self):
        self.enabled = True


_grad_state = _GradState()


class no_grad:
    """Context manager disabling graph recording on the current thread."""

    def __enter__(self):
        self._prev = _grad_state.enabled
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    return arr


class Tensor:
    """N-dimensional float32 array plus an optional graph node.

    A tensor created with ``requires_grad=True`` is a leaf parameter;
    tensors produced by ops record their parents and a backward rule.
    Detached tensors (``detach()``) never receive gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def param(data) -> "Tensor":
        return Tensor(data, requires_grad=True)

    @staticmethod
    def zeros(shape) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float32))

    @staticmethod
    def ones(shape) -> "Tensor":
        return Tensor(np.ones(shape, dtype=np.float32))

    # -- basic properties ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of {self.data.size} elements")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy_(self, values: np.ndarray) -> None:
        """In-place overwrite of the raw data (parameters during training)."""
        values = _as_f32(values)
        if values.shape != self.data.shape:
            raise ShapeMismatchError("copy_", "value shape differs", self.data.shape, values.shape)
        self.data = values

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, grad={'set' if self.grad is not None else 'none'})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __pow__(self, p):
        return power(self, float(p))

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_state.enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = False
        out._parents = parents
        out._backward = bwd
        out._op = op
    else:
        out._op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._backward is not None):
        return
    if t.grad is None:
        t.grad = g.astype(np.float32, copy=True)
    else:
        t.grad = t.grad + g.astype(np.float32, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along axes numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatchError("add", "operands are not broadcastable", a.shape, b.shape)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatchError("mul", "operands are not broadcastable", a.shape, b.shape)

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeMismatchError("div", "operands are not broadcastable", a.shape, b.shape)

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bwd, "div")


def square(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = x.data * x.data

    def bwd(g):
        _accumulate(x, g * (2.0 * x.data))

    return _make(out, (x,), bwd, "square")


def sqrt(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.sqrt(x.data)

    def bwd(g):
        _accumulate(x, g * (0.5 / np.sqrt(x.data)))

    return _make(out, (x,), bwd, "sqrt")


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.data)

    def bwd(g):
        _accumulate(x, g * out)

    return _make(out, (x,), bwd, "exp")


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.log(x.data)

    def bwd(g):
        _accumulate(x, g / x.data)

    return _make(out, (x,), bwd, "log")


def power(x: Tensor, p: float) -> Tensor:
    x = _wrap(x)
    out = np.power(x.data, np.float32(p))

    def bwd(g):
        _accumulate(x, g * p * np.power(x.data, np.float32(p - 1.0)))

    return _make(out, (x,), bwd, "power")


def abs_(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.abs(x.data)

    def bwd(g):
        _accumulate(x, g * np.sign(x.data))

    return _make(out, (x,), bwd, "abs")


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    z = x.data
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z))).astype(np.float32)

    def bwd(g):
        _accumulate(x, g * out * (1.0 - out))

    return _make(out, (x,), bwd, "sigmoid")


def silu(x: Tensor) -> Tensor:
    x = _wrap(x)
    z = x.data
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z))).astype(np.float32)
    out = z * s

    def bwd(g):
        _accumulate(x, g * (s * (1.0 + z * (1.0 - s))))

    return _make(out, (x,), bwd, "silu")


def erf(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = _np_erf(x.data).astype(np.float32)
    coeff = np.float32(2.0 / np.sqrt(np.pi))

    def bwd(g):
        _accumulate(x, g * coeff * np.exp(-x.data * x.data))

    return _make(out, (x,), bwd, "erf")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = _wrap(x)
    out = np.clip(x.data, lo, hi)

    def bwd(g):
        mask = ((x.data >= lo) & (x.data <= hi)).astype(np.float32)
        _accumulate(x, g * mask)

    return _make(out, (x,), bwd, "clip")


def round_ste(x: Tensor) -> Tensor:
    """Round half away from zero; gradient passes through unchanged."""
    x = _wrap(x)
    out = np.copysign(np.floor(np.abs(x.data) + 0.5), x.data).astype(np.float32)

    def bwd(g):
        _accumulate(x, g)

    return _make(out, (x,), bwd, "round_ste")


def floor_ste(x: Tensor) -> Tensor:
    """Floor with a straight-through gradient (quantizer internals)."""
    x = _wrap(x)
    out = np.floor(x.data).astype(np.float32)

    def bwd(g):
        _accumulate(x, g)

    return _make(out, (x,), bwd, "floor_ste")


# ---------------------------------------------------------------------------
# reductions / shape ops
# ---------------------------------------------------------------------------


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    ax = _normalize_axis(axis, x.ndim)
    out = x.data.sum(axis=ax, keepdims=keepdims, dtype=np.float32)

    def bwd(g):
        gg = np.asarray(g, dtype=np.float32)
        if ax is not None and not keepdims:
            gg = np.expand_dims(gg, ax)
        _accumulate(x, np.broadcast_to(gg, x.data.shape))

    return _make(out, (x,), bwd, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    ax = _normalize_axis(axis, x.ndim)
    out = x.data.mean(axis=ax, keepdims=keepdims, dtype=np.float32)
    if ax is None:
        count = x.data.size
    else:
        count = int(np.prod([x.data.shape[a] for a in ax]))

    def bwd(g):
        gg = np.asarray(g, dtype=np.float32) / np.float32(count)
        if ax is not None and not keepdims:
            gg = np.expand_dims(gg, ax)
        _accumulate(x, np.broadcast_to(gg, x.data.shape))

    return _make(out, (x,), bwd, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    x = _wrap(x)
    shape = tuple(int(d) for d in shape)
    out = x.data.reshape(shape)

    def bwd(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(out, (x,), bwd, "reshape")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    x = _wrap(x)
    axis = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = x.data[sl].copy()

    def bwd(g):
        full = np.zeros(x.data.shape, dtype=np.float32)
        full[sl] = g
        _accumulate(x, full)

    return _make(out, (x,), bwd, "narrow")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis -3); first input's channels lead."""
    inputs = [_wrap(t) for t in inputs]
    if len(inputs) < 2:
        raise ShapeMismatchError("concat_channels", "needs at least two inputs")
    nd = inputs[0].ndim
    if nd < 3:
        raise ShapeMismatchError("concat_channels", "inputs must be at least 3-d", inputs[0].shape)
    axis = nd - 3
    for t in inputs[1:]:
        if t.ndim != nd:
            raise ShapeMismatchError("concat_channels", "rank mismatch", inputs[0].shape, t.shape)
        ref = list(inputs[0].shape)
        other = list(t.shape)
        ref[axis] = other[axis] = -1
        if ref != other:
            raise ShapeMismatchError("concat_channels", "non-channel dims differ", inputs[0].shape, t.shape)
    out = np.concatenate([t.data for t in inputs], axis=axis)
    sizes = [t.shape[axis] for t in inputs]

    def bwd(g):
        offset = 0
        for t, c in zip(inputs, sizes):
            sl = [slice(None)] * nd
            sl[axis] = slice(offset, offset + c)
            _accumulate(t, g[tuple(sl)])
            offset += c

    return _make(out, tuple(inputs), bwd, "concat_channels")


# ---------------------------------------------------------------------------
# neural-net ops
# ---------------------------------------------------------------------------


def _conv_cols(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    """im2col: (N,C,H,W) -> contiguous (N, Ho*Wo, C*kh*kw)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), (ho, wo)


def _conv_raw(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    cols, (ho, wo) = _conv_cols(x, w.shape[2], w.shape[3], pad)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.transpose(0, 2, 1).reshape(x.shape[0], w.shape[0], ho, wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int | None = None) -> Tensor:
    """2-d correlation, stride 1. Default padding preserves spatial size.

    ``x``: (C,H,W) or (N,C,H,W); ``w``: (Cout,Cin,K,K); optional ``b``: (Cout,).
    """
    x, w = _wrap(x), _wrap(w)
    single = x.ndim == 3
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise ShapeMismatchError("conv2d", "expected x (N,C,H,W) or (C,H,W) and w (Cout,Cin,K,K)", x.shape, w.shape)
    xd = x.data[None] if single else x.data
    cout, cin, kh, kw = w.shape
    if xd.shape[1] != cin:
        raise ShapeMismatchError("conv2d", "input channels do not match kernel", x.shape, w.shape)
    if kh != kw:
        raise ShapeMismatchError("conv2d", "kernel must be square", w.shape)
    if padding is None:
        if kh % 2 == 0:
            raise ShapeMismatchError("conv2d", "same-padding needs an odd kernel", w.shape)
        pad = (kh - 1) // 2
    else:
        pad = int(padding)
    if xd.shape[2] + 2 * pad < kh or xd.shape[3] + 2 * pad < kw:
        raise ShapeMismatchError("conv2d", "spatial dims smaller than kernel", x.shape, w.shape)
    if b is not None:
        b = _wrap(b)
        if b.shape != (cout,):
            raise ShapeMismatchError("conv2d", "bias must be (Cout,)", b.shape, w.shape)

    out = _conv_raw(xd, w.data, pad)
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gd = g[None] if single else g
        n, _, ho, wo = gd.shape
        g2 = gd.transpose(0, 2, 3, 1).reshape(n, ho * wo, cout)
        cols, _ = _conv_cols(xd, kh, kw, pad)
        gw = np.einsum("nxk,nxo->ok", cols, g2, optimize=True).reshape(w.data.shape)
        _accumulate(w, gw)
        wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _conv_raw(gd, wf, kh - 1 - pad)
        _accumulate(x, gx[0] if single else gx)
        if b is not None:
            _accumulate(b, gd.sum(axis=(0, 2, 3)))

    out = out[0] if single else out
    return _make(out, parents, bwd, "conv2d")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map: x (..., In) @ w (In, Out) + b (Out,)."""
    x, w = _wrap(x), _wrap(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeMismatchError("linear", "inner dims do not match", x.shape, w.shape)
    if b is not None:
        b = _wrap(b)
        if b.shape != (w.shape[1],):
            raise ShapeMismatchError("linear", "bias must be (Out,)", b.shape, w.shape)
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        x2 = x.data.reshape(-1, w.shape[0])
        g2 = g.reshape(-1, w.shape[1])
        _accumulate(w, x2.T @ g2)
        _accumulate(x, (g2 @ w.data.T).reshape(x.data.shape))
        if b is not None:
            _accumulate(b, g2.sum(axis=0))

    return _make(out, parents, bwd, "linear")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization over (C/groups, H, W) slices with per-channel affine."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeMismatchError("group_norm", "expected (N,C,H,W) or (C,H,W)", x.shape)
    n, c, h, w_ = xd.shape
    if c % groups != 0:
        raise ShapeMismatchError("group_norm", f"channels not divisible by {groups} groups", x.shape)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError("group_norm", "affine params must be (C,)", gamma.shape, beta.shape)

    xg = xd.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = ((xg - mu) * inv).reshape(n, c, h, w_)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bwd(g):
        gd = g[None] if single else g
        _accumulate(beta, gd.sum(axis=(0, 2, 3)))
        _accumulate(gamma, (gd * xhat).sum(axis=(0, 2, 3)))
        dxhat = (gd * gamma.data[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = (dxhat * xh).mean(axis=2, keepdims=True)
        dx = (inv * (dxhat - m1 - xh * m2)).reshape(n, c, h, w_)
        _accumulate(x, dx[0] if single else dx)

    out = out[0] if single else out
    return _make(out, (x, gamma, beta), bwd, "group_norm")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2; spatial dims must be even."""
    x = _wrap(x)
    if x.ndim < 3:
        raise ShapeMismatchError("avg_pool2", "expected at least (C,H,W)", x.shape)
    h, w_ = x.shape[-2], x.shape[-1]
    if h % 2 or w_ % 2:
        raise ShapeMismatchError("avg_pool2", "spatial dims must be even", x.shape)
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, h // 2, 2, w_ // 2, 2).mean(axis=(-3, -1), dtype=np.float32)

    def bwd(g):
        gg = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * np.float32(0.25)
        _accumulate(x, gg)

    return _make(out, (x,), bwd, "avg_pool2")


def nearest_upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    x = _wrap(x)
    if x.ndim < 3:
        raise ShapeMismatchError("nearest_upsample2", "expected at least (C,H,W)", x.shape)
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def bwd(g):
        lead = x.shape[:-2]
        h, w_ = x.shape[-2], x.shape[-1]
        gg = g.reshape(*lead, h, 2, w_, 2).sum(axis=(-3, -1), dtype=np.float32)
        _accumulate(x, gg)

    return _make(out, (x,), bwd, "nearest_upsample2")


# ---------------------------------------------------------------------------
# dispatcher + backward
# ---------------------------------------------------------------------------

OP_KINDS = (
    "conv2d",
    "linear",
    "group_norm",
    "silu",
    "add",
    "mul",
    "concat_channels",
    "avg_pool2",
    "nearest_upsample2",
    "sum",
    "mean",
    "square",
    "sqrt",
    "exp",
    "log",
    "clip",
    "round_ste",
)


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Uniform entry point over the supported op set.

    ``inputs`` is a positional list; ``attrs`` carries per-kind options
    (conv2d: padding; group_norm: groups, eps; sum/mean: axis, keepdims;
    clip: lo, hi).
    """
    attrs = dict(attrs or {})
    inputs = [_wrap(t) for t in inputs]

    def one():
        if len(inputs) != 1:
            raise ShapeMismatchError(kind, f"expected 1 input, got {len(inputs)}")
        return inputs[0]

    if kind == "conv2d":
        if len(inputs) not in (2, 3):
            raise ShapeMismatchError("conv2d", f"expected (x, w[, b]), got {len(inputs)} inputs")
        return conv2d(*inputs, padding=attrs.get("padding"))
    if kind == "linear":
        if len(inputs) not in (2, 3):
            raise ShapeMismatchError("linear", f"expected (x, w[, b]), got {len(inputs)} inputs")
        return linear(*inputs)
    if kind == "group_norm":
        if len(inputs) != 3:
            raise ShapeMismatchError("group_norm", f"expected (x, gamma, beta), got {len(inputs)} inputs")
        return group_norm(*inputs, groups=int(attrs.get("groups", 8)), eps=float(attrs.get("eps", 1e-5)))
    if kind == "silu":
        return silu(one())
    if kind == "add":
        if len(inputs) != 2:
            raise ShapeMismatchError("add", f"expected 2 inputs, got {len(inputs)}")
        return add(*inputs)
    if kind == "mul":
        if len(inputs) != 2:
            raise ShapeMismatchError("mul", f"expected 2 inputs, got {len(inputs)}")
        return mul(*inputs)
    if kind == "concat_channels":
        return concat_channels(inputs)
    if kind == "avg_pool2":
        return avg_pool2(one())
    if kind == "nearest_upsample2":
        return nearest_upsample2(one())
    if kind == "sum":
        return sum_(one(), axis=attrs.get("axis"), keepdims=bool(attrs.get("keepdims", False)))
    if kind == "mean":
        return mean(one(), axis=attrs.get("axis"), keepdims=bool(attrs.get("keepdims", False)))
    if kind == "square":
        return square(one())
    if kind == "sqrt":
        return sqrt(one())
    if kind == "exp":
        return exp(one())
    if kind == "log":
        return log(one())
    if kind == "clip":
        return clip(one(), float(attrs["lo"]), float(attrs["hi"]))
    if kind == "round_ste":
        return round_ste(one())
    raise UnknownOpError(f"unknown op kind {kind!r}; supported: {', '.join(OP_KINDS)}")


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into ``.grad`` of every reachable tensor that
    requires grad; parameters passed in ``params`` that the loss does not
    reach get an explicit zero gradient.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor loss")
    if loss.numel != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if loss._backward is None and not loss.requires_grad:
        raise GraphError("loss is not connected to a recorded graph")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones(loss.data.shape, dtype=np.float32)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros(p.data.shape, dtype=np.float32)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sample_normal(stream, shape) -> Tensor:
    """Standard-normal tensor from a named stream; advances its counter
    by the number of elements drawn."""
    return Tensor(stream.normal(shape))

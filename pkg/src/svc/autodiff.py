"""Minimal reverse-mode differentiation over numpy arrays.

Tensors are (channels, time) arrays or flat vectors. Every op records a
backward closure on its output; :func:`backward` walks the graph in reverse
topological order and accumulates into ``.grad`` of leaves that asked for it.

Storage precision is a global switch (:func:`set_precision`): float32 for
normal use, float64 for gradient checks and bit-exact determinism tests.
"""

from __future__ import annotations

import contextlib
from functools import lru_cache

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG = False

MAG_EPS = 1e-8
LEAKINESS = 0.2


class AutodiffError(ValueError):
    pass


def set_precision(name: str) -> None:
    global _DTYPE
    if name not in ("f32", "f64"):
        raise AutodiffError(f"unknown precision {name!r}")
    _DTYPE = np.float32 if name == "f32" else np.float64


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(name: str):
    prev = "f32" if _DTYPE is np.float32 else "f64"
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    """In debug mode every op checks its output for NaN/inf."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    # operator sugar; the named functions below are the actual ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """Trainable leaf tensor with a hierarchical name."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracking(*parents: Tensor) -> bool:
    return _GRAD_ENABLED and any(p.requires_grad for p in parents)


def make_op(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Wrap an op result; ``backward_fn(g)`` returns one grad (or None) per parent."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = ""
    out.grad = None
    if _DEBUG and not np.all(np.isfinite(data)):
        raise AutodiffError("non-finite value produced")
    if _tracking(*parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise AutodiffError("backward() needs a scalar loss")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------- elementwise

def unary(kind: str, x: Tensor) -> Tensor:
    if kind == "tanh":
        y = np.tanh(x.data)
        return make_op(y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        return make_op(y, (x,), lambda g: (g * y * (1.0 - y),))
    if kind == "leaky_relu":
        pos = x.data > 0
        y = np.where(pos, x.data, LEAKINESS * x.data)
        return make_op(y, (x,), lambda g: (np.where(pos, g, LEAKINESS * g),))
    raise AutodiffError(f"unknown unary kind {kind!r}")


def tanh(x):
    return unary("tanh", x)


def sigmoid(x):
    return unary("sigmoid", x)


def leaky_relu(x):
    return unary("leaky_relu", x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # only scalar broadcasting is supported
    if g.shape == shape:
        return g
    return np.reshape(np.sum(g), shape)


def binary(kind: str, a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if kind == "concat_channels":
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
            raise AutodiffError(f"concat needs equal time length, got {a.shape} and {b.shape}")
        ca = a.shape[0]
        y = np.concatenate([a.data, b.data], axis=0)
        return make_op(y, (a, b), lambda g: (g[:ca], g[ca:]))
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise AutodiffError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")
    if kind == "add":
        y = a.data + b.data
        return make_op(y, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    if kind == "mul":
        y = a.data * b.data
        return make_op(y, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                             _unbroadcast(g * a.data, b.shape)))
    raise AutodiffError(f"unknown binary kind {kind!r}")


def add(a, b):
    return binary("add", a, b)


def mul(a, b):
    return binary("mul", a, b)


def concat_channels(*xs: Tensor) -> Tensor:
    out = xs[0]
    for x in xs[1:]:
        out = binary("concat_channels", out, x)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    return make_op(x.data * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    return make_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return make_op(np.abs(x.data), (x,), lambda g: (g * s,))


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    d = x.data + eps
    return make_op(np.log(d), (x,), lambda g: (g / d,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return make_op(y, (x,), lambda g: (g / (2.0 * y),))


def divide(a: Tensor, b: Tensor) -> Tensor:
    """a / b where b is a scalar tensor."""
    if b.data.size != 1:
        raise AutodiffError("divide only supports a scalar denominator")
    bv = b.data.reshape(())
    y = a.data / bv
    return make_op(y, (a, b), lambda g: (g / bv, np.reshape(-np.sum(g * a.data) / (bv * bv), b.shape)))


def sum_(x: Tensor) -> Tensor:
    return make_op(np.reshape(np.sum(x.data), (1,)), (x,),
                   lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return make_op(np.reshape(np.sum(x.data) / n, (1,)), (x,),
                   lambda g: (np.full(x.shape, g.reshape(()) / n, dtype=x.data.dtype),))


# ---------------------------------------------------------------- structural

def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[0]

    def bw(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    if not (0 <= start < stop <= c):
        raise AutodiffError(f"bad channel slice [{start}, {stop}) of {c}")
    return make_op(x.data[start:stop].copy(), (x,), bw)


def slice_time(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return make_op(x.data[..., start:stop].copy(), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def matmul_const(x: Tensor, m: np.ndarray) -> Tensor:
    """x @ m with a constant right operand."""
    return make_op(x.data @ m, (x,), lambda g: (g @ m.T,))


def nn_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise AutodiffError("upsample factor must be >= 1")
    if factor == 1:
        return make_op(x.data.copy(), (x,), lambda g: (g,))
    y = np.repeat(x.data, factor, axis=-1)

    def bw(g):
        return (g.reshape(g.shape[:-1] + (-1, factor)).sum(axis=-1),)

    return make_op(y, (x,), bw)


# ---------------------------------------------------------------- convolution

def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Centered ("same") dilated convolution, zero padded, odd kernel."""
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise AutodiffError(f"conv1d expects x[C,T] and w[O,C,k], got {x.shape}, {w.shape}")
    c_out, c_in, k = w.shape
    if x.shape[0] != c_in:
        raise AutodiffError(f"conv1d channel mismatch: input {x.shape[0]}, weight {c_in}")
    if k % 2 == 0 or dilation < 1:
        raise AutodiffError("conv1d needs an odd kernel and dilation >= 1")
    t = x.shape[1]
    pad = dilation * (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad))) if pad else x.data
    # im2col: rows ordered (tap, channel) to match w.transpose(0, 2, 1)
    cols = np.concatenate([xp[:, j * dilation:j * dilation + t] for j in range(k)], axis=0) if k > 1 else xp
    wmat = w.data.transpose(0, 2, 1).reshape(c_out, k * c_in)
    y = wmat @ cols
    if bias is not None:
        y += bias.data[:, None]

    def bw(g):
        gw = (g @ cols.T).reshape(c_out, k, c_in).transpose(0, 2, 1)
        gcols = wmat.T @ g
        if k == 1:
            gx = gcols
        else:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j * dilation:j * dilation + t] += gcols[j * c_in:(j + 1) * c_in]
            gx = gxp[:, pad:pad + t]
        gb = g.sum(axis=1) if bias is not None else None
        return gx, gw, gb

    if bias is None:
        return make_op(y, (x, w), lambda g: bw(g)[:2])
    return make_op(y, (x, w, bias), bw)


def weight_norm_effective(v: Tensor, g: Tensor) -> Tensor:
    """g * v / ||v|| per output channel (norm over all other axes)."""
    axes = tuple(range(1, v.data.ndim))
    norm = np.sqrt(np.sum(v.data * v.data, axis=axes, keepdims=True))
    if np.any(norm == 0):
        raise AutodiffError("weight norm of zero direction vector")
    gs = g.data.reshape((-1,) + (1,) * len(axes))
    u = v.data / norm
    y = gs * u

    def bw(grad):
        gg = np.sum(grad * u, axis=axes).reshape(g.shape)
        gv = (gs / norm) * (grad - u * np.sum(grad * u, axis=axes, keepdims=True))
        return gv, gg

    return make_op(y, (v, g), bw)


# ---------------------------------------------------------------- spectral

def reflect_index(n: int, pad: int) -> np.ndarray:
    """Indices of a reflect-padded length-n signal (numpy 'reflect' mode)."""
    if pad >= n:
        raise AutodiffError(f"reflect padding of {pad} needs more than {pad} samples, got {n}")
    idx = np.arange(-pad, n + pad)
    idx = np.where(idx < 0, -idx, idx)
    idx = np.where(idx >= n, 2 * (n - 1) - idx, idx)
    return idx


@lru_cache(maxsize=32)
def _hann(n: int, dtype) -> np.ndarray:
    # periodic Hann, matches scipy.signal.get_window("hann", n)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)).astype(dtype)


def hann(n: int, dtype=np.float64) -> np.ndarray:
    return _hann(n, np.dtype(dtype))


@lru_cache(maxsize=32)
def _dft_basis(n: int, dtype):
    k = np.arange(n // 2 + 1)
    t = np.arange(n)
    ang = 2.0 * np.pi * np.outer(t, k) / n
    w = hann(n, np.float64)[:, None]
    return (w * np.cos(ang)).astype(dtype), (-w * np.sin(ang)).astype(dtype)


def frame_index(n: int, fft_size: int, hop: int) -> np.ndarray:
    """Gather matrix mapping (frame, offset) to sample index, center reflect padding."""
    if fft_size & (fft_size - 1) or fft_size < 2:
        raise AutodiffError(f"fft size {fft_size} is not a power of two")
    if hop < 1:
        raise AutodiffError("hop must be >= 1")
    idx = reflect_index(n, fft_size // 2)
    n_frames = n // hop + 1
    starts = np.arange(n_frames) * hop
    return idx[starts[:, None] + np.arange(fft_size)[None, :]]


def dft_magnitude(x: Tensor, fft_size: int, hop: int) -> Tensor:
    """Framed Hann-windowed |DFT| via explicit basis products, shape (frames, bins)."""
    sig = x.data.reshape(-1)
    n = sig.shape[0]
    gather = frame_index(n, fft_size, hop)
    frames = sig[gather]
    cb, sb = _dft_basis(fft_size, np.dtype(sig.dtype))
    re = frames @ cb
    im = frames @ sb
    power = re * re + im * im
    mag = np.sqrt(power)

    def bw(g):
        # eps keeps d|X|/dX finite at |X| = 0, where the gradient is then 0
        inv = g / np.sqrt(power + MAG_EPS)
        gre = inv * re
        gim = inv * im
        gframes = gre @ cb.T + gim @ sb.T
        gx = np.bincount(gather.reshape(-1), weights=gframes.reshape(-1), minlength=n)
        return (gx.astype(sig.dtype).reshape(x.shape),)

    return make_op(mag, (x,), bw)

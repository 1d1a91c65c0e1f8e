"""Dense tensors with a reverse-mode gradient tape.

Every model computation in the package (denoiser forward, adapter deltas,
the latent-optimization loss) is written against the primitives here, so
that gradients with respect to the input latent or adapter weights can be
taken without an external autograd library.

Usage::

    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = sum_(mul(x, x))
    grads = backward(tape, y)
    grads[x.node_id]
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "DimensionError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "broadcast_add",
    "div",
    "exp",
    "gaussian_blur_2d",
    "gaussian_kernel_matrix",
    "gelu",
    "get_dtype",
    "get_mode",
    "grad_check",
    "index_add",
    "layer_norm",
    "log",
    "matmul",
    "mean",
    "mode",
    "mul",
    "relu",
    "reshape",
    "scale",
    "set_mode",
    "softmax",
    "sum_",
    "take",
    "transpose",
]


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for a primitive."""


_MODES = {"verify": np.float64, "fast": np.float32}
_mode = "fast"


def set_mode(name: str) -> None:
    """Select the global numeric mode: ``"verify"`` (64-bit) or ``"fast"`` (32-bit)."""
    global _mode
    if name not in _MODES:
        raise ValueError(f"unknown numeric mode {name!r}; expected one of {sorted(_MODES)}")
    _mode = name


def get_mode() -> str:
    return _mode


def get_dtype():
    return _MODES[_mode]


class mode:
    """Context manager that temporarily switches the numeric mode."""

    def __init__(self, name: str):
        self.name = name
        self._prev = None

    def __enter__(self):
        self._prev = get_mode()
        set_mode(self.name)
        return self

    def __exit__(self, *exc):
        set_mode(self._prev)
        return False


_ids = itertools.count(1)
_active: list["Tape"] = []


class Tensor:
    """A dense array plus an optional handle onto the active tape."""

    __slots__ = ("data", "requires_grad", "node_id", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.grad: np.ndarray | None = None
        if requires_grad:
            self.node_id = next(_ids)
            if _active:
                _active[-1].leaves[self.node_id] = self

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; each maps onto one primitive
    def __add__(self, other):
        return broadcast_add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return broadcast_add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return broadcast_add(_lift(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("kind", "inputs", "out_id", "vjp")

    def __init__(self, kind, inputs, out_id, vjp):
        self.kind = kind
        self.inputs = inputs
        self.out_id = out_id
        self.vjp = vjp


class Tape:
    """Ordered log of primitive applications that touched a watched tensor.

    Use as a context manager; any primitive evaluated while the tape is
    active and whose inputs carry a node id is appended here.  Tensors
    created with ``requires_grad=True`` inside the block, or passed to
    :meth:`watch`, become leaves.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.leaves: dict[int, Tensor] = {}
        self._known: set[int] = set()

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if t.node_id is None:
                t.requires_grad = True
                t.node_id = next(_ids)
            self.leaves[t.node_id] = t

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def __len__(self):
        return len(self.records)


def _tracking(inputs: Sequence[Tensor]) -> "Tape | None":
    if not _active:
        return None
    tape = _active[-1]
    for t in inputs:
        nid = t.node_id
        if nid is not None and (nid in tape.leaves or nid in tape._known):
            return tape
    return None


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    tape = _tracking(inputs)
    if tape is None:
        result.requires_grad = False
        result.node_id = None
        return result
    result.requires_grad = True
    result.node_id = next(_ids)
    tape._known.add(result.node_id)
    tape.records.append(_Record(kind, tuple(t.node_id for t in inputs), result.node_id, vjp))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _bcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    if B.ndim == 2:
        out = (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + (B.shape[1],))
    else:
        try:
            out = np.matmul(A, B)
        except ValueError:
            raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    if B.ndim == 2:
        # weight matrix shared across leading axes: use flat 2-D products
        def vjp(g):
            ga = (g.reshape(-1, g.shape[-1]) @ B.T).reshape(g.shape[:-1] + (B.shape[0],))
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return _unbroadcast(ga, A.shape), gb
    else:
        def vjp(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape)
            return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of equal-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def broadcast_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting (biases, scalars, positional tables)."""
    _bcast_shape("broadcast-add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("broadcast-add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a Python scalar."""
    s = float(s)
    return _emit("scalar-mul", (a,), a.data * a.data.dtype.type(s), lambda g: (g * s,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product; operands broadcast."""
    _bcast_shape("elementwise-mul", a, b)
    A, B = a.data, b.data
    return _emit("elementwise-mul", (a, b), A * B,
                 lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient; operands broadcast."""
    _bcast_shape("div", a, b)
    A, B = a.data, b.data
    out = A / B

    def vjp(g):
        return _unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)

    return _emit("div", (a, b), out, vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (the row axis by default)."""
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("row-softmax", (a,), out, vjp)


def log(a: Tensor) -> Tensor:
    x = a.data
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), out, vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[ax] for ax in axes)
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; with ``axes=None`` swap the last two."""
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose: need at least 2 dims, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit("layer-norm", (a,), xhat, vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _emit("gelu", (a,), out, vjp)


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    x = a.data
    pos = x > 0
    return _emit("relu", (a,), np.where(pos, x, 0).astype(x.dtype), lambda g: (g * pos,))


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Select entries ``indices`` along ``axis`` (a gather)."""
    idx = np.asarray(indices, dtype=np.intp)
    size = a.shape[axis]
    if idx.size and (idx.min() < -size or idx.max() >= size):
        raise DimensionError(f"take: index out of range for axis {axis} of shape {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (full,)

    return _emit("take", (a,), np.take(a.data, idx, axis=axis), vjp)


def index_add(a: Tensor, indices, b: Tensor, axis: int) -> Tensor:
    """Return ``a`` with ``b`` added into the positions ``indices`` along ``axis``.

    Rows not named in ``indices`` are copied, never touched by arithmetic, so
    they stay bitwise identical to the input.
    """
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    if len(set(idx.tolist())) != idx.size:
        raise ContractError(f"index_add: duplicate positions {idx.tolist()}")
    expect = a.shape[:ax] + (idx.size,) + a.shape[ax + 1:]
    try:
        np.broadcast_shapes(b.shape, expect)
    except ValueError:
        raise DimensionError(f"index_add: update shape {b.shape} incompatible with {expect}") from None
    if idx.size and idx.max() >= a.shape[ax]:
        raise DimensionError(f"index_add: index {idx.max()} out of range for shape {a.shape}")
    out = a.data.copy()
    sel = (slice(None),) * ax + (idx,)
    out[sel] = out[sel] + b.data
    bshape = b.shape

    def vjp(g):
        return g, _unbroadcast(g[sel], bshape)

    return _emit("index-add", (a, b), out, vjp)


def gaussian_kernel_matrix(n: int, size: int = 3, sigma: float = 1.0, dtype=None) -> np.ndarray:
    """1-D blur operator as an ``n x n`` matrix.

    Taps falling outside ``[0, n)`` are folded back by half-sample
    reflection, so the matrix is symmetric with unit row and column sums:
    total mass is kept and constant inputs stay constant.
    """
    if size % 2 != 1:
        raise ContractError(f"kernel size must be odd, got {size}")
    r = size // 2
    taps = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    taps /= taps.sum()
    G = np.zeros((n, n))
    for y in range(n):
        for k, w in zip(range(-r, r + 1), taps):
            j = y + k
            # reflect until in range (handles radius larger than n)
            while j < 0 or j >= n:
                j = -j - 1 if j < 0 else 2 * n - j - 1
            G[y, j] += w
    return G.astype(dtype or get_dtype())


def gaussian_blur_2d(a: Tensor, size: int = 3, sigma: float = 1.0) -> Tensor:
    """Separable Gaussian blur over the last two axes ``(..., H, W)``."""
    if a.ndim < 2:
        raise DimensionError(f"gaussian-blur-2d: need (..., H, W), got {a.shape}")
    H, W = a.shape[-2:]
    Gh = gaussian_kernel_matrix(H, size, sigma, a.data.dtype)
    Gw = gaussian_kernel_matrix(W, size, sigma, a.data.dtype)
    out = Gh @ a.data @ Gw.T

    def vjp(g):
        return (Gh.T @ g @ Gw,)

    return _emit("gaussian-blur-2d", (a,), out, vjp)


# ------------------------------------------------------------------ backward

def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a map from node id to gradient for every leaf of ``tape``
    (zeros for leaves the loss does not depend on) and sets ``leaf.grad``.
    The tape is not consumed; sweeping it again gives identical results.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.node_id is not None:
        grads[loss.node_id] = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = grads.pop(rec.out_id, None)
        if g is None:
            continue
        for nid, gi in zip(rec.inputs, rec.vjp(g)):
            if nid is None or gi is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    result = {}
    for nid, leaf in tape.leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g
        result[nid] = g
    return result


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5,
               eps: float = 1e-8, indices=None) -> tuple[float, tuple | None]:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Returns ``(max_rel_err, worst_index)``.  The relative error per element is
    ``|analytic - numeric| / (|analytic| + |numeric| + eps)``.  A NaN on either
    side yields ``(inf, index)``.  Must be called in verify mode.  Inputs
    sitting exactly on a ReLU kink should be nudged off it by the caller.
    """
    if get_mode() != "verify":
        raise ContractError("grad_check requires verify (64-bit) mode")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy())
    with Tape() as tape:
        tape.watch(leaf)
        out = f(leaf)
    analytic = backward(tape, out)[leaf.node_id]
    flat = x0.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    worst, worst_idx = 0.0, None
    for i in indices:
        xp = flat.copy(); xp[i] += h
        xm = flat.copy(); xm[i] -= h
        fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        fm = float(f(Tensor(xm.reshape(x0.shape))).data)
        num = (fp - fm) / (2 * h)
        ana = float(analytic.reshape(-1)[i])
        idx = np.unravel_index(i, x0.shape)
        if not (np.isfinite(num) and np.isfinite(ana)):
            return math.inf, idx
        err = abs(ana - num) / (abs(ana) + abs(num) + eps)
        if err > worst:
            worst, worst_idx = err, idx
    return worst, worst_idx

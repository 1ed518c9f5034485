"""Dense tensors with reverse-mode automatic differentiation.

Image tensors are channel-first, ``C x H x W``, optionally with a leading
batch axis (``N x C x H x W``).  Every op records its parents and a closure
mapping the output gradient to parent gradients; ``backward`` replays the
closures in reverse creation order, which is a valid topological order and
makes gradient accumulation deterministic.
"""
from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np
from scipy.special import erf

_DTYPES = {"standard": np.float32, "wide": np.float64}
_dtype = np.float32
_ids = itertools.count()
_grad_enabled = True

# Test hook: names of ops whose backward is deliberately corrupted.
CORRUPT_BACKWARD: set[str] = set()

MASK_SENTINEL = -1e30


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def get_dtype():
    return _dtype


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default float type ("standard" or "wide")."""
    global _dtype
    old = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = old


@contextlib.contextmanager
def no_grad():
    """Record no graph inside the block (inference)."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_dtype, order="C", copy=None)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._id = next(_ids)
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(_as_tensor(o), self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _dtype else data.astype(_dtype)
    out.grad = None
    out._id = next(_ids)
    out._op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


def _corrupt(name: str, g: np.ndarray) -> np.ndarray:
    return g * 1.5 if name in CORRUPT_BACKWARD else g


# ---------------------------------------------------------------- broadcasting

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if len(a) != len(b):
        raise DimensionError(f"rank mismatch {a} vs {b}; no implicit rank promotion")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _binary_operands(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim and b.ndim:
        _broadcast_shape(a.shape, b.shape)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _make(a.data / b.data, (a, b), bw, "div")


def scale(x: Tensor, s: float) -> Tensor:
    return _make(x.data * s, (x,), lambda g: (g * s,), "scale")


def maximum(x: Tensor, s: float) -> Tensor:
    """max(x, s) against a scalar; the gradient flows where x > s."""
    keep = x.data > s
    return _make(np.where(keep, x.data, s), (x,), lambda g: (g * keep,), "maximum")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = out == x.data
    return _make(out, (x,), lambda g: (g * inside,), "clamp")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)  # non-finite results are reported by _make
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def arccos(x: Tensor, grad_margin: float | None = None) -> Tensor:
    """Inverse cosine.

    Without ``grad_margin`` inputs must lie strictly inside (-1, 1).  With it,
    the value is taken on ``clip(x, -1, 1)`` while the derivative is evaluated
    at ``clip(x, -1 + margin, 1 - margin)``, so values stay exact at the
    endpoints and gradients stay finite.
    """
    if grad_margin is None:
        if np.any(np.abs(x.data) >= 1):
            raise ContractError("arccos input must be strictly inside (-1, 1); clamp first")
        at = x.data
        value = np.arccos(x.data)
    else:
        at = np.clip(x.data, -1 + grad_margin, 1 - grad_margin)
        value = np.arccos(np.clip(x.data, -1.0, 1.0))
    return _make(value, (x,), lambda g: (-g / np.sqrt(1 - at * at),), "arccos")


_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(x.data * cdf, (x,), bw, "gelu")


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_SENTINEL) -> Tensor:
    """Replace entries where ``mask`` is False by ``value``; the mask is a constant."""
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape(x.shape, mask.shape)
    out = np.where(mask, x.data, value)

    def bw(g):
        return (_unbroadcast(np.where(mask, g, 0), x.shape),)

    return _make(out, (x,), bw, "masked_fill")


# ---------------------------------------------------------------- reductions and shape

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast size-1 axes to ``shape`` (same rank required)."""
    shape = tuple(shape)
    if _broadcast_shape(x.shape, shape) != shape:
        raise DimensionError(f"cannot expand {x.shape} to {shape}")
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),), "expand")


def concat(xs: list, axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw, "concat")


def index(x: Tensor, idx) -> Tensor:
    """Gather ``x[idx]`` (basic or advanced numpy indexing)."""

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.asarray(x.data[idx]), (x,), bw, "index")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast by size-1 expansion."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- image ops

def _as4d(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected C x H x W or N x C x H x W, got {x.shape}")


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel channel mixing: ``out[o] = sum_c weight[o, c] * x[c] (+ bias[o])``."""
    xd, squeeze = _as4d(x)
    n, c, h, w = xd.shape
    if weight.ndim != 2 or weight.shape[1] != c:
        raise DimensionError(f"conv1x1 weight {weight.shape} does not match {c} input channels")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv1x1 bias {bias.shape} does not match weight {weight.shape}")
    xf = xd.reshape(n, c, h * w)
    out = weight.data @ xf
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, -1, h, w)

    def bw(g):
        gf = g.reshape(n, -1, h * w)
        gx = (weight.data.T @ gf).reshape(x.shape)
        gw = np.einsum("noq,ncq->oc", gf, xf)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gf.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if squeeze else out, parents, bw, "conv1x1")


def dwconv3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depth-wise 3x3 convolution, stride 1, zero padding 1."""
    xd, squeeze = _as4d(x)
    n, c, h, w = xd.shape
    if weight.shape != (c, 3, 3):
        raise DimensionError(f"dwconv3x3 weight {weight.shape} does not match {c} channels")
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wd = weight.data
    out = np.zeros_like(xd)
    for i in range(3):
        for j in range(3):
            out += wd[None, :, i, j, None, None] * xp[:, :, i:i + h, j:j + w]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        g4 = g.reshape(n, c, h, w)
        gp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for i in range(3):
            for j in range(3):
                gp[:, :, i:i + h, j:j + w] += wd[None, :, i, j, None, None] * g4
                gw[:, i, j] = np.einsum("nchw,nchw->c", g4, xp[:, :, i:i + h, j:j + w])
        grads = [gp[:, :, 1:-1, 1:-1].reshape(x.shape), _corrupt("dwconv3x3", gw)]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if squeeze else out, parents, bw, "dwconv3x3")


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Full 3x3 convolution with zero padding 1 and stride 1 or 2."""
    if stride not in (1, 2):
        raise ContractError("conv3x3 supports stride 1 or 2 only")
    xd, squeeze = _as4d(x)
    n, c, h, w = xd.shape
    if weight.ndim != 4 or weight.shape[1:] != (c, 3, 3):
        raise DimensionError(f"conv3x3 weight {weight.shape} does not match {c} input channels")
    co = weight.shape[0]
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wd = weight.data
    # taps: (9, n, c, ho*wo)
    taps = np.stack([
        xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride].reshape(n, c, ho * wo)
        for i in range(3) for j in range(3)
    ])
    cols = taps.transpose(1, 2, 0, 3).reshape(n, c * 9, ho * wo)
    out = wd.reshape(co, c * 9) @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, co, ho, wo)

    def bw(g):
        gf = g.reshape(n, co, ho * wo)
        gw = np.einsum("noq,nkq->ok", gf, cols).reshape(wd.shape)
        gcols = (wd.reshape(co, c * 9).T @ gf).reshape(n, c, 9, ho, wo)
        gp = np.zeros_like(xp)
        for k in range(9):
            i, j = divmod(k, 3)
            gp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, k]
        grads = [gp[:, :, 1:-1, 1:-1].reshape(x.shape), gw]
        if bias is not None:
            grads.append(gf.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if squeeze else out, parents, bw, "conv3x3")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize across channels at each spatial position, then scale and shift."""
    if eps <= 0:
        raise ContractError("layernorm eps must be positive")
    xd, squeeze = _as4d(x)
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layernorm affine params must have shape ({c},)")
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def bw(g):
        g4 = g.reshape(xd.shape)
        ggamma = (g4 * xhat).sum(axis=(0, 2, 3))
        gbeta = g4.sum(axis=(0, 2, 3))
        gx_hat = g4 * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True))
        return gx.reshape(x.shape), ggamma, gbeta

    return _make(out[0] if squeeze else out, (x, gamma, beta), bw, "layernorm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: ``C x H x W -> C`` (or ``N x C x H x W -> N x C``)."""
    _as4d(x)
    h, w = x.shape[-2:]

    def bw(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),)

    return _make(x.data.mean(axis=(-2, -1)), (x,), bw, "global_avg_pool")


def _bins(n: int, k: int) -> list[tuple[int, int]]:
    return [((i * n) // k, -((-(i + 1) * n) // k)) for i in range(k)]


def adaptive_avg_pool(x: Tensor, oh: int, ow: int) -> Tensor:
    """Average over contiguous near-equal bins of each spatial axis."""
    xd, squeeze = _as4d(x)
    n, c, h, w = xd.shape
    if oh < 1 or ow < 1:
        raise DimensionError("adaptive_avg_pool target dims must be >= 1")
    if oh > h or ow > w:
        raise DimensionError(f"adaptive_avg_pool target {oh}x{ow} exceeds source {h}x{w}; use nearest_upsample")
    rows, cols = _bins(h, oh), _bins(w, ow)
    if h % oh == 0 and w % ow == 0:
        out = xd.reshape(n, c, oh, h // oh, ow, w // ow).mean(axis=(3, 5))
    else:
        out = np.empty((n, c, oh, ow), dtype=xd.dtype)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                out[:, :, i, j] = xd[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bw(g):
        g4 = g.reshape(n, c, oh, ow)
        if h % oh == 0 and w % ow == 0:
            kh, kw = h // oh, w // ow
            gx = np.broadcast_to(g4[:, :, :, None, :, None] / (kh * kw), (n, c, oh, kh, ow, kw))
            return (gx.reshape(x.shape),)
        gx = np.zeros_like(xd)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, :, r0:r1, c0:c1] += g4[:, :, i, j, None, None] / ((r1 - r0) * (c1 - c0))
        return (gx.reshape(x.shape),)

    return _make(out[0] if squeeze else out, (x,), bw, "adaptive_avg_pool")


def nearest_upsample(x: Tensor, oh: int, ow: int) -> Tensor:
    """Nearest-neighbour resize; the gradient sums over copies."""
    xd, squeeze = _as4d(x)
    n, c, h, w = xd.shape
    if oh < 1 or ow < 1:
        raise DimensionError("nearest_upsample target dims must be >= 1")
    ri = (np.arange(oh) * h) // oh
    ci = (np.arange(ow) * w) // ow
    out = xd[:, :, ri][:, :, :, ci]

    def bw(g):
        g4 = g.reshape(n, c, oh, ow)
        gx = np.zeros_like(xd)
        if oh % h == 0 and ow % w == 0:
            gx += g4.reshape(n, c, h, oh // h, w, ow // w).sum(axis=(3, 5))
        else:
            tmp = np.zeros((n, c, h, ow), dtype=g4.dtype)
            np.add.at(tmp, (slice(None), slice(None), ri), g4)
            np.add.at(gx, (slice(None), slice(None), slice(None), ci), tmp)
        return (gx.reshape(x.shape),)

    return _make(out[0] if squeeze else out, (x,), bw, "nearest_upsample")

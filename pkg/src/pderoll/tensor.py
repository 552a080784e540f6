"""Dense-tensor compute core with reverse-mode differentiation.

Tensors wrap numpy arrays (float32 for training, float64 for gradient
checking) and record a computation graph as they are combined. Calling
``backward()`` on a scalar loss walks the graph once in reverse topological
order and accumulates gradients on every leaf that requires them. All
kernels are deterministic: reductions happen in numpy's fixed order and no
op mutates a tensor that another op has already consumed.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import expit as _sigmoid

__all__ = [
    "Tensor",
    "no_grad",
    "set_check_finite",
    "concat",
    "matmul",
    "softmax",
    "layer_norm",
    "group_norm",
    "conv2d",
    "conv_transpose2d",
]

_GRAD_ENABLED = True
_CHECK_FINITE = False

_FLOAT_DTYPES = (np.float32, np.float64)


def set_check_finite(flag: bool) -> None:
    """Globally enable per-op NaN/Inf checks (slow; meant for tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / optimizer updates)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in _FLOAT_DTYPES:
        return arr.astype(np.float32)
    return arr


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # ---- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Same values, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # ---- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf.

        Leaves keep their gradient in ``.grad`` (``None`` means zero, i.e. the
        leaf was not reached). Interior nodes are freed as soon as their
        contribution has been pushed to their parents.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is not None:
                for parent, pg in zip(node._parents, node._backward_fn(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg
            elif node.requires_grad:
                node.grad = np.array(g) if node.grad is None else node.grad + g

    # ---- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype.name} and {b.dtype.name}; the graph dtype is fixed")


def _make(data, parents, backward_fn) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op in checked mode")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- elementwise arithmetic ----------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, (a, b), bw)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    _check_same_dtype(a, b, "div")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return _make(ad / bd, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        return (-g,)

    return _make(-a.data, (a,), bw)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data

    def bw(g):
        return (g * p * np.power(ad, p - 1.0),)

    return _make(np.power(ad, p), (a,), bw)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), bw)


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / out),)

    return _make(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bw)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def bw(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return _make(out, (a,), bw)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU; backward uses the matching closed form."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), bw)


# ---- shape manipulation ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape

    def bw(g):
        return (g.reshape(orig),)

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inverse),)

    return _make(a.data.transpose(axes), (a,), bw)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic slicing only (slices / ints / ellipsis); gradients scatter back."""
    orig_shape, orig_dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(orig_shape, dtype=orig_dtype)
        full[idx] += g
        return (full,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# ---- reductions -----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape
    count = a.size if axis is None else np.prod([in_shape[ax] for ax in np.atleast_1d(axis)])
    inv = 1.0 / float(count)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, in_shape),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


# ---- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul expects >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(ad, bd), (a, b), bw)


# ---- softmax / normalizations ----------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), bw)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (pre-affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv_std

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return ((g - gm - y * gym) * inv_std,)

    return _make(y, (a,), bw)


def group_norm(a: Tensor, num_groups: int, eps: float = 1e-5) -> Tensor:
    """Per-group zero mean / unit variance over (channels-in-group, H, W), pre-affine."""
    if a.ndim != 4:
        raise ValueError(f"group_norm expects NCHW input, got shape {a.shape}")
    n, c, h, w = a.shape
    if num_groups < 1 or c % num_groups != 0:
        raise ValueError(f"group_norm: C={c} not divisible by num_groups={num_groups}")
    grouped = a.data.reshape(n, num_groups, -1)
    mu = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (grouped - mu) * inv_std

    def bw(g):
        gg = g.reshape(n, num_groups, -1)
        gm = gg.mean(axis=2, keepdims=True)
        gym = (gg * y).mean(axis=2, keepdims=True)
        return (((gg - gm - y * gym) * inv_std).reshape(a.shape),)

    return _make(y.reshape(a.shape), (a,), bw)


# ---- convolution kernels ----------------------------------------------------------


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    """Strided sliding-window view (N, C, Ho, Wo, kh, kw) of a padded input."""
    n, c, h, w = xp.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(s[0], s[1], s[2] * sh, s[3] * sw, s[2], s[3]),
        writeable=False,
    )
    return view, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of NCHW input with OIkk weight.

    Output spatial size is floor((H + 2p - k) / s) + 1 per axis.
    """
    _check_same_dtype(x, weight, "conv2d")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIkk weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {ci}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError(f"conv2d: spatial dims {h}x{w} too small for kernel {kh}x{kw} with padding {ph}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else np.ascontiguousarray(x.data)
    win, ho, wo = _windows(xp, kh, kw, sh, sw)
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        _check_same_dtype(x, bias, "conv2d bias")
        out += bias.data[None, :, None, None]

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
        # scatter g*w back onto the padded input grid
        gxp = np.zeros_like(xp)
        tmp = np.tensordot(g, weight.data, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u : u + sh * ho : sh, v : v + sw * wo : sw] += tmp[:, :, :, :, u, v].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else gxp
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Adjoint of conv2d. Weight layout is (C_in, C_out, kh, kw).

    Output spatial size is (H - 1) * s + k - 2p per axis.
    """
    _check_same_dtype(x, weight, "conv_transpose2d")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d expects NCHW input and IOkk weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    ci, co, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d: input has {c} channels but weight expects {ci}")
    hf = (h - 1) * sh + kh
    wf = (w - 1) * sw + kw
    if hf - 2 * ph < 1 or wf - 2 * pw < 1:
        raise ValueError(f"conv_transpose2d: padding {ph} consumes the whole {hf}x{wf} output")

    full = np.zeros((n, co, hf, wf), dtype=x.dtype)
    tmp = np.tensordot(x.data, weight.data, axes=([1], [0]))  # (N, H, W, Co, kh, kw)
    for u in range(kh):
        for v in range(kw):
            full[:, :, u : u + sh * h : sh, v : v + sw * w : sw] += tmp[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    out = full[:, :, ph : hf - ph, pw : wf - pw] if (ph or pw) else full
    out = np.ascontiguousarray(out)
    if bias is not None:
        _check_same_dtype(x, bias, "conv_transpose2d bias")
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else np.ascontiguousarray(g)
        win, gh, gw_ = _windows(gp, kh, kw, sh, sw)  # (N, Co, H, W, kh, kw)
        gx = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gweight = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))  # (Ci, Co, kh, kw)
        if bias is not None:
            return np.ascontiguousarray(gx), gweight, g.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(gx), gweight

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)

"""Reverse-mode automatic differentiation on dense numpy tensors.

Every network, the renderer, and all iterative fits in this package run on
the op set below. Values are plain numpy arrays wrapped in `Tensor` nodes;
calling `backward()` on a scalar node walks the recorded graph in reverse
topological order and accumulates exact gradients into every node created
with `requires_grad=True`.

Training runs in single precision; `finite_diff_check` re-evaluates a
program in double precision and compares analytic gradients against central
differences, which is the verification route used throughout the test
suite.

No higher-order derivatives: backward passes produce raw arrays, not new
graph nodes. Where a gradient-of-gradient quantity is needed (the
discriminator gradient penalty), the inner gradient is unrolled explicitly
as a first-order program, see `nets.py`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class AutodiffError(Exception):
    """Raised for malformed programs (bad shapes, non-scalar losses)."""


# ---------------------------------------------------------------------------
# Tensor node
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        if not isinstance(data, np.ndarray):
            if isinstance(data, np.generic):
                data = np.asarray(data)
            else:
                data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise AutodiffError(f"backward() needs a scalar, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self and node._parents:
                # free intermediate grads to bound memory on long programs
                if not node.requires_grad:
                    node.grad = None

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tensor_slice(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}, name={self.name})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (np.ndarray, np.generic)):
        arr = np.asarray(x)
    else:
        # python scalars and lists default to single precision; explicit
        # numpy dtypes pass through so double-precision programs stay double
        arr = np.asarray(x, dtype=DEFAULT_DTYPE if dtype is None else dtype)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr)


def _track(*parents):
    return any(p.requires_grad or p._parents for p in parents)


def _make(data, parents, backward):
    if _track(*parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum gradient `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and arithmetic ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bwd)


def neg(a):
    a = as_tensor(a)

    def bwd(g):
        a.accumulate(-g)

    return _make(-a.data, (a,), bwd)


def pow_const(a, p):
    a = as_tensor(a)
    out = a.data ** p

    def bwd(g):
        a.accumulate(g * p * a.data ** (p - 1))

    return _make(out, (a,), bwd)


def square(a):
    a = as_tensor(a)

    def bwd(g):
        a.accumulate(g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), bwd)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        a.accumulate(g * out)

    return _make(out, (a,), bwd)


def log(a):
    a = as_tensor(a)

    def bwd(g):
        a.accumulate(g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        a.accumulate(g * 0.5 / out)

    return _make(out, (a,), bwd)


def tabs(a):
    a = as_tensor(a)

    def bwd(g):
        a.accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # exp overflow saturates to the correct limit
        out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a.accumulate(g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)

    def bwd(g):
        with np.errstate(over="ignore"):
            a.accumulate(g / (1.0 + np.exp(-a.data)))

    return _make(out, (a,), bwd)


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    mask = a.data >= 0
    out = np.where(mask, a.data, slope * a.data)

    def bwd(g):
        a.accumulate(g * np.where(mask, 1.0, slope).astype(a.dtype))

    return _make(out, (a,), bwd)


def relu(a):
    return leaky_relu(a, slope=0.0)


def sin(a):
    a = as_tensor(a)

    def bwd(g):
        a.accumulate(g * np.cos(a.data))

    return _make(np.sin(a.data), (a,), bwd)


def cos(a):
    a = as_tensor(a)

    def bwd(g):
        a.accumulate(-g * np.sin(a.data))

    return _make(np.cos(a.data), (a,), bwd)


def stop_gradient(a):
    a = as_tensor(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# Shape, reduction, indexing
# ---------------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)

    def bwd(g):
        a.accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        a.accumulate(g.transpose(inv) if inv is not None else g.transpose())

    return _make(a.data.transpose(axes) if axes is not None else a.data.transpose(), (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a.accumulate(np.broadcast_to(gg, a.data.shape))

    return _make(np.asarray(out, dtype=a.dtype), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)

    def bwd(g):
        gg = np.asarray(g) / n
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a.accumulate(np.broadcast_to(gg, a.data.shape).astype(a.dtype))

    return _make(np.asarray(out, dtype=a.dtype), (a,), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._parents:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), bwd)


def tensor_slice(a, idx):
    a = as_tensor(a)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a.accumulate(full)

    return _make(np.array(out, copy=True), (a,), bwd)


def gather_rows(a, indices):
    """a[indices] along axis 0 for an integer index array."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    out = a.data[indices]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        a.accumulate(full)

    return _make(np.array(out, copy=True), (a,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate(g[tuple(sl)])

    return _make(out, tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad or t._parents:
                t.accumulate(np.take(g, i, axis=axis))

    return _make(out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# Convolution family (NCHW, zero padding, stride 1 or 2)
# ---------------------------------------------------------------------------


def _check_stride(stride):
    if stride not in (1, 2):
        raise AutodiffError(f"stride must be 1 or 2, got {stride}")


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (b, ho, wo, c, kh, kw) -> rows of length c*kh*kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * kh * kw)
    return cols, ho, wo


def _conv_plain(x, w, stride, pad):
    b = x.shape[0]
    o, c, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = (cols @ w.reshape(o, -1).T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out)


def _conv_input_grad(gy, w, stride, pad, in_hw):
    """Adjoint of conv2d w.r.t. its input: correlation of the zero-dilated
    output gradient with the flipped kernel (one im2col GEMM, no scatter)."""
    b, o, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    h, wdt = in_hw
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    extra_h = (h + 2 * pad - kh) - stride * (ho - 1)
    extra_w = (wdt + 2 * pad - kw) - stride * (wo - 1)
    if stride > 1 or extra_h or extra_w:
        gd = np.zeros((b, o, (ho - 1) * stride + 1 + extra_h,
                       (wo - 1) * stride + 1 + extra_w), dtype=gy.dtype)
        gd[:, :, ::stride, ::stride][:, :, :ho, :wo] = gy
    else:
        gd = gy
    return _conv_plain(gd, wf, 1, kh - 1 - pad)


def conv2d(x, w, stride=1, pad=1):
    """2D convolution, x: (B,C,H,W), w: (O,C,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    _check_stride(stride)
    b = x.data.shape[0]
    o, c, kh, kw = w.data.shape
    if x.data.shape[1] != c:
        raise AutodiffError(f"conv2d channel mismatch: {x.data.shape[1]} vs {c}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bwd(g):
        if w.requires_grad or w._parents:
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, o)
            w.accumulate((gmat.T @ cols).reshape(w.data.shape))
        if x.requires_grad or x._parents:
            x.accumulate(_conv_input_grad(g, w.data, stride, pad, x.data.shape[2:]))

    return _make(out, (x, w), bwd)


def conv2d_transpose(x, w, out_hw, stride=2, pad=1):
    """Adjoint of conv2d(., w, stride, pad) producing spatial size `out_hw`.

    x: (B,O,h,w), w: (O,C,kh,kw) -> (B,C,*out_hw). Used for upsampling paths
    and for unrolled discriminator input gradients.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_stride(stride)
    b, o, hi, wi = x.data.shape
    o2, c, kh, kw = w.data.shape
    if o != o2:
        raise AutodiffError(f"conv2d_transpose channel mismatch: {o} vs {o2}")
    out = _conv_input_grad(x.data, w.data, stride, pad, tuple(out_hw))

    def bwd(g):
        cols, ho, wo = _im2col(g, kh, kw, stride, pad)
        if (ho, wo) != (hi, wi):
            raise AutodiffError("conv2d_transpose backward geometry mismatch")
        if x.requires_grad or x._parents:
            gx = (cols @ w.data.reshape(o, -1).T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
            x.accumulate(np.ascontiguousarray(gx))
        if w.requires_grad or w._parents:
            xmat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(b * hi * wi, o)
            w.accumulate((xmat.T @ cols).reshape(w.data.shape))

    return _make(out, (x, w), bwd)


def upsample2x(x):
    """Nearest-neighbour 2x spatial upsampling for (B,C,H,W)."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        b, c, h2, w2 = g.shape
        x.accumulate(g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _make(out, (x,), bwd)


def avgpool2x(x):
    x = as_tensor(x)
    b, c, h, w = x.data.shape
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        gg = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        x.accumulate(gg.astype(x.dtype))

    return _make(out.astype(x.dtype), (x,), bwd)


# ---------------------------------------------------------------------------
# Bilinear sampling (texel centers at (i+0.5)/H, (j+0.5)/W)
# ---------------------------------------------------------------------------


def _bilinear_coeffs(uv, h, w):
    u = np.clip(uv[:, 0], 0.0, 1.0)
    v = np.clip(uv[:, 1], 0.0, 1.0)
    x = u * w - 0.5
    y = v * h - 0.5
    j0 = np.clip(np.floor(x), 0, w - 2).astype(np.int64) if w > 1 else np.zeros_like(x, dtype=np.int64)
    i0 = np.clip(np.floor(y), 0, h - 2).astype(np.int64) if h > 1 else np.zeros_like(y, dtype=np.int64)
    fx = np.clip(x - j0, 0.0, 1.0)
    fy = np.clip(y - i0, 0.0, 1.0)
    return i0, j0, fx, fy


def bilinear_sample(grid, uv):
    """Sample grid (H,W,C) at continuous uv (N,2) in [0,1]^2, bilinear.

    Out-of-range uv are clamped (zero gradient to uv there). Differentiable
    w.r.t. both the grid values and the sample coordinates.
    """
    grid, uv = as_tensor(grid), as_tensor(uv)
    h, w = grid.data.shape[:2]
    i0, j0, fx, fy = _bilinear_coeffs(uv.data, h, w)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    g00 = grid.data[i0, j0]
    g01 = grid.data[i0, j1]
    g10 = grid.data[i1, j0]
    g11 = grid.data[i1, j1]
    fxc = fx[:, None]
    fyc = fy[:, None]
    out = ((1 - fyc) * ((1 - fxc) * g00 + fxc * g01)
           + fyc * ((1 - fxc) * g10 + fxc * g11))

    def bwd(g):
        if grid.requires_grad or grid._parents:
            gg = np.zeros_like(grid.data)
            np.add.at(gg, (i0, j0), g * (1 - fyc) * (1 - fxc))
            np.add.at(gg, (i0, j1), g * (1 - fyc) * fxc)
            np.add.at(gg, (i1, j0), g * fyc * (1 - fxc))
            np.add.at(gg, (i1, j1), g * fyc * fxc)
            grid.accumulate(gg)
        if uv.requires_grad or uv._parents:
            dx = (1 - fyc) * (g01 - g00) + fyc * (g11 - g10)
            dy = (1 - fxc) * (g10 - g00) + fxc * (g11 - g01)
            in_x = ((uv.data[:, 0] * w - 0.5 > 0) & (uv.data[:, 0] * w - 0.5 < w - 1)
                    & (uv.data[:, 0] >= 0) & (uv.data[:, 0] <= 1))
            in_y = ((uv.data[:, 1] * h - 0.5 > 0) & (uv.data[:, 1] * h - 0.5 < h - 1)
                    & (uv.data[:, 1] >= 0) & (uv.data[:, 1] <= 1))
            gu = (g * dx).sum(axis=1) * w * in_x
            gv = (g * dy).sum(axis=1) * h * in_y
            uv.accumulate(np.stack([gu, gv], axis=1).astype(uv.dtype))

    return _make(out.astype(grid.dtype), (grid, uv), bwd)


# ---------------------------------------------------------------------------
# Parameter sets
# ---------------------------------------------------------------------------


class ParamSet:
    """Named collection of tensors with per-parameter trainable flags."""

    def __init__(self):
        self._tensors = {}

    def add(self, name, value, trainable=True):
        if name in self._tensors:
            raise AutodiffError(f"duplicate parameter name {name!r}")
        t = as_tensor(np.array(value, copy=True))
        t.requires_grad = trainable
        t.name = name
        self._tensors[name] = t
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def trainable_items(self):
        return [(n, t) for n, t in self._tensors.items() if t.requires_grad]

    def copy(self):
        out = ParamSet()
        for n, t in self._tensors.items():
            out.add(n, t.data, trainable=t.requires_grad)
        return out

    def frozen(self):
        """View with gradients disabled; shares the underlying arrays."""
        out = ParamSet()
        for n, t in self._tensors.items():
            ft = Tensor(t.data)
            ft.name = n
            out._tensors[n] = ft
        return out

    def astype(self, dtype):
        out = ParamSet()
        for n, t in self._tensors.items():
            out.add(n, t.data.astype(dtype), trainable=t.requires_grad)
        return out

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def state_arrays(self):
        return {n: t.data for n, t in self._tensors.items()}

    def load_arrays(self, arrays, strict=True):
        for n, arr in arrays.items():
            if n in self._tensors:
                t = self._tensors[n]
                if t.data.shape != arr.shape:
                    raise AutodiffError(f"shape mismatch loading {n!r}")
                t.data = arr.astype(t.data.dtype, copy=True)
            elif strict:
                raise AutodiffError(f"unknown parameter {n!r} in checkpoint")

    def allclose(self, other, atol=0.0):
        if set(self.names()) != set(other.names()):
            return False
        return all(np.allclose(t.data, other[n].data, atol=atol, rtol=0.0)
                   for n, t in self.items())


def evaluate_with_gradients(program, params):
    """Run `program(params)` to a scalar and return (loss value, gradients).

    Gradients are returned as a dict {name: array} covering every trainable
    parameter; untouched parameters get zeros.
    """
    params.zero_grads()
    loss = program(params)
    if not isinstance(loss, Tensor):
        raise AutodiffError("program must return a Tensor")
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    loss.backward()
    grads = {}
    for n, t in params.trainable_items():
        grads[n] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return float(loss.data), grads


# ---------------------------------------------------------------------------
# Adaptive-moment optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p, m, v


def optimizer_step(params, grads, state):
    """One bias-corrected adaptive-moment update; functional, returns copies."""
    new = params.copy()
    state.step += 1
    for name, t in new.trainable_items():
        if name not in grads:
            continue
        g = np.asarray(grads[name], dtype=t.data.dtype)
        if g.shape != t.data.shape:
            raise AutodiffError(f"gradient shape mismatch for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        t.data, state.m[name], state.v[name] = _adam_update(
            t.data, g, m, v, state.step, state.lr, state.beta1, state.beta2, state.eps)
    return new, state


class Adam:
    """In-place variant of `optimizer_step` for training loops.

    `lr_overrides` maps parameter names to their own learning rates, for
    problems mixing scales (for example blendshape coefficients next to
    normalized camera parameters).
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 lr_overrides=None):
        self.params = params
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.lr_overrides = dict(lr_overrides or {})

    def step(self, grads):
        st = self.state
        st.step += 1
        for name, t in self.params.trainable_items():
            if name not in grads:
                continue
            g = np.asarray(grads[name], dtype=t.data.dtype)
            m = st.m.get(name)
            if m is None:
                m = np.zeros_like(t.data)
                st.v[name] = np.zeros_like(t.data)
            lr = self.lr_overrides.get(name, st.lr)
            t.data, st.m[name], st.v[name] = _adam_update(
                t.data, g, m, st.v[name], st.step, lr, st.beta1, st.beta2, st.eps)


# ---------------------------------------------------------------------------
# Finite-difference checker
# ---------------------------------------------------------------------------


def finite_diff_check(program, params, eps=1e-5, max_coords=8, seed=0):
    """Max relative error between reverse-mode and central-difference grads.

    Runs in double precision regardless of the incoming dtype. For every
    trainable tensor a random subsample of at most `max_coords` coordinates
    is probed. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
    denominator.
    """
    if eps <= 0:
        raise AutodiffError("eps must be positive")
    dparams = params.astype(np.float64)
    _, grads = evaluate_with_gradients(program, dparams)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in dparams.trainable_items():
        flat = t.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = program(dparams).item()
            flat[c] = orig - eps
            fm = program(dparams).item()
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * eps)
            analytic = grads[name].reshape(-1)[c]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint container (shared binary tensor format)
# ---------------------------------------------------------------------------

_MAGIC = b"NAVT"
_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8, 4: np.bool_}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def save_tensors(path, arrays):
    """Write named numpy arrays to the raw tensor container format.

    Layout: magic, u32 version, u32 count, then per tensor u16 name length,
    utf-8 name, u8 dtype code, u8 rank, i64 dims, little-endian payload.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise AutodiffError(f"unsupported dtype {arr.dtype} for {name!r}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensors(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise AutodiffError(f"{path}: not a tensor container")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise AutodiffError(f"{path}: unsupported container version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            code, rank = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{rank}q", fh.read(8 * rank)) if rank else ()
            dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
            n_items = int(np.prod(shape)) if shape else 1
            buf = fh.read(n_items * dtype.itemsize)
            out[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).astype(_DTYPES[code])
        return out


def save_params(path, params, extra=None):
    arrays = dict(params.state_arrays())
    if extra:
        arrays.update(extra)
    save_tensors(path, arrays)


def load_params(path, params):
    arrays = load_tensors(path)
    known = {n: a for n, a in arrays.items() if n in params}
    params.load_arrays(known)
    return {n: a for n, a in arrays.items() if n not in params}

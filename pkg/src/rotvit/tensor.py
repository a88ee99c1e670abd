"""Numpy-backed tensor with reverse-mode automatic differentiation.

Covers exactly the operations a small vision transformer needs: matmul,
elementwise arithmetic, reductions, softmax / log-softmax, layer norm,
GELU, softplus, and the gather primitives used by overlapping patch
extraction and feature-grid rotation.

The computation graph is recorded implicitly: every op output keeps
references to its parents together with a backward closure.  ``backward``
topologically sorts the reachable subgraph and sweeps it once, so each
recorded op contributes its vector-Jacobian product exactly once.
Gradients accumulate into ``.grad`` until explicitly reset.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

from .errors import ShapeError, UsageError

DTYPES = {"float32": np.float32, "float64": np.float64}

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(dtype, str):
            dtype = DTYPES[dtype]
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # ----- construction helpers -------------------------------------------

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ----- autodiff core ---------------------------------------------------

    def _accumulate(self, g: np.ndarray, own: bool = False):
        """Add g into .grad; own=True promises g is a freshly allocated
        array no caller will reuse, so it may be adopted without a copy."""
        if self.grad is None:
            if own and g.shape == self.data.shape \
                    and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = np.array(np.broadcast_to(g, self.data.shape),
                                     dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise UsageError("backward() requires a scalar loss")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # ----- elementwise arithmetic ------------------------------------------

    @staticmethod
    def _wrap(other, like) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=like.dtype))

    def __add__(self, other):
        other = Tensor._wrap(other, self)
        a, b = self, other
        out = Tensor._from_op(a.data + b.data, (a, b), None)
        if out.requires_grad:
            def bwd(g):
                if a.requires_grad:
                    ga = _unbroadcast(g, a.shape)
                    a._accumulate(ga, own=ga is not g)
                if b.requires_grad:
                    gb = _unbroadcast(g, b.shape)
                    b._accumulate(gb, own=gb is not g)
            out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor._from_op(-self.data, (self,), None)
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(-g, own=True)
        return out

    def __sub__(self, other):
        return self + (-Tensor._wrap(other, self))

    def __rsub__(self, other):
        return Tensor._wrap(other, self) + (-self)

    def __mul__(self, other):
        other = Tensor._wrap(other, self)
        a, b = self, other
        out = Tensor._from_op(a.data * b.data, (a, b), None)
        if out.requires_grad:
            def bwd(g):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * b.data, a.shape), own=True)
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * a.data, b.shape), own=True)
            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._wrap(other, self)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return Tensor._wrap(other, self) * self ** -1.0

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise UsageError("only constant exponents are supported")
        out = Tensor._from_op(self.data ** p, (self,), None)
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(
                g * p * self.data ** (p - 1), own=True)
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor._from_op(y, (self,), None)
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * y, own=True)
        return out

    def log(self):
        out = Tensor._from_op(np.log(self.data), (self,), None)
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g / self.data, own=True)
        return out

    def sqrt(self):
        y = np.sqrt(self.data)
        out = Tensor._from_op(y, (self,), None)
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * 0.5 / y, own=True)
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor._from_op(y, (self,), None)
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * (1.0 - y * y), own=True)
        return out

    def clamp_min(self, lo: float):
        mask = self.data > lo
        out = Tensor._from_op(np.maximum(self.data, lo), (self,), None)
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * mask, own=True)
        return out

    # ----- shape ops -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = Tensor._from_op(self.data.reshape(shape), (self,), None)
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.reshape(old))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = Tensor._from_op(self.data.transpose(axes), (self,), None)
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.transpose(inv))
        return out

    def swap_last(self):
        """Swap the two trailing axes."""
        n = self.ndim
        axes = tuple(range(n - 2)) + (n - 1, n - 2)
        return self.transpose(axes)

    def __getitem__(self, key):
        out = Tensor._from_op(np.ascontiguousarray(self.data[key]),
                              (self,), None)
        if out.requires_grad:
            ks = key if isinstance(key, tuple) else (key,)
            # only advanced (array) indexing can select a cell twice and
            # needs the unbuffered scatter-add; basic slicing can't alias
            advanced = any(isinstance(k, (np.ndarray, list)) for k in ks)

            def bwd(g):
                full = np.zeros_like(self.data)
                if advanced:
                    np.add.at(full, key, g)
                else:
                    full[key] += g
                self._accumulate(full, own=True)
            out._backward = bwd
        return out

    def broadcast_to(self, shape):
        out = Tensor._from_op(np.broadcast_to(self.data, shape).copy(),
                              (self,), None)
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(
                _unbroadcast(g, self.shape))
        return out

    # ----- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims),
                              (self,), None)
        if out.requires_grad:
            def bwd(g):
                if axis is None:
                    gg = g
                else:
                    gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.shape).copy(),
                                 own=True)
            out._backward = bwd
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ----- matmul ----------------------------------------------------------

    def __matmul__(self, other):
        other = Tensor._wrap(other, self)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul operands must have ndim >= 2")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(
                f"matmul inner extents differ: {a.shape} @ {b.shape}")
        out = Tensor._from_op(np.matmul(a.data, b.data), (a, b), None)
        if out.requires_grad:
            def bwd(g):
                if a.requires_grad:
                    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                    a._accumulate(_unbroadcast(ga, a.shape), own=True)
                if b.requires_grad:
                    if b.ndim == 2 and g.ndim > 2:
                        # shared right operand: fold the batch axes into one
                        # gemm instead of a batched matmul plus a sum
                        gb = (a.data.reshape(-1, a.shape[-1]).T
                              @ g.reshape(-1, g.shape[-1]))
                    else:
                        gb = _unbroadcast(
                            np.matmul(np.swapaxes(a.data, -1, -2), g),
                            b.shape)
                    b._accumulate(gb, own=True)
            out._backward = bwd
        return out


# ----- free functions -------------------------------------------------------


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor._from_op(data, tensors, None)
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    t._accumulate(g[tuple(idx)])
        out._backward = bwd
    return out


def softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._from_op(s, (x,), None)
    if out.requires_grad:
        def bwd(g):
            x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)),
                          own=True)
        out._backward = bwd
    return out


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = Tensor._from_op(y, (x,), None)
    if out.requires_grad:
        sm = np.exp(y)
        def bwd(g):
            x._accumulate(g - sm * g.sum(axis=axis, keepdims=True),
                          own=True)
        out._backward = bwd
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), via the error function."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * phi
    out = Tensor._from_op(y.astype(x.dtype), (x,), None)
    if out.requires_grad:
        def bwd(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            x._accumulate(g * (phi + x.data * pdf), own=True)
        out._backward = bwd
    return out


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data)
    out = Tensor._from_op(y, (x,), None)
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * expit(x.data), own=True)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps=1e-6) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine.

    Fused into one graph node: the composed form allocates ~9 tracked
    intermediates per call, which dominates encoder step time.
    """
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError("layer_norm gain/bias extent mismatch")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    out = Tensor._from_op(y, (x, gain, bias), None)
    if out.requires_grad:
        def bwd(g):
            if x.requires_grad:
                gy = g * gain.data
                m1 = gy.mean(axis=-1, keepdims=True)
                m2 = (gy * xhat).mean(axis=-1, keepdims=True)
                x._accumulate((gy - m1 - xhat * m2) * inv, own=True)
            if gain.requires_grad:
                gg = _unbroadcast(g * xhat, gain.shape)
                gain._accumulate(gg, own=True)
            if bias.requires_grad:
                gb = _unbroadcast(g, bias.shape)
                bias._accumulate(gb, own=gb is not g)
        out._backward = bwd
    return out


def smooth_l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean elementwise smooth-L1: 0.5 d^2 for |d|<1, |d|-0.5 otherwise."""
    if a.shape != b.shape:
        raise ShapeError(f"smooth_l1 shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    dv = d.data
    inner = np.abs(dv) < 1.0
    vals = np.where(inner, 0.5 * dv * dv, np.abs(dv) - 0.5)
    terms = Tensor._from_op(vals, (d,), None)
    if terms.requires_grad:
        terms._backward = lambda g: d._accumulate(g * np.clip(dv, -1.0, 1.0),
                                              own=True)
    return terms.mean()


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the second-to-last axis; idx < 0 yields a zero row.

    x has shape (..., N, D) and idx shape (M,); the result is (..., M, D).
    Duplicate sources are allowed (gradients accumulate).
    """
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    y = np.take(x.data, safe, axis=-2)
    if not valid.all():
        y = y.copy()
        y[..., ~valid, :] = 0.0
    out = Tensor._from_op(y, (x,), None)
    if out.requires_grad:
        def bwd(g):
            gx = np.zeros_like(x.data)
            # move the row axis first so np.add.at can scatter duplicates
            gx_m = np.moveaxis(gx, -2, 0)
            g_m = np.moveaxis(g, -2, 0)
            np.add.at(gx_m, safe[valid], g_m[valid])
            x._accumulate(gx, own=True)
        out._backward = bwd
    return out


def gather_flat(x: Tensor, idx: np.ndarray) -> Tensor:
    """Fancy-gather along axis 1: x is (B, M), idx any int shape into M."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor._from_op(x.data[:, idx], (x,), None)
    if out.requires_grad:
        def bwd(g):
            gx = np.zeros_like(x.data)
            flat = g.reshape(g.shape[0], -1)
            np.add.at(gx.T, idx.ravel(), flat.T)
            x._accumulate(gx, own=True)
        out._backward = bwd
    return out


def take_per_row(x: Tensor, cols: np.ndarray) -> Tensor:
    """out[i] = x[i, cols[i]] for a 2-D tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = Tensor._from_op(x.data[rows, cols], (x,), None)
    if out.requires_grad:
        def bwd(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (rows, cols), g)
            x._accumulate(gx, own=True)
        out._backward = bwd
    return out


# ----- serialization (checkpoint tensor records) ----------------------------


def tensor_to_bytes(arr: np.ndarray, dtype=np.float32) -> bytes:
    """Rank byte, u64 little-endian extents, then row-major payload."""
    arr = np.ascontiguousarray(arr, dtype=dtype)
    head = bytes([arr.ndim])
    head += b"".join(np.uint64(e).tobytes() for e in arr.shape)
    return head + arr.astype("<" + np.dtype(dtype).str[1:]).tobytes()


def tensor_from_bytes(buf: bytes, offset: int, dtype=np.float32):
    """Inverse of tensor_to_bytes; returns (array, next_offset)."""
    rank = buf[offset]
    offset += 1
    shape = []
    for _ in range(rank):
        shape.append(int(np.frombuffer(buf, "<u8", 1, offset)[0]))
        offset += 8
    n = int(np.prod(shape)) if shape else 1
    dt = np.dtype(dtype).newbyteorder("<")
    arr = np.frombuffer(buf, dt, n, offset).reshape(shape).astype(dtype)
    offset += n * dt.itemsize
    return arr, offset


# ----- finite differences ---------------------------------------------------


def finite_diff_check(f, x: Tensor, h=1e-5, max_coords=None, rng=None):
    """Max relative error between backward() and central differences.

    f must be a pure scalar function of x (it may close over other fixed
    tensors).  When max_coords is given, a random subset of coordinates is
    probed instead of all of them.
    """
    x.zero_grad()
    y = f(x)
    y.backward()
    if x.grad is None:
        analytic = np.zeros_like(x.data)
    else:
        analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)

    ga = analytic.reshape(-1)
    worst = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        fp = float(f(x).data)
        flat[c] = orig - h
        fm = float(f(x).data)
        flat[c] = orig
        num = (fp - fm) / (2.0 * h)
        err = abs(num - ga[c]) / max(abs(num), abs(ga[c]), 1.0)
        worst = max(worst, err)
    return worst

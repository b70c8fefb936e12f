"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and records the operations applied to it; calling
``backward()`` on a scalar result walks the recorded graph in reverse and
accumulates gradients into every tensor created with ``requires_grad=True``.
Only the primitives the forecaster needs are implemented: elementwise
arithmetic with broadcasting, matmul, reductions, softmax, layer_norm, GELU,
trig (for rotary embeddings), slicing, row gather, concat and repeat.

Numpy ufuncs are blocked on Tensor operands (``__array_ufunc__ = None``) so an
unsupported primitive fails loudly, naming the operation, instead of silently
detaching from the graph.

Everything runs in float64 by default; ``set_default_dtype`` switches new
tensors to float32.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_default_dtype(dtype) -> None:
    """Select the dtype used for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("only float32 and float64 are supported")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    # Refuse numpy's operator dispatch: ops not defined here must raise,
    # not silently produce a detached ndarray.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic protocol ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph machinery ---------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad tensor."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data

        def bw(g, a=self, b=other):
            if a.requires_grad:
                a._acc(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._acc(_unbroadcast(g, b.data.shape))

        return _make(out_data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g, a=self):
            a._acc(-g)

        return _make(-self.data, (self,), bw)

    def __sub__(self, other):
        other = as_tensor(other)
        out_data = self.data - other.data

        def bw(g, a=self, b=other):
            if a.requires_grad:
                a._acc(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._acc(_unbroadcast(-g, b.data.shape))

        return _make(out_data, (self, other), bw)

    def __rsub__(self, other):
        return as_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data

        def bw(g, a=self, b=other):
            if a.requires_grad:
                a._acc(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._acc(_unbroadcast(g * a.data, b.data.shape))

        return _make(out_data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data

        def bw(g, a=self, b=other, o=out_data):
            if a.requires_grad:
                a._acc(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._acc(_unbroadcast(-g * o / b.data, b.data.shape))

        return _make(out_data, (self, other), bw)

    def __rtruediv__(self, other):
        return as_tensor(other).__truediv__(self)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data**exponent

        def bw(g, a=self, n=exponent):
            a._acc(g * n * a.data ** (n - 1))

        return _make(out_data, (self,), bw)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ValueError("matmul requires operands with ndim >= 2")
        out_data = self.data @ other.data

        def bw(g, a=self, b=other):
            if a.requires_grad:
                a._acc(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                b._acc(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

        return _make(out_data, (self, other), bw)

    # -- pointwise nonlinearities -------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bw(g, a=self, o=out_data):
            a._acc(g * o)

        return _make(out_data, (self,), bw)

    def log(self):
        out_data = np.log(self.data)

        def bw(g, a=self):
            a._acc(g / a.data)

        return _make(out_data, (self,), bw)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def bw(g, a=self, o=out_data):
            a._acc(g * 0.5 / o)

        return _make(out_data, (self,), bw)

    def tanh(self):
        out_data = np.tanh(self.data)

        def bw(g, a=self, o=out_data):
            a._acc(g * (1.0 - o * o))

        return _make(out_data, (self,), bw)

    def sin(self):
        out_data = np.sin(self.data)

        def bw(g, a=self):
            a._acc(g * np.cos(a.data))

        return _make(out_data, (self,), bw)

    def cos(self):
        out_data = np.cos(self.data)

        def bw(g, a=self):
            a._acc(-g * np.sin(a.data))

        return _make(out_data, (self,), bw)

    def gelu(self):
        """Exact (erf-based) Gaussian error linear unit."""
        phi = 0.5 * (1.0 + erf(self.data / _SQRT2))
        out_data = self.data * phi

        def bw(g, a=self, phi=phi):
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
            a._acc(g * (phi + a.data * pdf))

        return _make(out_data, (self,), bw)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = np.asarray(self.data.sum(axis=axis, keepdims=keepdims))

        def bw(g, a=self, axis=axis, keepdims=keepdims):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._acc(np.broadcast_to(gg, a.data.shape))

        return _make(out_data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[ax] for ax in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, shape):
        out_data = self.data.reshape(shape)

        def bw(g, a=self):
            a._acc(g.reshape(a.data.shape))

        return _make(out_data, (self,), bw)

    def transpose(self, axes):
        out_data = self.data.transpose(axes)
        inv = np.argsort(axes)

        def bw(g, a=self, inv=tuple(inv)):
            a._acc(g.transpose(inv))

        return _make(out_data, (self,), bw)

    def __getitem__(self, key):
        out_data = self.data[key]

        def bw(g, a=self, key=key):
            buf = np.zeros_like(a.data)
            if _has_array_index(key):
                np.add.at(buf, key, g)
            else:
                buf[key] += g
            a._acc(buf)

        return _make(np.asarray(out_data), (self,), bw)

    def take(self, indices, axis: int = 0):
        """Gather rows along axis 0 by integer index (duplicates allowed)."""
        if axis != 0:
            raise ValueError("take supports axis=0 only")
        idx = np.asarray(indices, dtype=np.intp)
        out_data = np.take(self.data, idx, axis=0)

        def bw(g, a=self, idx=idx):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._acc(buf)

        return _make(out_data, (self,), bw)

    def repeat(self, repeats: int, axis: int):
        """Repeat each slice ``repeats`` times along ``axis`` (np.repeat)."""
        out_data = np.repeat(self.data, repeats, axis=axis)

        def bw(g, a=self, repeats=repeats, axis=axis):
            shp = list(a.data.shape)
            g2 = g.reshape(shp[:axis] + [shp[axis], repeats] + shp[axis + 1 :])
            a._acc(g2.sum(axis=axis + 1))

        return _make(out_data, (self,), bw)

    # -- fused ops -------------------------------------------------------------

    def softmax(self, axis: int = -1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)

        def bw(g, a=self, y=y, axis=axis):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._acc(y * (g - dot))

        return _make(y, (self,), bw)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _has_array_index(key) -> bool:
    if isinstance(key, (np.ndarray, list)):
        return True
    if isinstance(key, tuple):
        return any(isinstance(k, (np.ndarray, list)) for k in key)
    return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g, parts=tensors, offs=offsets, axis=axis):
        for t, lo, hi in zip(parts, offs[:-1], offs[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._acc(g[tuple(sl)])

    return _make(out_data, tuple(tensors), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax; safe for logits with magnitude up to ~1e300."""
    return as_tensor(x).softmax(axis=axis)


def gelu(x: Tensor) -> Tensor:
    return as_tensor(x).gelu()


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance, then affine."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    offset = as_tensor(offset)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gain.data * xhat + offset.data

    def bw(g, x=x, gain=gain, offset=offset, xhat=xhat, inv=inv):
        if gain.requires_grad:
            gain._acc(_unbroadcast(g * xhat, gain.data.shape))
        if offset.requires_grad:
            offset._acc(_unbroadcast(g, offset.data.shape))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._acc(inv * (gx - m1 - xhat * m2))

    return _make(out_data, (x, gain, offset), bw)


def grad(f, params) -> list:
    """Evaluate scalar-valued ``f()`` and return d f / d p for each param."""
    for p in params:
        p.grad = None
    out = f()
    if not isinstance(out, Tensor):
        raise TypeError("f() must return a Tensor")
    out.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def finite_diff_grad(f, params, h: float = 1e-4) -> list:
    """Central-difference gradient oracle: (f(p+h) - f(p-h)) / 2h per coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f())
            flat[i] = old - h
            fm = float(f())
            flat[i] = old
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))

"""Minimal dense float64 tensor engine with reverse-mode automatic differentiation.

Covers exactly what the detector and GAN need: convolution (im2col fast path
plus a naive reference), elementwise activations, nearest upsampling,
reductions, indexing, and a binary checkpoint container.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.special import expit

# When True, every forward op validates that its output is finite.
CHECK_FINITE = True

_MAGIC = b"PCBD"
_VERSION = 1


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN/Inf."""


def _check(data: np.ndarray) -> np.ndarray:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value in forward pass")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-d float64 array node in a dynamically recorded tape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._prev: tuple = ()
        self.name = name

    # ---- construction helpers -------------------------------------------------

    @staticmethod
    def _op(data, prev, backward) -> "Tensor":
        out = Tensor(_check(data))
        out.requires_grad = any(p.requires_grad for p in prev)
        if out.requires_grad:
            out._prev = tuple(prev)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse pass from a scalar; fills .grad on every requires_grad node."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node)
        return self

    # ---- elementwise arithmetic ----------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        a, b = self, Tensor._wrap(other)

        def bw(out):
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.data.shape))

        return Tensor._op(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bw(out):
            a._accum(-out.grad)

        return Tensor._op(-a.data, (a,), bw)

    def __sub__(self, other):
        return self + (-Tensor._wrap(other))

    def __rsub__(self, other):
        return Tensor._wrap(other) + (-self)

    def __mul__(self, other):
        a, b = self, Tensor._wrap(other)

        def bw(out):
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.data.shape))

        return Tensor._op(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, Tensor._wrap(other)

        def bw(out):
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

        # A zero divisor surfaces as NonFiniteError from the output check, not
        # as a numpy warning.
        with np.errstate(divide="ignore", invalid="ignore"):
            quotient = a.data / b.data
        return Tensor._op(quotient, (a, b), bw)

    def __rtruediv__(self, other):
        return Tensor._wrap(other) / self

    def __pow__(self, exponent: float):
        a = self
        e = float(exponent)

        def bw(out):
            a._accum(out.grad * e * np.power(a.data, e - 1.0))

        return Tensor._op(np.power(a.data, e), (a,), bw)

    # ---- elementwise functions ------------------------------------------------

    def exp(self):
        a = self
        y = np.exp(a.data)

        def bw(out):
            a._accum(out.grad * out.data)

        return Tensor._op(y, (a,), bw)

    def log(self):
        a = self

        def bw(out):
            a._accum(out.grad / a.data)

        return Tensor._op(np.log(a.data), (a,), bw)

    def sqrt(self):
        a = self
        y = np.sqrt(a.data)

        def bw(out):
            a._accum(out.grad * 0.5 / out.data)

        return Tensor._op(y, (a,), bw)

    def atan(self):
        a = self

        def bw(out):
            a._accum(out.grad / (1.0 + a.data * a.data))

        return Tensor._op(np.arctan(a.data), (a,), bw)

    def sigmoid(self):
        a = self
        y = expit(a.data)

        def bw(out):
            a._accum(out.grad * out.data * (1.0 - out.data))

        return Tensor._op(y, (a,), bw)

    def leaky_relu(self, slope: float = 0.1):
        a = self

        def bw(out):
            a._accum(out.grad * np.where(a.data > 0, 1.0, slope))

        return Tensor._op(np.where(a.data > 0, a.data, slope * a.data), (a,), bw)

    def silu(self):
        a = self
        s = expit(a.data)

        def bw(out):
            a._accum(out.grad * (s + a.data * s * (1.0 - s)))

        return Tensor._op(a.data * s, (a,), bw)

    def maximum(self, floor: float):
        """Elementwise max with a constant; gradient passes where x > floor."""
        a = self

        def bw(out):
            a._accum(out.grad * (a.data > floor))

        return Tensor._op(np.maximum(a.data, floor), (a,), bw)

    def abs(self):
        a = self

        def bw(out):
            a._accum(out.grad * np.sign(a.data))

        return Tensor._op(np.abs(a.data), (a,), bw)

    # ---- reductions and shape ops --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(out):
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

        return Tensor._op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def bw(out):
            a._accum(out.grad.reshape(a.data.shape))

        return Tensor._op(a.data.reshape(shape), (a,), bw)

    def transpose(self, axes):
        a = self
        inv = np.argsort(axes)

        def bw(out):
            a._accum(out.grad.transpose(inv))

        return Tensor._op(a.data.transpose(axes), (a,), bw)

    def __getitem__(self, idx):
        a = self

        def bw(out):
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a._accum(g)

        return Tensor._op(a.data[idx], (a,), bw)

    def softmax(self, axis: int = -1):
        shifted = self - Tensor(self.data.max(axis=axis, keepdims=True))
        e = shifted.exp()
        return e / e.sum(axis=axis, keepdims=True)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def concat(tensors, axis: int = 0) -> Tensor:
    ts = list(tensors)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                t._accum(out.grad[tuple(sl)])

    return Tensor._op(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bw(out):
        if a.requires_grad:
            a._accum(out.grad @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ out.grad)

    return Tensor._op(a.data @ b.data, (a, b), bw)


# ---- convolution --------------------------------------------------------------


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """[N,C,H,W] -> [N, C, kh, kw, Ho, Wo] patch view (copied)."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def _col2im(cols: np.ndarray, in_shape, kh, kw, stride, pad) -> np.ndarray:
    n, c, h, w = in_shape
    ho, wo = cols.shape[4], cols.shape[5]
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, [F,C,kh,kw] kernel (im2col path)."""
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ValueError(f"kernel channels {ck} do not match input channels {c}")
    cols = _im2col(x.data, kh, kw, stride, padding)
    ho, wo = cols.shape[4], cols.shape[5]
    flat = cols.reshape(n, c * kh * kw, ho * wo)
    kflat = kernel.data.reshape(f, c * kh * kw)
    out_data = (kflat @ flat).reshape(n, f, ho, wo)

    def bw(out):
        g = out.grad.reshape(n, f, ho * wo)
        if kernel.requires_grad:
            gk = np.matmul(g, flat.transpose(0, 2, 1)).sum(axis=0)
            kernel._accum(gk.reshape(f, c, kh, kw))
        if x.requires_grad:
            gcols = np.matmul(kflat.T, g)
            gcols = gcols.reshape(n, c, kh, kw, ho, wo)
            x._accum(_col2im(gcols, x.data.shape, kh, kw, stride, padding))

    return Tensor._op(out_data, (x, kernel), bw)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution; kernel shape [C,kh,kw]."""
    n, c, h, w = x.data.shape
    ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ValueError(f"depthwise kernel channels {ck} != input channels {c}")
    cols = _im2col(x.data, kh, kw, stride, padding)
    out_data = np.einsum("ncklyx,ckl->ncyx", cols, kernel.data)

    def bw(out):
        if kernel.requires_grad:
            kernel._accum(np.einsum("ncklyx,ncyx->ckl", cols, out.grad))
        if x.requires_grad:
            gcols = np.einsum("ckl,ncyx->ncklyx", kernel.data, out.grad)
            x._accum(_col2im(gcols, x.data.shape, kh, kw, stride, padding))

    return Tensor._op(out_data, (x, kernel), bw)


def conv2d_reference(x: np.ndarray, kernel: np.ndarray, stride: int = 1,
                     padding: int = 0) -> np.ndarray:
    """Naive nested-loop convolution; the oracle the im2col path must match."""
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for yi in range(ho):
                for xi in range(wo):
                    patch = xp[ni, :, yi * stride:yi * stride + kh, xi * stride:xi * stride + kw]
                    out[ni, fi, yi, xi] = np.sum(patch * kernel[fi])
    return out


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel factor x factor; backward sums each block."""
    if factor < 2:
        raise ValueError("upsample factor must be >= 2")
    n, c, h, w = x.data.shape
    out_data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(out):
        g = out.grad.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        x._accum(g)

    return Tensor._op(out_data, (x,), bw)


# ---- creation -----------------------------------------------------------------


def full(shape, value: float) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"invalid tensor shape {shape}")
    return Tensor(np.full(shape, float(value)))


def uniform(shape, seed: int, low: float = 0.0, high: float = 1.0) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"invalid tensor shape {shape}")
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(low, high, size=shape))


def he_normal(shape, rng: np.random.Generator, fan_in: int) -> Tensor:
    t = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    t.requires_grad = True
    return t


# ---- checkpoint container -----------------------------------------------------


def save_checkpoint(path, tensors: dict) -> None:
    """Write named tensors to the little-endian "PCBD" binary container."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(tensors)))
        for name, t in tensors.items():
            arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    """Read a "PCBD" container back to {name: float64 ndarray}."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(f.read(8 * size), dtype="<f8").reshape(dims)
            out[name] = data.astype(np.float64)
        return out

"""Reverse-mode autodiff over numpy arrays.

Each op builds a node whose closure knows how to push the output gradient
back to its parents; ``Tensor.backward`` runs the closures in reverse
topological order.  Only what the restoration models and losses need is
implemented; everything works in whatever float dtype the leaves carry.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=()):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, seed=None) -> None:
        if seed is None:
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
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
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the parent's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    out = Tensor(a.data + b.data, parents=(a, b))

    def _backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = _backward
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    out = Tensor(a.data - b.data, parents=(a, b))

    def _backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    out._backward = _backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    out = Tensor(a.data * b.data, parents=(a, b))

    def _backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = _backward
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    out = Tensor(a.data / b.data, parents=(a, b))

    def _backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = _backward
    return out


def absolute(a: Tensor) -> Tensor:
    """|a| with subgradient 0 at 0 (np.sign(0) == 0)."""
    out = Tensor(np.abs(a.data), parents=(a,))

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    out._backward = _backward
    return out


def mean(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype), parents=(a,))

    def _backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / a.data.size, a.data.shape).astype(a.data.dtype))

    out._backward = _backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), parents=(a,))

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, parents=(a, b))

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward = _backward
    return out


def concat_channels(parts: list[Tensor]) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=1), parents=tuple(parts))
    sizes = [p.data.shape[1] for p in parts]

    def _backward(g):
        start = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                p._accumulate(g[:, start : start + size])
            start += size

    out._backward = _backward
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), parents=(a,))

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    out._backward = _backward
    return out


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    out = Tensor(np.where(a.data > 0, a.data, slope * a.data), parents=(a,))

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g * np.where(a.data > 0, 1.0, slope).astype(a.data.dtype))

    out._backward = _backward
    return out


def prelu(a: Tensor, slopes: Tensor) -> Tensor:
    """Channelwise parametric ReLU; ``slopes`` has shape (channels,)."""
    s = slopes.data.reshape(1, -1, 1, 1)
    out = Tensor(np.where(a.data > 0, a.data, s * a.data), parents=(a, slopes))

    def _backward(g):
        neg = a.data <= 0
        if a.requires_grad:
            a._accumulate(g * np.where(neg, s, 1.0).astype(a.data.dtype))
        if slopes.requires_grad:
            slopes._accumulate((g * a.data * neg).sum(axis=(0, 2, 3)))

    out._backward = _backward
    return out


def sigmoid(a: Tensor) -> Tensor:
    val = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(val, parents=(a,))

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g * val * (1.0 - val))

    out._backward = _backward
    return out


def global_avg_pool(a: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    out = Tensor(a.data.mean(axis=(2, 3)), parents=(a,))

    def _backward(g):
        if a.requires_grad:
            _, _, h, w = a.data.shape
            a._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), a.data.shape).astype(a.data.dtype))

    out._backward = _backward
    return out


def channel_affine(a: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel y = scale * x + shift; the stand-in for batch statistics."""
    s = scale.data.reshape(1, -1, 1, 1)
    t = shift.data.reshape(1, -1, 1, 1)
    out = Tensor(a.data * s + t, parents=(a, scale, shift))

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g * s)
        if scale.requires_grad:
            scale._accumulate((g * a.data).sum(axis=(0, 2, 3)))
        if shift.requires_grad:
            shift._accumulate(g.sum(axis=(0, 2, 3)))

    out._backward = _backward
    return out


def _reflect_index(n: int, pad: int) -> np.ndarray:
    if pad >= n:
        raise AutodiffError(f"reflect pad {pad} needs input extent > pad, got {n}")
    idx = np.arange(-pad, n + pad)
    idx = np.where(idx < 0, -idx, idx)
    idx = np.where(idx >= n, 2 * n - 2 - idx, idx)
    return idx


def pad_reflect(a: Tensor, pad: int) -> Tensor:
    """Reflect-pad the two spatial dims of a (B, C, H, W) tensor."""
    if pad == 0:
        return a
    _, _, h, w = a.data.shape
    rows = _reflect_index(h, pad)
    cols = _reflect_index(w, pad)
    out = Tensor(a.data[:, :, rows[:, None], cols[None, :]], parents=(a,))

    def _backward(g):
        if a.requires_grad:
            gx = np.zeros_like(a.data)
            np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
            a._accumulate(gx)

    out._backward = _backward
    return out


def conv2d(a: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Valid cross-correlation: a (B,Cin,H,W) with weight (Cout,Cin,kh,kw).

    Output spatial extent shrinks by dilation*(k-1); callers pad first.
    """
    x, w = a.data, weight.data
    b_, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise AutodiffError(f"conv channel mismatch: input {cin}, weight {cin_w}")
    hout = h - dilation * (kh - 1)
    wout = wd - dilation * (kw - 1)
    if hout < 1 or wout < 1:
        raise AutodiffError(f"conv input {h}x{wd} too small for kernel {kh}x{kw} dilation {dilation}")

    y = np.zeros((b_, cout, hout, wout), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = x[:, :, u * dilation : u * dilation + hout, v * dilation : v * dilation + wout]
            y += np.einsum("bchw,oc->bohw", xs, w[:, :, u, v], optimize=True)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1)
    parents = (a, weight) if bias is None else (a, weight, bias)
    out = Tensor(y, parents=parents)

    def _backward(g):
        if a.requires_grad:
            gx = np.zeros_like(x)
            for u in range(kh):
                for v in range(kw):
                    gx[:, :, u * dilation : u * dilation + hout, v * dilation : v * dilation + wout] += np.einsum(
                        "bohw,oc->bchw", g, w[:, :, u, v], optimize=True
                    )
            a._accumulate(gx)
        if weight.requires_grad:
            gw = np.zeros_like(w)
            for u in range(kh):
                for v in range(kw):
                    xs = x[:, :, u * dilation : u * dilation + hout, v * dilation : v * dilation + wout]
                    gw[:, :, u, v] = np.einsum("bohw,bchw->oc", g, xs, optimize=True)
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    out._backward = _backward
    return out


def blur_valid(a: Tensor, kernel: np.ndarray) -> Tensor:
    """Apply one fixed 2D kernel to every channel, valid mode.

    The kernel is a constant (no gradient); used for windowed statistics.
    """
    x = a.data
    kh, kw = kernel.shape
    hout = x.shape[2] - (kh - 1)
    wout = x.shape[3] - (kw - 1)
    if hout < 1 or wout < 1:
        raise AutodiffError(f"window {kh}x{kw} larger than input {x.shape[2]}x{x.shape[3]}")
    k = kernel.astype(x.dtype)
    y = np.zeros((x.shape[0], x.shape[1], hout, wout), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            y += k[u, v] * x[:, :, u : u + hout, v : v + wout]
    out = Tensor(y, parents=(a,))

    def _backward(g):
        if a.requires_grad:
            gx = np.zeros_like(x)
            for u in range(kh):
                for v in range(kw):
                    gx[:, :, u : u + hout, v : v + wout] += k[u, v] * g
            a._accumulate(gx)

    out._backward = _backward
    return out

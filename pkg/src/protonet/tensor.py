"""Dense float64 tensors with reverse-mode gradients.

A small tape: every op records its parents and a backward closure; calling
`backward()` on a scalar walks the graph in reverse topological order and
accumulates gradients into every reachable tensor with `requires_grad`.
Convolution inner loops are delegated to `protonet.kernels`.
"""

import math
from dataclasses import dataclass

import numpy as np

from protonet import kernels


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent; names the offending dimension."""


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one (de)convolution: kernel size, stride, padding, channels."""
    kernel_h: int
    kernel_w: int
    stride: int
    padding: str  # "same" | "valid"
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        for field in ("kernel_h", "kernel_w", "stride", "in_channels", "out_channels"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")

    def out_extent(self, extent: int, axis: str = "h") -> int:
        k = self.kernel_h if axis == "h" else self.kernel_w
        if self.padding == "same":
            return -(-extent // self.stride)  # ceil
        if extent < k:
            raise ShapeError(f"input {axis}-extent {extent} smaller than kernel {k} with valid padding")
        return (extent - k) // self.stride + 1

    def pad_amounts(self, in_h: int, in_w: int):
        """(top, bottom, left, right) zero padding; odd totals go bottom/right."""
        if self.padding == "valid":
            return (0, 0, 0, 0)
        out_h = self.out_extent(in_h, "h")
        out_w = self.out_extent(in_w, "w")
        total_h = max((out_h - 1) * self.stride + self.kernel_h - in_h, 0)
        total_w = max((out_w - 1) * self.stride + self.kernel_w - in_w, 0)
        return (total_h // 2, total_h - total_h // 2,
                total_w // 2, total_w - total_w // 2)


class Tensor:
    """n-d float64 array plus gradient slot and backward tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
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
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise ShapeError(f"add: shapes {self.shape} vs {other.shape}")
            out = Tensor(self.data + other.data, _parents=(self, other))

            def bw(g):
                self._accumulate(g)
                other._accumulate(g)
            out._backward = bw
            return out
        out = Tensor(self.data + other, _parents=(self,))
        out._backward = lambda g: self._accumulate(g)
        return out

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise ShapeError(f"mul: shapes {self.shape} vs {other.shape}")
            out = Tensor(self.data * other.data, _parents=(self, other))

            def bw(g):
                self._accumulate(g * other.data)
                other._accumulate(g * self.data)
            out._backward = bw
            return out
        out = Tensor(self.data * other, _parents=(self,))
        out._backward = lambda g: self._accumulate(g * other)
        return out

    __rmul__ = __mul__
    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + -other

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), _parents=(self,))
        out._backward = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out

    def sum(self):
        out = Tensor(self.data.sum(), _parents=(self,))
        out._backward = lambda g: self._accumulate(np.broadcast_to(g, self.data.shape))
        return out

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError("transpose expects a 2-d tensor")
        out = Tensor(self.data.T, _parents=(self,))
        out._backward = lambda g: self._accumulate(g.T)
        return out

    def matmul(self, other: "Tensor") -> "Tensor":
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError("matmul expects 2-d tensors")
        if self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul: inner dims {self.shape[1]} vs {other.shape[0]}")
        out = Tensor(self.data @ other.data, _parents=(self, other))

        def bw(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)
        out._backward = bw
        return out

    def add_rowvec(self, vec: "Tensor") -> "Tensor":
        """Broadcast-add a length-m vector to every row of a [n, m] tensor."""
        if self.data.ndim != 2 or vec.data.ndim != 1 or self.shape[1] != vec.shape[0]:
            raise ShapeError(f"add_rowvec: {self.shape} vs {vec.shape}")
        out = Tensor(self.data + vec.data, _parents=(self, vec))

        def bw(g):
            self._accumulate(g)
            vec._accumulate(g.sum(axis=0))
        out._backward = bw
        return out

    def clip(self, lo: float, hi: float) -> "Tensor":
        out = Tensor(np.clip(self.data, lo, hi), _parents=(self,))
        mask = (self.data >= lo) & (self.data <= hi)
        out._backward = lambda g: self._accumulate(g * mask)
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), _parents=(self,))
        out._backward = lambda g: self._accumulate(g / self.data)
        return out

    def pick(self, indices) -> "Tensor":
        """Select entry indices[i] from row i of a [n, m] tensor -> [n]."""
        idx = np.asarray(indices, dtype=np.int64)
        n, m = self.shape
        if idx.shape != (n,):
            raise ShapeError(f"pick: index length {idx.shape} vs rows {n}")
        if idx.min() < 0 or idx.max() >= m:
            raise IndexError(f"pick: index out of range [0, {m})")
        rows = np.arange(n)
        out = Tensor(self.data[rows, idx], _parents=(self,))

        def bw(g):
            full = np.zeros_like(self.data)
            full[rows, idx] = g
            self._accumulate(full)
        out._backward = bw
        return out

    def min_along(self, axis: int) -> "Tensor":
        """Minimum over one axis of a 2-d tensor; ties route the subgradient
        to the lowest index (np.argmin convention)."""
        if self.data.ndim != 2:
            raise ShapeError("min_along expects a 2-d tensor")
        arg = np.argmin(self.data, axis=axis)
        out_data = np.take_along_axis(self.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
        out = Tensor(out_data, _parents=(self,))

        def bw(g):
            full = np.zeros_like(self.data)
            if axis == 0:
                full[arg, np.arange(self.shape[1])] = g
            else:
                full[np.arange(self.shape[0]), arg] = g
            self._accumulate(full)
        out._backward = bw
        return out


# ---- nonlinearities -------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(out_data, _parents=(x,))
    out._backward = lambda g: x._accumulate(g * out_data * (1.0 - out_data))
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,))
    out._backward = lambda g: x._accumulate(g * (x.data > 0))
    return out


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    out = Tensor(np.where(x.data > 0, x.data, slope * x.data), _parents=(x,))
    out._backward = lambda g: x._accumulate(g * np.where(x.data > 0, 1.0, slope))
    return out


def softmax(x: Tensor) -> Tensor:
    """Row softmax with max subtraction; accepts [n, K] or [K]."""
    d = x.data if x.data.ndim == 2 else x.data[None, :]
    shifted = d - d.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out_data = p if x.data.ndim == 2 else p[0]
    out = Tensor(out_data, _parents=(x,))

    def bw(g):
        g2 = g if g.ndim == 2 else g[None, :]
        dot = (g2 * p).sum(axis=1, keepdims=True)
        dx = p * (g2 - dot)
        x._accumulate(dx if x.data.ndim == 2 else dx[0])
    out._backward = bw
    return out


# ---- distance layer -------------------------------------------------------

def pairwise_sq_dist(z: Tensor, p: Tensor) -> Tensor:
    """Squared L2 distances: out[i, j] = ||z_i - p_j||^2 for z[n,q], p[m,q]."""
    if z.data.ndim != 2 or p.data.ndim != 2:
        raise ShapeError("pairwise_sq_dist expects 2-d tensors")
    if z.shape[1] != p.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: feature dims {z.shape[1]} vs {p.shape[1]}")
    zz = (z.data ** 2).sum(axis=1)[:, None]
    pp = (p.data ** 2).sum(axis=1)[None, :]
    d = np.maximum(zz + pp - 2.0 * (z.data @ p.data.T), 0.0)
    out = Tensor(d, _parents=(z, p))

    def bw(g):
        z._accumulate(2.0 * (g.sum(axis=1, keepdims=True) * z.data - g @ p.data))
        p._accumulate(2.0 * (g.sum(axis=0)[:, None] * p.data - g.T @ z.data))
    out._backward = bw
    return out


# ---- convolutions ---------------------------------------------------------

def _check_conv_shapes(x, kernel, bias, spec, transposed):
    if x.data.ndim != 4:
        raise ShapeError(f"conv input must be 4-d NHWC, got ndim={x.data.ndim}")
    kh, kw = kernel.shape[0], kernel.shape[1]
    if (kh, kw) != (spec.kernel_h, spec.kernel_w):
        raise ShapeError(f"kernel spatial dims {(kh, kw)} vs spec {(spec.kernel_h, spec.kernel_w)}")
    cin_axis = 1 if transposed else 0
    if kernel.shape[2 + cin_axis] != x.shape[3]:
        raise ShapeError(f"kernel channel dim {kernel.shape[2 + cin_axis]} vs input channels {x.shape[3]}")
    out_ch = kernel.shape[2 + (1 - cin_axis)]
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError(f"bias shape {bias.shape} vs output channels {out_ch}")


def conv2d(x: Tensor, kernel: Tensor, bias, spec: ConvSpec) -> Tensor:
    """Strided cross-correlation, NHWC in, kernel [kh,kw,Cin,Cout]."""
    _check_conv_shapes(x, kernel, bias, spec, transposed=False)
    n, h, w, _ = x.shape
    pt, pb, pl, pr = spec.pad_amounts(h, w)
    out_h = spec.out_extent(h, "h")
    out_w = spec.out_extent(w, "w")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    y = kernels.conv2d_forward(xp, kernel.data, spec.stride, out_h, out_w)
    if bias is not None:
        y = y + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = Tensor(y, _parents=parents)

    def bw(g):
        g = np.ascontiguousarray(g)
        dxp = kernels.conv2d_backward_input(g, kernel.data, spec.stride,
                                            xp.shape[1], xp.shape[2])
        x._accumulate(dxp[:, pt:pt + h, pl:pl + w, :])
        kernel._accumulate(kernels.conv2d_backward_kernel(
            xp, g, spec.kernel_h, spec.kernel_w, spec.stride))
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 1, 2)))
    out._backward = bw
    return out


def deconv2d(x: Tensor, kernel: Tensor, bias, spec: ConvSpec,
             out_h: int, out_w: int) -> Tensor:
    """Transposed convolution (adjoint of conv2d), kernel [kh,kw,Cout,Cin].

    The target spatial extents are explicit because strided valid convolution
    is not shape-invertible; callers must pick (out_h, out_w) such that the
    mirrored conv2d maps them back onto x's extents.
    """
    _check_conv_shapes(x, kernel, bias, spec, transposed=True)
    n, h, w, _ = x.shape
    if spec.out_extent(out_h, "h") != h or spec.out_extent(out_w, "w") != w:
        raise ShapeError(
            f"deconv target {(out_h, out_w)} does not map back to input "
            f"extents {(h, w)} under {spec.padding} padding, stride {spec.stride}")
    pt, pb, pl, pr = spec.pad_amounts(out_h, out_w)
    pad_h = out_h + pt + pb
    pad_w = out_w + pl + pr
    xc = np.ascontiguousarray(x.data)
    yp = kernels.conv2d_backward_input(xc, kernel.data, spec.stride, pad_h, pad_w)
    y = yp[:, pt:pt + out_h, pl:pl + out_w, :]
    if bias is not None:
        y = y + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = Tensor(y, _parents=parents)

    def bw(g):
        gp = np.pad(g, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        x._accumulate(kernels.conv2d_forward(gp, kernel.data, spec.stride, h, w))
        kernel._accumulate(kernels.conv2d_backward_kernel(
            gp, xc, spec.kernel_h, spec.kernel_w, spec.stride))
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 1, 2)))
    out._backward = bw
    return out


# ---- gradient checking ----------------------------------------------------

def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of scalar f(x) and
    central finite differences, denominator max(|analytic|, |numeric|, 1e-8)."""
    x.zero_grad()
    y = f(x)
    if not np.isfinite(y.data).all():
        raise FloatingPointError("non-finite value in forward pass")
    y.backward()
    analytic = np.array(x.grad, copy=True)
    if not np.isfinite(analytic).all():
        raise FloatingPointError("non-finite value in backward pass")
    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x.data.copy())).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x.data.copy())).data)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError("non-finite value while perturbing input")
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(x.data.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))

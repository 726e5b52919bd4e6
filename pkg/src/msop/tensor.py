"""Dense tensors with reverse-mode automatic differentiation.

Every layer in this package is built from the primitives here: elementwise
arithmetic, matmul, 2-D convolution (cross-correlation orientation, no kernel
flip), axis permutation, channel split/concat, pooling, and a fused
softmax cross-entropy.  The computation graph is implicit: each tensor
produced by an op keeps references to its parents and a closure that routes
the incoming gradient to them.  ``Tensor.backward`` walks that graph once in
reverse topological order, so a parameter used several times accumulates the
sum of all its contributions.

Arrays are float64 by default; ``set_default_dtype(np.float32)`` switches the
whole engine to single precision (gradient checks need float64).  Tensors are
treated as immutable once created by the forward pass; only ``grad`` buffers
and optimizer updates mutate arrays in place, and those are confined to the
training thread.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

_default_dtype = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


def set_default_dtype(dtype) -> None:
    """Switch the element type used by newly created tensors."""
    global _default_dtype
    if dtype not in (np.float32, np.float64):
        raise ValueError("supported dtypes are float32 and float64")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


class Tensor:
    """N-dimensional array plus the bookkeeping needed for backprop.

    ``grad`` stays ``None`` until ``backward`` (or ``zero_grad``) touches the
    tensor; it always has the same shape as ``data`` afterwards.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad.

        The root must be a scalar (one element).  Parameters that do not
        appear in the graph are untouched; seed them with ``zero_grad`` first
        if a zero gradient is expected.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root tensor")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Small operator sugar; the module-level functions are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, axes):
        return permute(self, axes)


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; recursion would overflow on deep layer stacks.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def zero_grad(tensors: Iterable[Tensor]) -> None:
    """Reset gradients to zero arrays (creating them if absent)."""
    for t in tensors:
        t.grad = np.zeros_like(t.data)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Sum out the axes numpy broadcast when going forward.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * c

    def backward(g):
        if a.requires_grad:
            a._accum(g * c)

    return _result(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape} do not chain")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _result(data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accum(g.reshape(a.shape))

    return _result(data, (a,), backward)


def permute(a: Tensor, axes) -> Tensor:
    """Reorder axes; output[axes-applied index] == input[index]."""
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"axes {axes} is not a permutation of 0..{a.ndim - 1}")
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accum(np.transpose(g, inverse))

    return _result(data, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accum(np.full(a.shape, float(g)))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accum(np.broadcast_to(gg, a.shape).copy())

    return _result(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accum(g * (a.data > 0))

    return _result(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            a._accum(g * data * (1.0 - data))

    return _result(data, (a,), backward)


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    """Split a rank-3 H x W x D map into `parts` contiguous channel slices."""
    if x.ndim != 3:
        raise ShapeError("split_channels expects an H x W x D tensor")
    d = x.shape[2]
    if parts <= 0 or d % parts != 0:
        raise ShapeError(f"channel count {d} not divisible into {parts} parts")
    width = d // parts
    slices = []
    for i in range(parts):
        lo = i * width
        data = x.data[:, :, lo:lo + width].copy()

        def backward(g, lo=lo, width=width):
            if x.requires_grad:
                full = np.zeros_like(x.data)
                full[:, :, lo:lo + width] = g
                x._accum(full)

        slices.append(_result(data, (x,), backward))
    return slices


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one slice")
    for p in parts:
        if p.ndim != 3 or p.shape[:2] != parts[0].shape[:2]:
            raise ShapeError("concat_channels slices must share H x W")
    data = np.concatenate([p.data for p in parts], axis=2)
    offsets = np.cumsum([0] + [p.shape[2] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accum(g[:, :, lo:hi])

    return _result(data, tuple(parts), backward)


def _conv_padding(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("'same' padding requires odd kernel dims")
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        return (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)
    if padding == "valid":
        return (0, 0), (0, 0)
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same",
           bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation of an H x W x D_in map with kh x kw x D_in x D_out kernels.

    No kernel flip is applied (deep-learning convention).  "same" pads with
    zeros so stride 1 preserves the spatial dims.
    """
    if x.ndim != 3:
        raise ShapeError("conv2d input must be H x W x D")
    if w.ndim != 4:
        raise ShapeError("conv2d kernels must be kh x kw x D_in x D_out")
    h, wd, d_in = x.shape
    kh, kw, kd_in, d_out = w.shape
    if d_in != kd_in:
        raise ShapeError(f"input has {d_in} channels, kernels expect {kd_in}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if bias is not None and bias.shape != (d_out,):
        raise ShapeError(f"bias must have shape ({d_out},)")

    (pt, pb), (pl, pr) = _conv_padding(h, wd, kh, kw, stride, padding)
    xp = np.pad(x.data, ((pt, pb), (pl, pr), (0, 0)))
    hp, wp = xp.shape[0], xp.shape[1]
    if hp < kh or wp < kw:
        raise ShapeError("kernel larger than (padded) input")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("convolution output has zero-size spatial dims")

    # windows: (oh, ow, d_in, kh, kw) view of the padded input
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    windows = windows[::stride, ::stride]
    data = np.tensordot(windows, w.data, axes=((3, 4, 2), (0, 1, 2)))
    if bias is not None:
        data = data + bias.data

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        if w.requires_grad:
            dw = np.tensordot(windows, g, axes=((0, 1), (0, 1)))
            w._accum(dw.transpose(1, 2, 0, 3))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 1)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[ki:ki + oh * stride:stride,
                        kj:kj + ow * stride:stride] += g @ w.data[ki, kj].T
            x._accum(dxp[pt:pt + h, pl:pl + wd])

    return _result(data, parents, backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; odd edges average the clipped window.

    Output spatial dims are ceil(H/2) x ceil(W/2).
    """
    if x.ndim != 3:
        raise ShapeError("avg_pool2 expects an H x W x D tensor")
    h, w, d = x.shape
    oh, ow = -(-h // 2), -(-w // 2)
    xp = np.pad(x.data, ((0, 2 * oh - h), (0, 2 * ow - w), (0, 0)))
    counts = np.outer(np.where(np.arange(oh) * 2 + 1 < h, 2, min(2, h - (oh - 1) * 2)),
                      np.where(np.arange(ow) * 2 + 1 < w, 2, min(2, w - (ow - 1) * 2)))
    sums = xp.reshape(oh, 2, ow, 2, d).sum(axis=(1, 3))
    data = sums / counts[:, :, None]

    def backward(g):
        if not x.requires_grad:
            return
        gg = g / counts[:, :, None]
        dxp = np.repeat(np.repeat(gg, 2, axis=0), 2, axis=1)
        x._accum(dxp[:h, :w])

    return _result(data, (x,), backward)


def softmax_cross_entropy(logits: Tensor, true_class: int) -> Tensor:
    """Cross-entropy of softmax(logits) against a hard label.

    Stabilized with the log-sum-exp max shift; the gradient w.r.t. logits is
    softmax(logits) - one_hot(true_class).
    """
    if logits.ndim != 1:
        raise ValueError("logits must be a 1-D tensor")
    k = logits.shape[0]
    if k < 2:
        raise ValueError("need at least 2 classes")
    true_class = int(true_class)
    if not 0 <= true_class < k:
        raise ValueError(f"class index {true_class} out of range for {k} classes")
    z = logits.data
    m = z.max()
    exps = np.exp(z - m)
    lse = m + math.log(exps.sum())
    probs = exps / exps.sum()
    data = np.asarray(lse - z[true_class])

    def backward(g):
        if logits.requires_grad:
            grad = probs.copy()
            grad[true_class] -= 1.0
            logits._accum(float(g) * grad)

    return _result(data, (logits,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax (forward only), max-shifted for stability."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray],
             buffers: list[np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> None:
    """One SGD update with momentum and L2 weight decay, in place.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    for p, g, v in zip(params, grads, buffers, strict=True):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError("param/grad/buffer shapes differ")
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v


class SGD:
    """Momentum SGD over a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = []
        for p in self.params:
            if p.grad is None:
                raise ValueError("parameter has no gradient; run backward first")
            grads.append(p.grad)
        sgd_step([p.data for p in self.params], grads, self.buffers,
                 self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        zero_grad(self.params)


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(_default_dtype)

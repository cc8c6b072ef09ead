"""Dense tensors with reverse-mode automatic differentiation.

Every op records a closure that maps the output gradient to input gradients.
Forward values are computed in the dtype of the inputs, so the same graph can be
re-executed in float64 by the gradient checker while model state stays float32.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class GraphError(RuntimeError):
    """Raised when backward is requested on a tensor without a recorded graph."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            dtype = dtype or data.dtype
            data = data.data
        if dtype is None:
            dtype = DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype, copy=None)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = ""

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.op = op
        return out

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into the ``grad`` of every leaf that requires it."""
        if not self.requires_grad:
            raise GraphError("no graph: tensor does not require grad (detached or constant)")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward without explicit grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.dtype)
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators --------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else DEFAULT_DTYPE)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    out = xd**exponent
    return Tensor._make(out, (x,), lambda g: (g * exponent * xd ** (exponent - 1),), "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return Tensor._make(out, (x,), lambda g: (-g * out * out,), "reciprocal")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return Tensor._make(out, (x,), backward, "gelu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return Tensor._make(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),), "silu")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.logaddexp(0, xd).astype(xd.dtype), (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return Tensor._make(xd * mask, (x,), lambda g: (g * mask,), "relu")


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = ("gelu", "silu", "relu", "none")


def activation(name: str) -> Callable[[Tensor], Tensor]:
    """The named activation, resolved at call time so a patched op is picked up everywhere."""
    if name not in ACTIVATIONS:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}")
    if name == "none":
        return identity
    return lambda x: globals()[name](x)


# -- reductions & shape ----------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for tensor of rank {ndim}")
        out.append(a % ndim)
    return tuple(out)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axes, keepdims) * (1.0 / n)


def mean_var(x: Tensor, axis, keepdims: bool = True) -> tuple[Tensor, Tensor]:
    """Mean and population (biased) variance along ``axis``."""
    mu = tmean(x, axis, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis, keepdims=True)
    if not keepdims:
        axes = _norm_axes(axis, x.ndim)
        keep = tuple(n for i, n in enumerate(x.shape) if i not in axes)
        mu, var = mu.reshape(keep), var.reshape(keep)
    return mu, var


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return Tensor._make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.asarray(x.data[index]), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ShapeError(f"concat: shape {t.shape} does not match {tensors[0].shape} off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner axis mismatch {a.shape[-1]} vs {b.shape[-2]} ({a.shape} @ {b.shape})")
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2 and ad.ndim > 2:
            # shared weight: fold every leading axis into one matmul
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward, "softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of −log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    bsz, ncls = logits.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch of {bsz}")
    if labels.size and (labels.min() < 0 or labels.max() >= ncls):
        raise ValueError(f"label out of range [0, {ncls}): {labels.min()}..{labels.max()}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(bsz)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=z.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / bsz,)

    return Tensor._make(loss, (logits,), backward, "cross_entropy")


# -- convolutions ------------------------------------------------------------

def _padding(padding) -> tuple[int, int]:
    if isinstance(padding, int):
        return padding, padding
    left, right = padding
    return int(left), int(right)


def conv_output_length(length: int, kernel: int, stride: int = 1, padding=0) -> int:
    pl, pr = _padding(padding)
    return (length + pl + pr - kernel) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding=0, groups: int = 1) -> Tensor:
    """Grouped 1-D cross-correlation over (B, Cin, L) with weights (Cout, Cin/groups, P).

    ``padding`` is an int (both sides) or a ``(left, right)`` pair; causal convs use ``(P-1, 0)``.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d input must be (B, Cin, L), got {x.shape}")
    bsz, cin, length = x.shape
    cout, cg, ksize = w.shape
    if cin % groups:
        raise ShapeError(f"conv1d: input channels axis ({cin}) not divisible by groups={groups}")
    if cout % groups:
        raise ShapeError(f"conv1d: output channels axis ({cout}) not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"conv1d: weight in-channel axis is {cg}, expected Cin/groups = {cin // groups}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv1d: bias axis has {b.shape}, expected ({cout},)")
    pl, pr = _padding(padding)
    if length + pl + pr < ksize:
        raise ShapeError(f"conv1d: time axis ({length} + padding {pl + pr}) shorter than kernel {ksize}")
    og = cout // groups
    tout = (length + pl + pr - ksize) // stride + 1
    xd, wd = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pl, pr))) if pl or pr else xd
    span = stride * (tout - 1) + 1

    if cg == 1:
        # one input channel per group: accumulate over kernel taps
        xg = xp.reshape(bsz, groups, 1, xp.shape[-1])
        wg = wd.reshape(groups, og, ksize)
        out = np.zeros((bsz, groups, og, tout), dtype=xd.dtype)
        for p in range(ksize):
            out += wg[None, :, :, p, None] * xg[:, :, :, p : p + span : stride]
        out = out.reshape(bsz, cout, tout)

        def backward_taps(g):
            gg = g.reshape(bsz, groups, og, tout)
            gxp = np.zeros((bsz, groups, xp.shape[-1]), dtype=xd.dtype)
            gw = np.empty_like(wg)
            for p in range(ksize):
                xs = xg[:, :, 0, p : p + span : stride]
                gw[:, :, p] = np.einsum("bgot,bgt->go", gg, xs)
                gxp[:, :, p : p + span : stride] += np.einsum("bgot,go->bgt", gg, wg[:, :, p])
            gx = gxp.reshape(bsz, cin, -1)[:, :, pl : pl + length]
            gb = g.sum(axis=(0, 2)) if b is not None else None
            return gx, gw.reshape(wd.shape), gb

        backward = backward_taps
    else:
        cols = sliding_window_view(xp, ksize, axis=2)[:, :, ::stride, :]  # (B, Cin, T, P)
        cols = cols.reshape(bsz, groups, cg, tout, ksize).transpose(0, 1, 3, 2, 4).reshape(bsz, groups, tout, cg * ksize)
        wmat = wd.reshape(groups, og, cg * ksize).transpose(0, 2, 1)  # (G, cg*P, og)
        out = (cols @ wmat).transpose(0, 1, 3, 2).reshape(bsz, cout, tout)

        def backward_cols(g):
            go = g.reshape(bsz, groups, og, tout).transpose(0, 1, 3, 2)  # (B, G, T, og)
            gw = np.einsum("bgtk,bgto->gok", cols, go).reshape(wd.shape)
            gcols = (go @ wmat.transpose(0, 2, 1)).reshape(bsz, groups, tout, cg, ksize)
            gcols = gcols.transpose(0, 1, 3, 2, 4).reshape(bsz, cin, tout, ksize)
            gxp = np.zeros((bsz, cin, xp.shape[-1]), dtype=xd.dtype)
            for p in range(ksize):
                gxp[:, :, p : p + span : stride] += gcols[..., p]
            gx = gxp[:, :, pl : pl + length]
            gb = g.sum(axis=(0, 2)) if b is not None else None
            return gx, gw, gb

        backward = backward_cols

    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data[None, :, None]
        parents = (x, w, b)
    return Tensor._make(np.ascontiguousarray(out), parents, backward, "conv1d")


def pointwise_conv(x: Tensor, w: Tensor, b: Optional[Tensor] = None, groups: int = 1) -> Tensor:
    """Kernel-size-1 grouped conv over (B, Cin, *spatial); weights (Cout, Cin/groups)."""
    if x.ndim < 2:
        raise ShapeError(f"pointwise_conv input must be (B, C, ...), got {x.shape}")
    bsz, cin = x.shape[:2]
    spatial = x.shape[2:]
    cout, cg = w.shape
    if cin % groups:
        raise ShapeError(f"pointwise_conv: input channels axis ({cin}) not divisible by groups={groups}")
    if cout % groups:
        raise ShapeError(f"pointwise_conv: output channels axis ({cout}) not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"pointwise_conv: weight in-channel axis is {cg}, expected Cin/groups = {cin // groups}")
    og = cout // groups
    n = int(np.prod(spatial)) if spatial else 1
    xg = x.data.reshape(bsz, groups, cg, n)
    wg = w.data.reshape(groups, og, cg)
    out = (wg[None] @ xg).reshape((bsz, cout) + spatial)

    def backward(g):
        gg = g.reshape(bsz, groups, og, n)
        gw = (
            gg.transpose(1, 2, 0, 3).reshape(groups, og, bsz * n) @ xg.transpose(1, 0, 3, 2).reshape(groups, bsz * n, cg)
        ).reshape(cout, cg)
        gx = (wg.transpose(0, 2, 1)[None] @ gg).reshape(x.shape)
        gb = gg.sum(axis=(0, 3)).reshape(cout) if b is not None else None
        return gx, gw, gb

    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data.reshape((1, cout) + (1,) * len(spatial))
        parents = (x, w, b)
    return Tensor._make(out, parents, backward, "pointwise_conv")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Per-channel 2-D cross-correlation with "same" zero padding; weights (C, kh, kw), both odd."""
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv2d input must be (B, C, H, W), got {x.shape}")
    bsz, ch, h, wd_ = x.shape
    if w.ndim != 3 or w.shape[0] != ch:
        raise ShapeError(f"depthwise_conv2d: weight {w.shape} does not match channel axis {ch}")
    kh, kw = w.shape[1:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"depthwise_conv2d: kernel ({kh}, {kw}) must be odd for same padding")
    ph, pw = kh // 2, kw // 2
    xd, wt = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros_like(xd)
    for i in range(kh):
        for j in range(kw):
            out += wt[None, :, i, j, None, None] * xp[:, :, i : i + h, j : j + wd_]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wt)
        for i in range(kh):
            for j in range(kw):
                gw[:, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i : i + h, j : j + wd_])
                gxp[:, :, i : i + h, j : j + wd_] += wt[None, :, i, j, None, None] * g
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gxp[:, :, ph : ph + h, pw : pw + wd_], gw, gb

    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)
    return Tensor._make(out, parents, backward, "depthwise_conv2d")


# -- normalization -----------------------------------------------------------

def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis except channel axis 1.

    In training mode the batch statistics (biased variance) normalize the input and the
    running buffers are updated in place; in eval mode the running buffers are used.
    """
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm: channel axis of {x.shape} does not match gamma {gamma.shape}")
    ch = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, ch) + (1,) * (x.ndim - 2)
    xd = x.data
    gd, bd = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    if training:
        mu = xd.mean(axis=axes, keepdims=True)
        var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(ch).astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(ch).astype(running_var.dtype)
    else:
        mu = running_mean.reshape(bshape).astype(xd.dtype)
        var = running_var.reshape(bshape).astype(xd.dtype)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * invstd
    out = gd * xhat + bd
    n = xd.size // ch

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes).reshape(ch)
        gbeta = g.sum(axis=axes).reshape(ch)
        gxhat = g * gd
        if training:
            gx = invstd / n * (
                n * gxhat - gxhat.sum(axis=axes, keepdims=True) - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * invstd
        return gx, ggamma, gbeta

    return Tensor._make(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "batchnorm")


# -- selective scan ----------------------------------------------------------

def selective_scan(u: Tensor, delta: Tensor, a: Tensor, bmat: Tensor, cmat: Tensor, dskip: Tensor) -> Tensor:
    """Input-dependent linear recurrence along the last (time) axis.

    Shapes: u, delta (B, E, T); a (E, S); bmat, cmat (B, S, T); dskip (E,).
    For each step: h_t = exp(delta_t·a) ⊙ h_{t-1} + delta_t·B_t·u_t and
    y_t = <C_t, h_t> + dskip·u_t, starting from h_0 = 0.
    """
    bsz, e, t_len = u.shape
    s = a.shape[1]
    if delta.shape != u.shape or a.shape[0] != e or bmat.shape != (bsz, s, t_len) or cmat.shape != (bsz, s, t_len):
        raise ShapeError(
            f"selective_scan: incompatible shapes u{u.shape} delta{delta.shape} A{a.shape} "
            f"B{bmat.shape} C{cmat.shape}"
        )
    ud, dd, ad, skip = u.data, delta.data, a.data, dskip.data
    # time-major internals: (T, B, E[, S])
    ut = np.ascontiguousarray(ud.transpose(2, 0, 1))
    dt = np.ascontiguousarray(dd.transpose(2, 0, 1))
    bt = np.ascontiguousarray(bmat.data.transpose(2, 0, 1))  # (T, B, S)
    ct = np.ascontiguousarray(cmat.data.transpose(2, 0, 1))
    decay = np.exp(dt[..., None] * ad)  # (T, B, E, S)
    du = dt * ut
    hs = (du[..., None] * bt[:, :, None, :])  # drive, overwritten in place by the states
    for t in range(1, t_len):
        hs[t] += decay[t] * hs[t - 1]
    y = (hs @ ct[..., None])[..., 0] + skip * ut  # (T, B, E)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(2, 0, 1))
        gh = gt[..., None] * ct[:, :, None, :]  # direct terms, accumulated in place into dL/dh_t
        for t in range(t_len - 2, -1, -1):
            gh[t] += decay[t + 1] * gh[t + 1]
        gc = (gt[:, :, None, :] @ hs)[:, :, 0, :]  # (T, B, S)
        gpre = np.zeros_like(decay)  # dL/d(delta_t·a)
        gpre[1:] = gh[1:] * hs[:-1] * decay[1:]
        ga = np.einsum("tbes,tbe->es", gpre, dt)
        gdrive_b = (gh @ bt[..., None])[..., 0]  # sum_s gh·B  (T, B, E)
        gdelta = (gpre * ad).sum(axis=-1) + ut * gdrive_b
        gu = gt * skip + dt * gdrive_b
        gb = (du[:, :, None, :] @ gh)[:, :, 0, :]  # (T, B, S)
        gskip = (gt * ut).sum(axis=(0, 1))
        return (
            gu.transpose(1, 2, 0),
            gdelta.transpose(1, 2, 0),
            ga,
            gb.transpose(1, 2, 0),
            gc.transpose(1, 2, 0),
            gskip,
        )

    return Tensor._make(np.ascontiguousarray(y.transpose(1, 2, 0)), (u, delta, a, bmat, cmat, dskip), backward, "selective_scan")

"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` replays those closures in reverse
topological order. Intermediate gradients live in a scratch dict for the
duration of one pass; only leaves keep (and accumulate) ``.grad``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# per thread, so folds trained in parallel cannot switch each other's recording off
_grad_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class EmptyOutputError(ValueError):
    """An op would produce an output with a non-positive length."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basics -------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autograd -----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor.

        Without an explicit ``grad`` the tensor must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

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

    def set_mean(self, axis, keepdims: bool = False):
        return set_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        # subgradient 0 at the origin (e.g. std of a constant channel)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g * 0.5 / out, 0.0),)

    return _make(out, (a,), backward, "sqrt")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the gradient passes only where a > floor."""
    keep = a.data > floor
    out = np.where(keep, a.data, floor)
    return _make(out, (a,), lambda g: (g * keep,), "clamp_min")


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    pos = a.data >= 0
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, neg_part)
    return _make(out, (a,), lambda g: (g * np.where(pos, 1.0, neg_part + alpha),), "elu")


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# -- reductions and shape ops ----------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_reduced(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand_reduced(g, a.shape, axes, keepdims),), "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.sum(axis=axes, keepdims=keepdims) / n
    return _make(out, (a,), lambda g: (_expand_reduced(g / n, a.shape, axes, keepdims),), "mean")


def ordered_sum(x: np.ndarray, axes: tuple, keepdims: bool = False) -> np.ndarray:
    """Sum over ``axes`` in an order fixed by the values, not their positions.

    Values are sorted before summation, so any permutation of the reduced
    elements gives a bitwise-identical result.
    """
    axes = _norm_axes(axes, x.ndim)
    keep = [ax for ax in range(x.ndim) if ax not in axes]
    moved = np.transpose(x, keep + list(axes))
    flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
    out = np.sort(flat, axis=-1).sum(axis=-1)
    if keepdims:
        for ax in axes:
            out = np.expand_dims(out, ax)
    return out


def set_mean(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    """Mean over ``axis`` that is bitwise invariant to permuting the reduced elements."""
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    if n == 0:
        raise EmptyOutputError("mean over an empty set")
    out = ordered_sum(a.data, axes, keepdims) / n
    return _make(out, (a,), lambda g: (_expand_reduced(g / n, a.shape, axes, keepdims),), "set_mean")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    advanced = any(isinstance(i, (list, np.ndarray)) for i in
                   (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(out, (a,), backward, "getitem")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(out, tensors, backward, "concat")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    # einsum's own loop keeps each row's result independent of the other rows
    # (BLAS kernels may round rows differently depending on their position)
    data = np.einsum("...i,oi->...o", x.data, weight.data)

    def backward(g):
        gx = np.einsum("...o,oi->...i", g, weight.data) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.tensordot(g.reshape(-1, g.shape[-1]), x.data.reshape(-1, x.shape[-1]), axes=(0, 0))
        return gx, gw

    out = _make(data, (x, weight), backward, "linear")
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = x.data.max(axis=axis, keepdims=True)
    z = x.data - shift
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


# -- convolution and pooling -----------------------------------------------

def _pads(padding) -> tuple[int, int]:
    if isinstance(padding, (tuple, list)):
        left, right = padding
    else:
        left = right = padding
    if left < 0 or right < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    return int(left), int(right)


def same_padding(kernel_size: int, dilation: int = 1) -> tuple[int, int]:
    """Padding that preserves length at stride 1; symmetric when the span is odd."""
    span = dilation * (kernel_size - 1)
    return span // 2, span - span // 2


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, t_out: int) -> np.ndarray:
    span = dilation * (k - 1) + 1
    win = sliding_window_view(xp, span, axis=-1)[..., ::dilation]
    return win[..., : stride * (t_out - 1) + 1 : stride, :]


def _scatter_windows(dwin: np.ndarray, t_padded: int, k: int, stride: int, dilation: int) -> np.ndarray:
    t_out = dwin.shape[-2]
    dxp = np.zeros(dwin.shape[:-2] + (t_padded,))
    for j in range(k):
        start = j * dilation
        dxp[..., start : start + stride * (t_out - 1) + 1 : stride] += dwin[..., j]
    return dxp


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, groups: int = 1, padding=0) -> Tensor:
    """Grouped, dilated 1-D cross-correlation.

    x: [B, C, T], kernel: [F, C // groups, K] -> [B, F, T_out].
    """
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input and kernel, got {x.shape} and {kernel.shape}")
    B, C, T = x.shape
    F, Cg, K = kernel.shape
    if C % groups or F % groups:
        raise ShapeError(f"conv1d: channels C={C} and filters F={F} must be divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"conv1d: kernel in-channels {Cg} != C/groups = {C // groups}")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    left, right = _pads(padding)
    Tp = T + left + right
    t_out = (Tp - dilation * (K - 1) - 1) // stride + 1
    if t_out <= 0:
        raise EmptyOutputError(
            f"conv1d: padded length {Tp} shorter than dilated kernel span {dilation * (K - 1) + 1}")

    if bias is not None and bias.shape != (F,):
        raise ShapeError(f"conv1d: bias shape {bias.shape} != ({F},)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    if groups == 1:
        return _conv1d_gemm(x, kernel, bias, xp, stride, dilation, left, t_out)
    if stride == 1 and Cg == 1 and F == C:
        return _conv1d_depthwise(x, kernel, bias, xp, dilation, left, t_out)
    win = _windows(xp, K, stride, dilation, t_out)  # [B, C, T_out, K]
    Fg = F // groups
    # [B, g, T_out, Cg*K]
    cols = win.reshape(B, groups, Cg, t_out, K).transpose(0, 1, 3, 2, 4).reshape(B, groups, t_out, Cg * K)
    wmat = kernel.data.reshape(groups, Fg, Cg * K).transpose(0, 2, 1)  # [g, Cg*K, Fg]
    out = cols @ wmat  # [B, g, T_out, Fg]
    out = out.transpose(0, 1, 3, 2).reshape(B, F, t_out)
    if bias is not None:
        out = out + bias.data[None, :, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gg = g.reshape(B, groups, Fg, t_out).transpose(0, 1, 3, 2)  # [B, g, T_out, Fg]
        gx = gk = gb = None
        if x.requires_grad:
            dcols = gg @ wmat.transpose(0, 2, 1)  # [B, g, T_out, Cg*K]
            dwin = dcols.reshape(B, groups, t_out, Cg, K).transpose(0, 1, 3, 2, 4).reshape(B, C, t_out, K)
            dxp = _scatter_windows(dwin, Tp, K, stride, dilation)
            gx = dxp[:, :, left: left + T]
        if kernel.requires_grad:
            dw = np.einsum("bgtk,bgtf->gfk", cols, gg, optimize=True)
            gk = dw.reshape(F, Cg, K)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _make(out, parents, backward, "conv1d")


def _conv1d_gemm(x, kernel, bias, xp, stride, dilation, left, t_out):
    """Dense conv as one matrix product over unfolded windows."""
    B, C, T = x.shape
    F, _, K = kernel.shape
    win = _windows(xp, K, stride, dilation, t_out)  # [B, C, T_out, K]
    cols = win.transpose(0, 2, 1, 3).reshape(B * t_out, C * K)
    wmat = kernel.data.reshape(F, C * K)
    out = (cols @ wmat.T).reshape(B, t_out, F).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(B * t_out, F)
        gx = gk = gb = None
        if x.requires_grad:
            dwin = (g2 @ wmat).reshape(B, t_out, C, K).transpose(0, 2, 1, 3)
            gx = _scatter_windows(dwin, xp.shape[-1], K, stride, dilation)[:, :, left: left + T]
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(F, C, K)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _make(out, parents, backward, "conv1d")


def _conv1d_depthwise(x, kernel, bias, xp, dilation, left, t_out):
    """One filter per channel, stride 1: a sum of shifted elementwise products."""
    B, C, T = x.shape
    K = kernel.shape[-1]
    w = kernel.data[:, 0, :]  # [C, K]
    shifts = [slice(j * dilation, j * dilation + t_out) for j in range(K)]
    out = np.zeros((B, C, t_out))
    for j, sl in enumerate(shifts):
        out += w[None, :, j, None] * xp[:, :, sl]
    if bias is not None:
        out += bias.data[None, :, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gx = gk = gb = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for j, sl in enumerate(shifts):
                gxp[:, :, sl] += w[None, :, j, None] * g
            gx = gxp[:, :, left: left + T]
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
            for j, sl in enumerate(shifts):
                gk[:, 0, j] = np.einsum("bct,bct->c", g, xp[:, :, sl])
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _make(out, parents, backward, "conv1d")


def depthwise_conv_channels(x: Tensor, kernel: Tensor, depth_multiplier: int) -> Tensor:
    """Spatial filtering across the electrode axis, one group per input channel.

    x: [B, C, E, T], kernel: [C*D, 1, E, 1] -> [B, C*D, 1, T]. Output channel
    ``c*D + j`` is the j-th electrode mix of input channel ``c``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"depthwise_conv_channels expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    B, C, E, T = x.shape
    D = depth_multiplier
    if kernel.shape[2] != E:
        raise ShapeError(f"depthwise kernel electrode extent {kernel.shape[2]} != input electrodes {E}")
    if kernel.shape != (C * D, 1, E, 1):
        raise ShapeError(f"depthwise kernel shape {kernel.shape} != {(C * D, 1, E, 1)}")
    w = kernel.data.reshape(C, D, E)
    out = (w @ x.data).reshape(B, C * D, 1, T)  # [C,D,E] @ [B,C,E,T] -> [B,C,D,T]

    def backward(g):
        gg = g.reshape(B, C, D, T)
        gx = gk = None
        if x.requires_grad:
            gx = w.transpose(0, 2, 1) @ gg
        if kernel.requires_grad:
            gk = np.einsum("bcdt,bcet->cde", gg, x.data, optimize=True).reshape(C * D, 1, E, 1)
        return gx, gk

    return _make(out, (x, kernel), backward, "depthwise")


def avg_pool1d(x: Tensor, k: int, stride: int | None = None, padding=0) -> Tensor:
    """Mean over sliding windows; zero padding counts toward the window."""
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ValueError(f"pool kernel and stride must be >= 1, got k={k}, stride={stride}")
    if x.ndim != 3:
        raise ShapeError(f"avg_pool1d expects [B, C, T], got {x.shape}")
    if k == 1 and stride == 1 and padding == 0:
        return x
    left, right = _pads(padding)
    T = x.shape[-1]
    Tp = T + left + right
    if Tp < k:
        raise EmptyOutputError(f"avg_pool1d: length {Tp} shorter than window {k}")
    t_out = (Tp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    lead = x.shape[:-1]
    if stride == k:
        # non-overlapping windows: a reshape
        out = xp[..., : t_out * k].reshape(lead + (t_out, k)).sum(axis=-1) / k

        def backward(g):
            dxp = np.zeros(lead + (Tp,))
            dxp[..., : t_out * k] = np.repeat(g / k, k, axis=-1)
            return (dxp[..., left: left + T],)
    else:
        span = stride * (t_out - 1) + 1
        shifts = [slice(j, j + span, stride) for j in range(k)]
        out = np.zeros(lead + (t_out,))
        for sl in shifts:
            out += xp[..., sl]
        out /= k

        def backward(g):
            dxp = np.zeros(lead + (Tp,))
            gk = g / k
            for sl in shifts:
                dxp[..., sl] += gk
            return (dxp[..., left: left + T],)

    return _make(out, (x,), backward, "avg_pool1d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, T] -> [B, C] mean over time."""
    if x.ndim != 3 or x.shape[-1] < 1:
        raise ShapeError(f"global_avg_pool expects [B, C, T>=1], got {x.shape}")
    return tmean(x, axis=2)

"""Define-by-run reverse-mode differentiation over float64 NCHW arrays.

Each op computes its forward value eagerly and, when any input requires a
gradient, records a closure that maps the output gradient to input
gradients.  ``Tensor.backward`` replays those closures in reverse
topological order.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _accel
from .errors import NumericError, ShapeError, SizeError, StateError

# Every op output is checked for NaN/Inf when this is on (debug builds).
CHECK_FINITE = os.environ.get("OSTRICH_DEBUG", "0") not in ("", "0")

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {where}")


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if _op == "leaf" and not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- plain accessors
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar
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

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if CHECK_FINITE:
        _check_finite(data, op)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tabs(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """Elementwise ``max(x, slope * x)`` for ``0 <= slope < 1``."""
    if not 0.0 <= slope < 1.0:
        raise ValueError("slope must lie in [0, 1)")
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return _make(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


# ------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shaping


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# ----------------------------------------------------------- convolutions


def _conv_im2col(x: Tensor, kernel: Tensor, stride: int, pad: int, ho: int, wo: int):
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _accel.im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(cout, -1)
    out = wmat @ cols  # (cout, n*ho*wo)

    def bw(g2):
        gx = gk = None
        if x.requires_grad:
            gp = _accel.col2im(wmat.T @ g2, n, cin, hp, wp, kh, kw, stride, ho, wo)
            gx = gp[:, :, pad:pad + h, pad:pad + w] if pad else gp
        if kernel.requires_grad:
            gk = (g2 @ cols.T).reshape(kernel.shape)
        return gx, gk

    return out.reshape(cout, n, ho, wo), bw


def _conv_tapstack(x: Tensor, kernel: Tensor, pad: int, ho: int, wo: int):
    # Stride-1 only.  One GEMM of the tap-stacked kernel against the flattened
    # padded input, then shifted sums on the padded grid; cheaper than im2col
    # when Cout < Cin because the expanded matrix has Cout rows per tap.
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    full = n * hp * wp
    span = full - ((kh - 1) * wp + (kw - 1))
    xp = np.zeros((cin, n, hp, wp))
    xp[:, :, pad:pad + h, pad:pad + w] = x.data.transpose(1, 0, 2, 3)
    flat = xp.reshape(cin, full)
    wstack = kernel.data.transpose(2, 3, 0, 1).reshape(kh * kw * cout, cin)
    ys = wstack @ flat
    acc = np.zeros((cout, full))
    head = acc[:, :span]
    offsets = [u * wp + v for u in range(kh) for v in range(kw)]
    for t, off in enumerate(offsets):
        head += ys[t * cout:(t + 1) * cout, off:off + span]
    out = acc.reshape(cout, n, hp, wp)[:, :, :ho, :wo]

    def bw(g2):
        gfull = np.zeros((cout, n, hp, wp))
        gfull[:, :, :ho, :wo] = g2.reshape(cout, n, ho, wo)
        gflat = gfull.reshape(cout, full)
        dys = np.zeros((kh * kw * cout, full))
        for t, off in enumerate(offsets):
            dys[t * cout:(t + 1) * cout, off:off + span] = gflat[:, :span]
        gx = gk = None
        if x.requires_grad:
            gxp = (wstack.T @ dys).reshape(cin, n, hp, wp)
            gx = gxp[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3)
        if kernel.requires_grad:
            gk = (dys @ flat.T).reshape(kh, kw, cout, cin).transpose(2, 3, 0, 1)
        return gx, gk

    return out, bw


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2-D cross-correlation of ``x[N,Cin,H,W]`` with ``kernel[Cout,Cin,kh,kw]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise SizeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise SizeError(f"kernel expects {kcin} input channels, input has {cin}")
    if stride < 1 or pad < 0:
        raise SizeError("stride must be >= 1 and pad >= 0")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise SizeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.shape != (cout,):
        raise SizeError(f"bias shape {bias.shape} != ({cout},)")
    _check_finite(x.data, "conv2d input")
    _check_finite(kernel.data, "conv2d kernel")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if stride == 1 and cout < cin:
        out, inner_bw = _conv_tapstack(x, kernel, pad, ho, wo)
    else:
        out, inner_bw = _conv_im2col(x, kernel, stride, pad, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gx, gk = inner_bw(g2)
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv2d")


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel) plane to zero mean and unit variance."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat, (x,), bw, "instance_norm")


def channel_mix(x: Tensor, weight: Tensor) -> Tensor:
    """Per-pixel linear map across channels: ``y[:, i] = sum_j W[i, j] x[:, j]``."""
    n, c, h, w = x.shape
    if weight.shape != (c, c):
        raise SizeError(f"mixing matrix {weight.shape} does not match {c} channels")
    xf = x.data.reshape(n, c, h * w)
    out = np.matmul(weight.data, xf).reshape(x.shape)

    def bw(g):
        gf = g.reshape(n, c, h * w)
        gx = np.matmul(weight.data.T, gf).reshape(x.shape) if x.requires_grad else None
        gw = np.einsum("nip,njp->ij", gf, xf) if weight.requires_grad else None
        return gx, gw

    return _make(out, (x, weight), bw, "channel_mix")


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ------------------------------------------------------------- utilities


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(x0)).data.sum()
            flat[i] = orig - eps
            fm = f(Tensor(x0)).data.sum()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def step(params: Iterable[Tensor], lr: float, direction: str = "descend") -> None:
    """Plain SGD update; zeroes every gradient afterwards."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if direction not in ("descend", "ascend"):
        raise ValueError(f"direction must be 'descend' or 'ascend', got {direction!r}")
    params = list(params)
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise StateError(f"{len(missing)} parameter(s) have no gradient")
    sign = -1.0 if direction == "descend" else 1.0
    for p in params:
        if lr:
            p.data += sign * lr * p.grad
        p.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    params = [p for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * scale
    return norm


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class RngState:
    """Seeded PCG64 stream; identical seeds give identical draws everywhere."""

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def get_state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state

    def spawn(self, key: int) -> "RngState":
        """Independent child stream derived from (seed, key)."""
        child = RngState(self.seed)
        child.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, key])))
        return child

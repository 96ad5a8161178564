"""Small reverse-mode differentiation engine on top of numpy.

Tensors hold float32 data by default. Each primitive computes its forward
value with numpy and, when any input requires a gradient, records a node
holding a closure that maps the output gradient to input gradients.
``Tensor.backward`` walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "relu6",
    "sigmoid",
    "global_mean",
    "reshape",
    "scalar_mul",
    "log",
    "exp",
    "sum",
    "no_grad",
    "is_grad_enabled",
    "recorded_ops",
    "finite_diff_check",
]

_LOG_FLOOR = float(np.finfo(np.float32).tiny)


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operand shapes."""


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.recorded = 0


_state = _State()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


def recorded_ops() -> int:
    """Number of graph nodes recorded in the current thread."""
    return _state.recorded


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=None)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate ``grad`` on every tensor this scalar depends on."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=None if isinstance(x, np.ndarray) and x.dtype.kind == "f" else np.float32)


def _result(value: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(value, dtype=None)
    out.op = op
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        _state.recorded += 1
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(a.data * c, (a,), backward, "scalar_mul")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def conv2d(x, w, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation with zero padding.

    x is (N, C_in, H, W); w is (C_out, C_in // groups, kh, kw).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups or cin // groups != cg:
        raise ShapeError(
            f"conv2d: input {x.shape} and kernel {w.shape} incompatible with groups={groups}"
        )
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or pad={pad}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    og = cout // groups

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if cg == 1 and og == 1:
        return _depthwise(x, w, xp, stride, pad, ho, wo)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(n, groups, cg, ho, wo, kh, kw)
    wk = w.data.reshape(groups, og, cg, kh, kw)
    if groups == 1:
        out = np.tensordot(win[:, 0], w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        out = np.einsum("ngchwij,gocij->ngohw", win, wk, optimize=True)
    out = np.ascontiguousarray(out.reshape(n, cout, ho, wo))

    def backward(g):
        g = g.reshape(n, groups, og, ho, wo)
        if groups == 1:
            gw = np.tensordot(g[:, 0], win[:, 0], axes=([0, 2, 3], [0, 2, 3]))
            gwin = np.tensordot(g[:, 0], w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        else:
            gw = np.einsum("ngchwij,ngohw->gocij", win, g, optimize=True)
            gwin = np.einsum("ngohw,gocij->ngchwij", g, wk, optimize=True)
        gwin = gwin.reshape(n, cin, ho, wo, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gwin[..., i, j]
        gx = gxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else gxp
        return gx, gw.reshape(w.shape)

    return _result(out, (x, w), backward, "conv2d")


def _depthwise(x: Tensor, w: Tensor, xp: np.ndarray, stride: int, pad: int, ho: int, wo: int) -> Tensor:
    # one channel per group: accumulate kernel taps directly, row-major tap order
    kh, kw = w.shape[2], w.shape[3]
    k = w.data[:, 0]
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=np.result_type(x.data, w.data))
    for i in range(kh):
        for j in range(kw):
            tap = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += tap * k[:, i, j][None, :, None, None]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gk = np.zeros(k.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                gk[:, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
                gxp[sl] += g * k[:, i, j][None, :, None, None]
        gx = gxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else gxp
        return gx, gk[:, None]

    return _result(out, (x, w), backward, "conv2d")


def relu6(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return (g * ((a.data > 0) & (a.data < 6)),)

    return _result(np.clip(a.data, 0, 6), (a,), backward, "relu6")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)

    def backward(g):
        return (g * s * (1 - s),)

    return _result(s, (a,), backward, "sigmoid")


def global_mean(a) -> Tensor:
    """Mean over the spatial axes of an (N, C, H, W) tensor -> (N, C)."""
    a = _as_tensor(a)
    if a.data.ndim != 4:
        raise ShapeError(f"global_mean: expected (N, C, H, W), got {a.shape}")
    n, c, h, w = a.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), a.shape).copy(),)

    return _result(a.data.mean(axis=(2, 3)), (a,), backward, "global_mean")


def reshape(a, shape: Iterable[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), backward, "reshape")


def log(a) -> Tensor:
    """Natural log; inputs are floored at the smallest normal float32."""
    a = _as_tensor(a)
    x = np.maximum(a.data, _LOG_FLOOR)

    def backward(g):
        return (g / x,)

    return _result(np.log(x), (a,), backward, "log")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)

    def backward(g):
        return (g * e,)

    return _result(e, (a,), backward, "exp")


def sum(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    floor: float = 1e-2,
) -> float:
    """Largest relative gap between backward grads and central differences.

    Analytic gradients come from ``f`` evaluated at the inputs' own dtype.
    The numeric side re-evaluates ``f`` on float64 copies, so the check
    measures the engine's error rather than float32 rounding in ``f``.
    Elementwise error is |a - n| / max(|a|, |n|, floor).
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    y = f(*inputs)
    y.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    base = [t.data.astype(np.float64) for t in inputs]
    worst = 0.0
    with no_grad():
        for idx in range(len(inputs)):
            flat = base[idx].reshape(-1)
            num = np.empty_like(flat)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                fp = f(*[Tensor(b, dtype=np.float64) for b in base]).data.astype(np.float64).sum()
                flat[k] = orig - eps
                fm = f(*[Tensor(b, dtype=np.float64) for b in base]).data.astype(np.float64).sum()
                flat[k] = orig
                num[k] = (fp - fm) / (2 * eps)
            a = analytic[idx].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
            if a.size:
                worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    return worst

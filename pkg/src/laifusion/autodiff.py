"""Dense tensors with reverse-mode automatic differentiation.

Only the handful of operations the LAI model needs are provided. Images use
the batch x channels x height x width layout. Every op returns a new
:class:`Tensor`; when any input requires a gradient the result remembers its
parents and a backward rule, and :meth:`Tensor.backward` replays them in
reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation, InvalidGeometry, NumericalError

__all__ = [
    "Tensor",
    "Tape",
    "make_op",
    "no_grad",
    "debug_mode",
    "conv2d",
    "max_pool2d",
    "upsample_nearest2x",
    "relu",
    "linear",
    "concat_channels",
    "broadcast_spatial",
    "grad_check",
]

_GRAD_ENABLED = True
_DEBUG = False

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Check every forward result for NaN/Inf while active."""
    global _DEBUG
    prev, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = prev


class Tensor:
    """n-dimensional float array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # Elementwise arithmetic: same-shape tensors or python scalars only.

    def __add__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            _same_shape(self, other, "add")
            return make_op(self.data + other.data, (self, other), lambda g: (g, g), "add")
        c = self.data.dtype.type(other)
        return make_op(self.data + c, (self,), lambda g: (g,), "add_scalar")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return make_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        return self + (-other if isinstance(other, Tensor) else -other)

    def __rsub__(self, other) -> "Tensor":
        return (-self) + other

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            _same_shape(self, other, "mul")
            a, b = self.data, other.data
            return make_op(a * b, (self, other), lambda g: (g * b, g * a), "mul")
        c = self.data.dtype.type(other)
        return make_op(self.data * c, (self,), lambda g: (g * c,), "mul_scalar")

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        shape = self.shape
        out = np.asarray(self.data.sum(), dtype=self.dtype)
        return make_op(out, (self,), lambda g: (np.full(shape, g, dtype=g.dtype),), "sum")

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractViolation(f"backward needs a scalar, got shape {self.shape}")
        Tape.from_root(self).backward(self)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def make_op(
    data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str = "op"
) -> Tensor:
    """Wrap an op result, recording ``backward`` when a parent needs gradients.

    ``backward`` maps the upstream gradient to one gradient per parent (``None``
    is allowed for parents that do not require grad).
    """
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    out.op = op
    if _DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NumericalError(f"{op} produced non-finite values from finite inputs")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Recorded operations reachable from a root, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
        return cls(order)

    def backward(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
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


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Network ops


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractViolation(f"conv2d expects 4-D x and w, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if cin != c:
        raise ContractViolation(f"conv2d: x has {c} channels but w expects {cin}")
    if b.shape != (cout,):
        raise ContractViolation(f"conv2d: bias shape {b.shape} != ({cout},)")
    if stride < 1 or pad < 0:
        raise InvalidGeometry(f"conv2d: stride={stride}, pad={pad}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise InvalidGeometry(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # Rows ordered (c, i, j) to match w.reshape(cout, -1); columns (n, y, x).
    cols = win[:, :, :ho, :wo].transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(cout, -1)
    y = wmat @ cols
    y += b.data[:, None]
    out = y.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    geom = (x.shape, xp.shape, pad, stride, ho, wo, kh, kw)

    def backward(g):
        return _conv2d_backward(g, cols, wmat, geom, (x.requires_grad, w.requires_grad, b.requires_grad))

    return make_op(out, (x, w, b), backward, "conv2d")


def _conv2d_backward(g, cols, wmat, geom, needs):
    (n, c, h, wd), xp_shape, pad, stride, ho, wo, kh, kw = geom
    cout = wmat.shape[0]
    gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
    gx = gw = gb = None
    if needs[1]:
        gw = (gm @ cols.T).reshape(cout, c, kh, kw)
    if needs[2]:
        gb = gm.sum(axis=1)
    if needs[0]:
        gcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros((c, n) + xp_shape[2:], dtype=g.dtype)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[:, i, j]
        gxp = gxp.transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
    return gx, gw, gb


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties resolve to the first row-major cell."""
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise InvalidGeometry(f"max_pool2d: {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // k, w // k, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, h // k, w // k, k * k), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return make_op(out, (x,), backward, "max_pool2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_op(out, (x,), backward, "upsample_nearest2x")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_op(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w.T + b for x of shape [N, Din] and w of shape [Dout, Din]."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ContractViolation(f"linear: x {x.shape} incompatible with w {w.shape}")
    if b.shape != (w.shape[0],):
        raise ContractViolation(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    xd, wd = x.data, w.data

    def backward(g):
        return (
            g @ wd if x.requires_grad else None,
            g.T @ xd if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return make_op(xd @ wd.T + b.data, (x, w, b), backward, "linear")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ContractViolation("concat_channels: empty input list")
    ref = xs[0].shape
    for t in xs:
        if t.data.ndim != 4 or (t.shape[0],) + t.shape[2:] != (ref[0],) + ref[2:]:
            raise ContractViolation(f"concat_channels: {t.shape} incompatible with {ref}")
    bounds = np.cumsum([t.shape[1] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=1))

    return make_op(np.concatenate([t.data for t in xs], axis=1), tuple(xs), backward, "concat")


def broadcast_spatial(v: Tensor, h: int, w: int) -> Tensor:
    """Replicate a [N, C] feature vector over an h x w grid."""
    if v.data.ndim != 2:
        raise ContractViolation(f"broadcast_spatial expects [N, C], got {v.shape}")
    if h < 1 or w < 1:
        raise InvalidGeometry(f"broadcast_spatial: bad grid {h}x{w}")
    n, c = v.shape
    out = np.broadcast_to(v.data[:, :, None, None], (n, c, h, w))
    return make_op(out, (v,), lambda g: (g.sum(axis=(2, 3)),), "broadcast_spatial")


# ---------------------------------------------------------------------------
# Finite-difference checking


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps ``inputs`` to a scalar tensor. Inputs should be float64. With
    ``max_elements`` set, at most that many coordinates of each input are
    probed (chosen at random from ``seed``); otherwise every coordinate is.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    f(*inputs).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = rng.choice(flat.size, size=max_elements, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = float(a.reshape(-1)[i])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    return worst

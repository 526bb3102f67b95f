"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operators Swap-Net needs are provided: 3x3 same-padding
convolution on (C, H, W) images, ReLU, elementwise add/sub, scalar scale,
axis permutation and scalar reductions for the loss. Every op records its
parents and a closure mapping the upstream gradient to parent gradients;
:func:`backward` walks that tape once in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "conv2d",
    "relu",
    "add",
    "sub",
    "scale",
    "permute_axes",
    "sum_all",
    "sum_squares",
    "backward",
    "AdamState",
    "adam_step",
]

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """A node in the autodiff graph.

    ``data`` is a contiguous float32/float64 array. Leaves are created with
    :func:`tensor`; interior nodes are produced by the op functions below.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], tuple] | None = None,
        name: str | None = None,
    ):
        if data.dtype.type not in _FLOAT_TYPES:
            raise TypeError(f"tensor dtype must be float32 or float64, got {data.dtype}")
        if data.ndim and min(data.shape) < 1:
            raise ValueError(f"tensor extents must all be >= 1, got {data.shape}")
        self.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, k: float) -> "Tensor":
        return scale(self, k)

    __rmul__ = __mul__


def tensor(data, dtype=np.float32, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Create a leaf tensor (copying ``data``)."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (), backward_fn=fn if needs else None)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def _im2col3(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, 3, 3, h, w), dtype=xp.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xp[:, ky : ky + h, kx : kx + w]
    return cols.reshape(c * 9, h * w)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3, stride 1, zero-pad 1 cross-correlation of a (C_in, H, W) image.

    ``kernel`` is (C_out, C_in, 3, 3) and ``bias`` is (C_out,). Output keeps
    the spatial size of the input.
    """
    if x.data.ndim != 3:
        raise ValueError(f"conv2d input must be (C_in, H, W), got shape {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ValueError(f"conv2d kernel must be (C_out, C_in, 3, 3), got shape {kernel.shape}")
    c_in, h, w = x.shape
    c_out = kernel.shape[0]
    if kernel.shape[1] != c_in:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.shape} has C_in={c_in} "
            f"but kernel shape {kernel.shape} expects C_in={kernel.shape[1]}"
        )
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match C_out={c_out}")

    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    cols = _im2col3(xp, h, w)
    k2 = kernel.data.reshape(c_out, c_in * 9)
    out = k2 @ cols
    out += bias.data[:, None]
    out = out.reshape(c_out, h, w)

    def _bw(g: np.ndarray):
        g2 = g.reshape(c_out, h * w)
        gx = gk = gb = None
        if x.requires_grad:
            gcols = (k2.T @ g2).reshape(c_in, 3, 3, h, w)
            gxp = np.zeros((c_in, h + 2, w + 2), dtype=g.dtype)
            for ky in range(3):
                for kx in range(3):
                    gxp[:, ky : ky + h, kx : kx + w] += gcols[:, ky, kx]
            gx = gxp[:, 1:-1, 1:-1]
        if kernel.requires_grad:
            gk = (g2 @ cols.T).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=1)
        return gx, gk, gb

    return _make(out, (x, kernel, bias), _bw)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def _bw(g):
        return (g * mask,)

    return _make(out, (x,), _bw)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, k: float) -> Tensor:
    k = a.dtype.type(k)
    return _make(a.data * k, (a,), lambda g: (g * k,))


def _validate_order(order: Sequence[int], ndim: int) -> tuple[int, ...]:
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(ndim)):
        raise ValueError(f"permute_axes: {order} is not a permutation of {tuple(range(ndim))}")
    return order


def permute_axes(x: Tensor, order: Sequence[int]) -> Tensor:
    """Reorder axes: output axis ``i`` is input axis ``order[i]``.

    The result is a contiguous copy. Backward applies the inverse order.
    """
    order = _validate_order(order, x.data.ndim)
    inverse = tuple(int(i) for i in np.argsort(order))
    out = np.ascontiguousarray(np.transpose(x.data, order))
    return _make(out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def sum_squares(x: Tensor) -> Tensor:
    """Scalar sum of squared entries, i.e. ``||x||^2``."""
    d = x.data
    return _make(np.asarray(np.vdot(d, d), dtype=x.dtype), (x,), lambda g: (2 * g * d,))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients are overwritten, not summed with a previous pass. If ``wrt`` is
    given, the gradients for those tensors are returned, with zeros for any
    leaf the loss does not depend on.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    nodes = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if wrt is None:
        return None
    out = []
    reached = {id(n) for n in nodes}
    for t in wrt:
        if id(t) in reached and t.grad is not None:
            out.append(t.grad)
        else:
            out.append(np.zeros_like(t.data))
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> Sequence[Tensor]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"adam_step: param shape {p.shape} vs grad shape {g.shape}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("adam_step: moment buffers do not match parameter shapes")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2) + state.eps
        p.data -= (state.lr * (m / c1) / denom).astype(p.dtype, copy=False)
    return params

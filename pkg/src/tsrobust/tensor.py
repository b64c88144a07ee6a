"""Dense float64 arrays with reverse-mode automatic differentiation.

Only the operations needed by the classifier, its losses and the input-gradient
attacks are provided. Shapes are static apart from the batch axis and there is
no general broadcasting: binary ops accept either matching shapes or a scalar.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

LOG_FLOOR = 1e-12

ArrayLike = Union[np.ndarray, float, int, Sequence]

_node_ids = itertools.count()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UnsupportedKernelError(ValueError):
    """Convolution kernel is wider than the series."""


class StaleGraphError(RuntimeError):
    """backward() was called on a recording that has already been consumed."""


class Tensor:
    """A float64 array that optionally records how it was computed.

    Leaves created with ``requires_grad=True`` receive a ``grad`` array after
    :meth:`backward` runs on a scalar that depends on them.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "_consumed")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Iterable["Tensor"], backward) -> "Tensor":
        parents = tuple(parents)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.node_id = next(_node_ids)
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._consumed = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # arithmetic -------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other) -> "Tensor":
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.ndim and b.data.ndim and a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# graph --------------------------------------------------------------------


class Graph:
    """Operations reachable from a root, in topological order.

    Built on demand from the parent links each op records; ``ops`` lists every
    non-leaf node so that each appears after all of its inputs.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.ops: list[Tensor] = []
        self.leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                (self.leaves if node.is_leaf else self.ops).append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.node_id not in seen:
                    stack.append((p, False))

    def run_backward(self) -> None:
        if self.root._consumed:
            raise StaleGraphError("graph already used for a backward pass; re-run the forward pass")
        grads: dict[int, np.ndarray] = {self.root.node_id: np.ones_like(self.root.data)}
        for node in reversed(self.ops):
            g = grads.pop(node.node_id, None)
            node._consumed = True
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    parent._accumulate(pg)
                elif parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg
            # release references so intermediates can be collected
            node._parents = ()
            node._backward = None
        self.root._consumed = True


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StaleGraphError("graph already used for a backward pass; re-run the forward pass")
    if not loss.requires_grad:
        loss._consumed = True
        return
    if loss.is_leaf:
        loss._accumulate(np.ones_like(loss.data))
        loss._consumed = True
        return
    Graph(loss).run_backward()


# elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")

    def bw(g):
        ga = g if a.data.ndim else g.sum()
        gb = g if b.data.ndim else g.sum()
        return ga, gb

    return Tensor._from_op(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g * bd if ad.ndim else (g * bd).sum()
        gb = g * ad if bd.ndim else (g * ad).sum()
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the argument clamped below at ``floor``."""
    ad = a.data
    clamped = np.maximum(ad, floor)

    def bw(g):
        return (np.where(ad > floor, g / clamped, 0.0),)

    return Tensor._from_op(np.log(clamped), (a,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# reductions and indexing --------------------------------------------------


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._from_op(np.array(x.data[index]), (x,), bw)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick ``x[i, idx[i]]`` for every row ``i`` of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(x.shape[0])
    return getitem(x, (rows, idx))


def stack_mean(xs: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of equally shaped tensors."""
    if not xs:
        raise DimensionError("stack_mean of an empty sequence")
    for t in xs[1:]:
        _check_same(xs[0], t, "stack_mean")
    n = len(xs)
    data = sum(t.data for t in xs) / n
    return Tensor._from_op(data, tuple(xs), lambda g: tuple(g / n for _ in range(n)))


# network layers -----------------------------------------------------------


def _pad_widths(w: int) -> tuple[int, int]:
    return (w - 1) // 2, w // 2


def conv1d(
    x: Tensor,
    kernels: Tensor,
    bias: Optional[Tensor] = None,
    padding_mode: str = "zero",
) -> Tensor:
    """Same-length 1-D cross-correlation.

    ``x`` is ``[batch, ch_in, k]`` and ``kernels`` is ``[ch_out, ch_in, w]``.
    The total padding ``w - 1`` is split floor/ceil between the left and right
    ends; ``replicate`` repeats the edge samples instead of inserting zeros.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 3:
        raise DimensionError(f"conv1d expects 3-D input and kernels, got {x.shape} and {kernels.shape}")
    batch, cin, k = x.shape
    cout, kcin, w = kernels.shape
    if kcin != cin:
        raise DimensionError(f"conv1d: input has {cin} channels, kernels expect {kcin}")
    if w > k:
        raise UnsupportedKernelError(f"kernel width {w} exceeds series length {k}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv1d: bias shape {bias.shape} != ({cout},)")
    if padding_mode not in ("zero", "replicate"):
        raise ValueError(f"unknown padding_mode {padding_mode!r}")

    left, right = _pad_widths(w)
    mode = "constant" if padding_mode == "zero" else "edge"
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)), mode=mode)
    # cols[b, t, c, j] = xp[b, c, t + j]
    cols = np.lib.stride_tricks.sliding_window_view(xp, w, axis=2).transpose(0, 2, 1, 3)
    cols = cols.reshape(batch * k, cin * w)
    wmat = kernels.data.reshape(cout, cin * w)
    out = (cols @ wmat.T).reshape(batch, k, cout).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(batch * k, cout)
        gk = (g2.T @ cols).reshape(cout, cin, w) if kernels.requires_grad else None
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(batch, k, cin, w)
            gxp = np.zeros((batch, cin, k + w - 1))
            for j in range(w):
                gxp[:, :, j:j + k] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, left:left + k].copy()
            if padding_mode == "replicate":
                if left:
                    gx[:, :, 0] += gxp[:, :, :left].sum(axis=2)
                if right:
                    gx[:, :, -1] += gxp[:, :, left + k:].sum(axis=2)
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return Tensor._from_op(out, parents, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the last (time) axis of a ``[batch, ch, k]`` tensor."""
    if x.data.ndim != 3:
        raise DimensionError(f"global_avg_pool expects [batch, ch, k], got {x.shape}")
    k = x.shape[2]
    if k == 0:
        raise DimensionError("global_avg_pool over an empty time axis")
    shape = x.shape
    return Tensor._from_op(
        x.data.mean(axis=2),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None] / k, shape).copy(),),
    )


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``[batch, n]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"affine expects 2-D x and weight, got {x.shape} and {weight.shape}")
    m, n = weight.shape
    if x.shape[1] != n or bias.shape != (m,):
        raise DimensionError(f"affine: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data

    def bw(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return Tensor._from_op(xd @ wd.T + bias.data, (x, weight, bias), bw)


def softmax_t(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / temperature``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_t expects [batch, C], got {logits.shape}")
    z = logits.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner) / temperature,)

    return Tensor._from_op(p, (logits,), bw)


def cross_entropy(probs: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of probability rows against class indices or soft targets.

    ``log`` is clamped at ``log(1e-12)``. ``reduction`` is ``"mean"`` or
    ``"sum"`` over the batch.
    """
    if probs.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch, C], got {probs.shape}")
    batch, n_classes = probs.shape
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if labels.shape[0] != batch:
            raise DimensionError(f"{labels.shape[0]} labels for a batch of {batch}")
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise IndexError(f"label out of range [0, {n_classes})")
        target = np.zeros((batch, n_classes))
        target[np.arange(batch), labels.astype(np.intp)] = 1.0
    elif labels.shape == probs.shape:
        target = labels.astype(np.float64)
    else:
        raise DimensionError(f"targets of shape {labels.shape} for probs {probs.shape}")
    per_sample = neg(tsum(mul(log(probs), Tensor(target)), axis=1))
    if reduction == "sum":
        return tsum(per_sample)
    if reduction == "none":
        return per_sample
    return tmean(per_sample)

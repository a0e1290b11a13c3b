"""Small dense-tensor engine with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a local
gradient rule.  :func:`backward` orders the reachable nodes by creation
sequence (a valid topological order, since parents are always created before
children) and replays the rules in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DEFAULT_DTYPE = np.float64

_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern of every nonsmooth op evaluated in the block.

    Used by :func:`gradcheck` to discard finite-difference probes that cross a
    kink (ReLU boundary, VN half-space switch, argmax change).
    """
    prev = getattr(_state, "kinks", None)
    log: list[np.ndarray] = []
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


def _log_kink(pattern: np.ndarray) -> None:
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(np.array(pattern, copy=True))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)

    # -- basic properties ---------------------------------------------------
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

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar -----------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype or DEFAULT_DTYPE)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b), dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a), dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    dtype = parents[0].dtype if parents else None
    out = Tensor(data, dtype=dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """A node with a hand-written rule: ``backward(g)`` returns one gradient per parent."""
    return _make(np.asarray(data), tuple(parents), backward)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError(f"division by zero in tensor of shape {b.shape}")
    out_data = a.data / b.data

    def bw(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out_data, b.shape)

    return _make(out_data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _log_kink(mask)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)`` elementwise; gradient is zero where the floor is active."""
    mask = a.data >= floor
    _log_kink(mask)
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ZeroDivisionError("sqrt of a non-positive value has no finite gradient")
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,))


# -- linear algebra ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # weight-style right operand: one flat GEMM over all batch axes
        flat = a.data.reshape(-1, a.shape[-1])
        out_data = (flat @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), flat.T @ g2

        return _make(out_data, (a, b), bw)
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul batch extents incompatible: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out_data, (a, b), bw)


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable einsum for explicit-output subscripts without repeated
    indices inside a single operand."""
    if "->" not in subscripts:
        raise ValueError("einsum needs an explicit output ('->')")
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ValueError(f"einsum got {len(ops)} operands for '{subscripts}'")
    for s, o in zip(in_subs, ops):
        if len(s) != o.ndim:
            raise ValueError(f"einsum operand shape {o.shape} does not match '{s}'")
    out_data = np.einsum(subscripts, *[o.data for o in ops], optimize=True)

    def bw(g):
        grads = []
        for i, (s, o) in enumerate(zip(in_subs, ops)):
            if not o.requires_grad:
                grads.append(None)
                continue
            others = [ops[j].data for j in range(len(ops)) if j != i]
            other_subs = [in_subs[j] for j in range(len(ops)) if j != i]
            covered = set(out_sub).union(*other_subs) if other_subs else set(out_sub)
            missing = [c for c in s if c not in covered]
            expr = ",".join([out_sub] + other_subs) + "->" + "".join(c for c in s if c in covered)
            gi = np.einsum(expr, g, *others, optimize=True)
            if missing:
                # index summed away entirely: gradient is broadcast along it
                gi = np.expand_dims(gi, [s.index(c) for c in missing])
                gi = np.broadcast_to(gi, o.shape).copy()
            grads.append(gi)
        return grads

    return _make(out_data, tuple(ops), bw)


def cross(a: Tensor, b: Tensor) -> Tensor:
    """Cross product along the last axis."""

    def bw(g):
        return np.cross(b.data, g), np.cross(g, a.data)

    return _make(np.cross(a.data, b.data), (a, b), bw)


def spmm(matrix, a: Tensor) -> Tensor:
    """Constant sparse (or dense) matrix times ``a`` along its first axis."""
    flat = a.data.reshape(a.shape[0], -1)
    out_data = np.asarray(matrix @ flat).reshape((matrix.shape[0],) + a.shape[1:])
    mt = matrix.T

    def bw(g):
        return (np.asarray(mt @ g.reshape(g.shape[0], -1)).reshape(a.shape),)

    return _make(out_data, (a,), bw)


# -- reductions --------------------------------------------------------------
def _check_axis(a: Tensor, axis):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ValueError(f"axis {ax} invalid for tensor of rank {a.ndim}")
    return tuple(ax % a.ndim for ax in axes)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _check_axis(a, axis)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out_data, (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _check_axis(a, axis)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return scale(reduce_sum(a, axis, keepdims), 1.0 / count)


def reduce_max(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max reduction; the subgradient goes to the first maximal element."""
    if axis is None:
        flat = reshape(a, (-1,))
        return reduce_max(flat, 0, keepdims=False) if not keepdims else reshape(reduce_max(flat, 0), (1,) * a.ndim)
    (ax,) = _check_axis(a, axis)
    idx = np.argmax(a.data, axis=ax)  # argmax returns the first occurrence
    _log_kink(idx)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    if not keepdims:
        out_data = np.squeeze(out_data, ax)

    def bw(g):
        ga = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(ga, np.expand_dims(idx, ax), gk, axis=ax)
        return (ga,)

    return _make(out_data, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise FloatingPointError("softmax received non-finite input")
    (ax,) = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out_data * (g - (g * out_data).sum(axis=ax, keepdims=True)),)

    return _make(out_data, (a,), bw)


# -- shape ops ---------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return np.split(g, splits, axis=ax)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, np.expand_dims(t.data, axis).shape) for t in tensors]
    return concat(expanded, axis)


def getitem(a: Tensor, index) -> Tensor:
    out_data = a.data[index]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(np.array(out_data, copy=True), (a,), bw)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """``a[idx]`` along the first axis for an integer table of any shape."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather index out of range for axis of length {a.shape[0]}")
    out_data = a.data[idx]
    flat_idx = idx.reshape(-1)

    def bw(g):
        # scatter-add as a sparse product; much faster than np.add.at
        m = flat_idx.size
        scatter = sp.csr_matrix((np.ones(m, dtype=g.dtype), (flat_idx, np.arange(m))), shape=(a.shape[0], m))
        return (np.asarray(scatter @ g.reshape(m, -1)).reshape(a.shape),)

    return _make(out_data, (a,), bw)


def take_along_axis(a: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    ax = axis % a.ndim
    out_data = np.take_along_axis(a.data, idx, axis=ax)

    def bw(g):
        ga = np.zeros_like(a.data)
        full = np.broadcast_to(idx, g.shape)
        # scatter-add; idx positions along ax may repeat
        grid = list(np.indices(g.shape, sparse=True))
        grid[ax] = full
        np.add.at(ga, tuple(grid), g)
        return (ga,)

    return _make(out_data, (a,), bw)


def step_mask(a: Tensor) -> np.ndarray:
    """Constant 0/1 mask ``a >= 0``; logged as a kink for gradcheck."""
    mask = (a.data >= 0).astype(a.dtype)
    _log_kink(mask)
    return mask


# -- backward pass -----------------------------------------------------------
@dataclass
class Tape:
    """Ordered record of the ops reachable from a loss (creation order)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack_ = [out]
        while stack_:
            t = stack_.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack_.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, out: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    overwritten.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")
    tape = Tape.from_output(loss)
    tape.replay(loss, np.ones_like(loss.data))
    return tape


# -- parameter containers ----------------------------------------------------
def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


class Module:
    """Attribute-walking parameter container with hierarchical names."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            if missing:
                raise KeyError(f"state is missing parameters: {missing[:5]}")
        for name, p in params.items():
            if name in state:
                value = np.asarray(state[name], dtype=p.dtype)
                if value.shape != p.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
                p.data = value.copy()


# -- gradient checking -------------------------------------------------------
@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst: str = ""

    def passed(self, tol: float = 1e-3) -> bool:
        return self.checked > 0 and self.max_rel_error < tol


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: dict[str, Tensor] | Iterable[Tensor],
    *,
    step: float = 1e-6,
    coords_per_tensor: int | None = 8,
    rng: np.random.Generator | None = None,
    floor: float = 1e-7,
) -> GradcheckResult:
    """Compare analytic gradients against central finite differences.

    ``fn`` must rebuild the forward graph on each call.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.  A probe whose kink pattern differs
    between the base point and either displaced point is skipped.
    """
    if not isinstance(tensors, dict):
        tensors = {str(i): t for i, t in enumerate(tensors)}
    rng = rng or np.random.default_rng(0)
    for t in tensors.values():
        t.grad = None
    with record_kinks() as base_kinks:
        loss = fn()
    backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}

    def probe() -> tuple[float, list[np.ndarray]]:
        with no_grad(), record_kinks() as kinks:
            val = fn().item()
        return val, kinks

    def same(k1, k2) -> bool:
        return len(k1) == len(k2) and all(np.array_equal(x, y) for x, y in zip(k1, k2))

    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        if coords_per_tensor is None or coords_per_tensor >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=coords_per_tensor, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            fp, kp = probe()
            flat[c] = orig - step
            fm, km = probe()
            flat[c] = orig
            if not (same(kp, base_kinks) and same(km, base_kinks)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * step)
            ana = analytic[name].reshape(-1)[c]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{c}]"
    return GradcheckResult(worst, checked, skipped, worst_name)

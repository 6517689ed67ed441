"""Dense tensors with reverse-mode gradient recording.

Operations run eagerly on numpy arrays. While a :class:`GradientTape` is
active, every primitive whose inputs require gradients appends a node to the
tape; :func:`backward` replays the tape in reverse. Without an active tape
nothing is recorded, which is how inference runs.

A :class:`Probe` can be installed to support finite-difference checking of
piecewise-smooth programs: it fingerprints every discrete decision (relu
masks, argmax/argmin picks) and freezes stop-gradient values so that a
perturbed re-evaluation computes the surrogate function whose derivative the
tape reports.
"""
from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "GradientTape",
    "Probe",
    "GradCheckResult",
    "backward",
    "finite_diff_check",
    "note_decision",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "tanh",
    "softmax",
    "layer_norm",
    "max_over",
    "mean",
    "sum_over",
    "concat",
    "stack",
    "l2_norm",
    "scaled_dot_attention",
    "reshape",
    "transpose",
    "take",
    "stop_gradient",
    "straight_through",
]


class _State(threading.local):
    def __init__(self) -> None:
        self.tapes: list[GradientTape] = []
        self.probe: Probe | None = None


_state = _State()


class Tensor:
    """A real array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class GradientTape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so the record is always in
    topological order. A tape belongs to the thread that entered it.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _state.tapes.pop()
        assert popped is self, "gradient tapes must nest"

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> GradientTape | None:
    return _state.tapes[-1] if _state.tapes else None


class Probe:
    """Records discrete decisions and freezes stop-gradient values.

    In record mode (``replay=None``) every frozen value is captured. In
    replay mode the captured values are returned in order instead of the
    live ones, which turns each stop-gradient into a true constant.
    """

    def __init__(self, replay: list[np.ndarray] | None = None):
        self._hash = hashlib.blake2b(digest_size=16)
        self.frozen: list[np.ndarray] = []
        self.replay = replay
        self._cursor = 0

    @property
    def replaying(self) -> bool:
        return self.replay is not None

    @property
    def signature(self) -> str:
        return self._hash.hexdigest()

    def note(self, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr)
        self._hash.update(str(arr.shape).encode())
        self._hash.update(arr.tobytes())

    def freeze(self, value: np.ndarray) -> np.ndarray:
        if self.replay is None:
            self.frozen.append(value.copy())
            return value
        if self._cursor >= len(self.replay):
            raise _ReplayDiverged("more frozen values requested than recorded")
        stored = self.replay[self._cursor]
        self._cursor += 1
        if stored.shape != value.shape:
            raise _ReplayDiverged(f"frozen shape {stored.shape} != {value.shape}")
        return stored

    def __enter__(self) -> "Probe":
        if _state.probe is not None:
            raise RuntimeError("probes do not nest")
        _state.probe = self
        return self

    def __exit__(self, *exc) -> None:
        _state.probe = None


class _ReplayDiverged(RuntimeError):
    pass


def note_decision(arr) -> None:
    """Fingerprint a discrete choice (an index array or mask) if probing."""
    probe = _state.probe
    if probe is not None:
        probe.note(np.asarray(arr))


def _freeze(value: np.ndarray) -> np.ndarray:
    probe = _state.probe
    return value if probe is None else probe.freeze(value)


def _replaying() -> bool:
    probe = _state.probe
    return probe is not None and probe.replaying


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, name: str) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._leaf = False
        tape.nodes.append(_Node(out, parents, grad_fn, name))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "mul")

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), grad_fn, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading axes broadcast. ``dA = dC·Bᵀ`` and ``dB = Aᵀ·dC``.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn, "matmul")


# --------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_decision(np.packbits(mask))
    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), grad_fn, "layer_norm")


# --------------------------------------------------------------------------
# reductions


def max_over(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximizer."""
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    note_decision(idx)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), grad_fn, "max")


def sum_over(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(out, (x,), grad_fn, "mean")


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    out = np.sqrt((x.data * x.data).sum(axis=axis))
    zero = out == 0
    note_decision(np.packbits(zero))

    def grad_fn(g):
        safe = np.where(zero, 1, out)
        scale = np.where(zero, 0, g / safe)
        return (x.data * np.expand_dims(scale, axis),)

    return _make(out, (x,), grad_fn, "l2_norm")


# --------------------------------------------------------------------------
# structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tuple(tensors), grad_fn, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, indices, axis=axis)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        if axis == 0:
            np.add.at(gx, indices, g)
        else:
            moved = np.moveaxis(gx, axis, 0)
            gm = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
            np.add.at(moved, indices, gm)
        return (gx,)

    return _make(out, (x,), grad_fn, "take")


# --------------------------------------------------------------------------
# attention


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(Q·Kᵀ/√d)·V`` over the last two axes; leading axes batch."""
    d = q.shape[-1]
    if d == 0:
        raise ShapeError("attention needs d > 0")
    if k.shape[-2] == 0:
        raise ShapeError("attention over an empty memory (m = 0)")
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ShapeError(f"attention shapes disagree: Q{q.shape} K{k.shape} V{v.shape}")
    scale = 1.0 / np.sqrt(d)
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.matmul(w, v.data)

    def grad_fn(g):
        gv = np.matmul(np.swapaxes(w, -1, -2), g) if v.requires_grad else None
        gw = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, k.data) if q.requires_grad else None
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data) if k.requires_grad else None
        return gq, gk, gv

    return _make(out.astype(q.dtype, copy=False), (q, k, v), grad_fn, "attention")


# --------------------------------------------------------------------------
# gradient routing


def stop_gradient(x: Tensor) -> Tensor:
    """A constant copy of ``x``; under a replaying probe, the recorded value."""
    return Tensor(_freeze(x.data))


def straight_through(f: Tensor, code: Tensor) -> Tensor:
    """Forward value ``code``; backward identity to ``f``, nothing to ``code``.

    Under a replaying probe the forward value is ``f + (code - f)`` with the
    bracket frozen at the recorded point, i.e. the surrogate
    ``f + stopgrad(code - f)``.
    """
    if f.shape != code.shape:
        raise ShapeError(f"straight_through: {f.shape} vs {code.shape}")
    offset = _freeze(code.data - f.data)
    out = f.data + offset if _replaying() else code.data.copy()
    return _make(out, (f,), lambda g: (g,), "straight_through")


# --------------------------------------------------------------------------
# backward pass


def backward(tape: GradientTape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    if not any(node.out is loss for node in reversed(tape.nodes)):
        raise ValueError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if parent.is_leaf:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg


# --------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[str, int] | None
    checked: int
    skipped: list[tuple[str, int]] = field(default_factory=list)
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def _relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    eps: float = 1e-5,
    entries: Mapping[str, Sequence[int]] | None = None,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare taped gradients with central differences.

    ``f`` recomputes a scalar from the current values of ``params``. Each
    checked entry is perturbed by ``±eps`` in place and restored. Entries
    whose perturbation changes any discrete decision (a relu crossing its
    kink, a different nearest code, ...) are skipped and reported rather
    than failed. Relative error is ``|a-n| / max(|a|, |n|, floor)``.

    ``entries`` limits the check to the given flat indices per parameter;
    by default every entry of every parameter is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}

    for p in params.values():
        p.grad = None
    with Probe() as base, GradientTape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite function value {loss.data}")
    backward(tape, loss)
    frozen, signature = base.frozen, base.signature

    def evaluate() -> tuple[float, bool]:
        try:
            with Probe(replay=frozen) as probe:
                value = f()
        except _ReplayDiverged:
            return float("nan"), False
        v = float(value.data.reshape(-1)[0])
        if not np.isfinite(v):
            raise NumericError("non-finite function value under perturbation")
        return v, probe.signature == signature

    result = GradCheckResult(0.0, None, 0)
    for name, p in params.items():
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
        todo = range(p.size) if entries is None else entries.get(name, ())
        worst_here = 0.0
        for i in todo:
            pos = np.unravel_index(int(i), p.shape)
            orig = p.data[pos]
            p.data[pos] = orig + eps
            up, ok_up = evaluate()
            p.data[pos] = orig - eps
            down, ok_down = evaluate()
            p.data[pos] = orig
            if not (ok_up and ok_down):
                result.skipped.append((name, int(i)))
                continue
            numeric = (up - down) / (2 * eps)
            err = _relative_error(float(analytic[i]), numeric, floor)
            result.checked += 1
            worst_here = max(worst_here, err)
            if result.worst is None or err > result.max_rel_error:
                result.max_rel_error = err
                result.worst = (name, int(i))
        result.per_param[name] = worst_here
    return result

"""Dense tensors with define-by-run reverse-mode differentiation.

Values live in numpy arrays. A :class:`Tape` records every primitive applied
while it is active and replays the recorded backward rules in reverse.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum(x * x)
    >>> tape.gradients(loss, [x])[0]
    array([2., 4., 6.])
"""
from __future__ import annotations

import builtins
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

_local = threading.local()


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable n-d array of reals, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else np.result_type(np.asarray(data), np.float32))
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self._tape: Tape | None = None

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
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return _wrap(self.data)

    def __repr__(self):
        extra = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=20)}{extra})"

    def __len__(self):
        return self.shape[0]

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    view = np.asarray(arr).view()
    view.flags.writeable = False
    t.data = view
    t.requires_grad = False
    t.node_id = None
    t._tape = None
    return t


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        return Tensor(x, dtype=np.float64)
    return Tensor(x, dtype=dtype)


class Tape:
    """Records primitives applied while active; replays them for gradients.

    A tape is single-threaded. Each thread has its own stack of active tapes,
    so distinct tapes may run concurrently on distinct threads.
    """

    def __init__(self):
        self.records: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._leaf_ids: dict[int, int] = {}
        self._leaves: list[Tensor] = []
        self._next_id = 0

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def id_of(self, t: Tensor) -> int | None:
        """Node id of ``t`` on this tape, or None if it does not participate."""
        if t._tape is self:
            return t.node_id
        return self._leaf_ids.get(id(t))

    def _track(self, t: Tensor) -> int | None:
        nid = self.id_of(t)
        if nid is None and t.requires_grad:
            nid = self._new_id()
            self._leaf_ids[id(t)] = nid
            self._leaves.append(t)  # keeps id(t) stable
        return nid

    def record(self, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        ids = tuple(self._track(t) for t in inputs)
        result = _wrap(out)
        if all(i is None for i in ids):
            return result
        result.node_id = self._new_id()
        result._tape = self
        self.records.append((result.node_id, ids, backward))
        return result

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradient of scalar ``loss`` with respect to every node it depends on."""
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        root = self.id_of(loss)
        if root is None:
            raise ValueError("loss is not recorded on this tape")
        grads: dict[int, np.ndarray] = {root: np.ones(loss.shape, dtype=loss.dtype)}
        for out_id, in_ids, rule in reversed(self.records):
            g = grads.get(out_id)
            if g is None:
                continue
            in_grads = rule(g)
            for nid, ig in zip(in_ids, in_grads):
                if nid is None or ig is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + ig
                else:
                    grads[nid] = ig
        return {k: _wrap(np.asarray(v)) for k, v in grads.items()}

    def gradients(self, loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` for each tensor in ``wrt`` (zeros when unreached)."""
        gmap = self.backward(loss)
        out = []
        for t in wrt:
            nid = self.id_of(t)
            g = gmap.get(nid) if nid is not None else None
            out.append(g.data if g is not None else np.zeros(t.shape, dtype=t.dtype))
        return out


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    return tape.backward(loss)


def _emit(out: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    tape = active_tape()
    if tape is None:
        return _wrap(out)
    return tape.record(out, inputs, rule)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(
        out, (a, b), lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting on the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a = a.requires_grad or a._tape is not None
    need_b = b.requires_grad or b._tape is not None

    if bd.ndim == 2:
        # (..., k) @ (k, n): fold the leading axes into one BLAS call
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def rule(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if need_a else None
            gb = a2.T @ g2 if need_b else None
            return ga, gb

        return _emit(out, (a, b), rule)

    def rule(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return _emit(ad @ bd, (a, b), rule)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; the gradient is zero where the floor binds."""
    xd = x.data
    live = xd > floor
    out = np.log(np.where(live, xd, floor))
    return _emit(out, (x,), lambda g: (np.where(live, g / np.where(live, xd, 1.0), 0.0).astype(xd.dtype),))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if not isinstance(x, Tensor):
        return builtins.sum(x)
    shape = x.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis, keepdims), 1.0 / n)


# ----------------------------------------------------------- shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _emit(np.array(x.data[key]), (x,), rule)


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return _emit(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),))


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad; ``widths`` holds one (before, after) pair per axis."""
    widths = tuple(tuple(w) for w in widths)
    sl = tuple(slice(b, n + b) for (b, _), n in zip(widths, x.shape))
    return _emit(np.pad(x.data, widths), (x,), lambda g: (g[sl],))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    cuts = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _emit(
        np.concatenate([t.data for t in xs], axis=axis), xs, lambda g: tuple(np.split(g, cuts, axis=axis))
    )


# ------------------------------------------------------------ nn primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    axis %= x.ndim
    last = axis == x.ndim - 1
    xd = x.data if last else np.moveaxis(x.data, axis, -1)
    shape = xd.shape
    y2 = kernels.softmax_fwd(xd.reshape(-1, shape[-1]))

    def rule(g):
        g2 = (g if last else np.moveaxis(g, axis, -1)).reshape(y2.shape)
        dx = kernels.softmax_bwd(g2, y2).reshape(shape)
        return (dx if last else np.moveaxis(dx, -1, axis),)

    y = y2.reshape(shape)
    return _emit(y if last else np.moveaxis(y, -1, axis), (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with the biased variance, then scale and shift."""
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: x {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    gd = gamma.data
    y, xhat, rstd = kernels.layer_norm_fwd(x.data.reshape(-1, C), gd, beta.data.astype(x.dtype), eps)

    def rule(g):
        dx, dg, db = kernels.layer_norm_bwd(g.reshape(-1, C), xhat, rstd, gd)
        return dx.reshape(x.shape), dg, db

    return _emit(y.reshape(x.shape), (x, gamma, beta), rule)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    y, dydx = kernels.gelu_fwd(x.data)
    return _emit(y, (x,), lambda g: (g * dydx,))


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` so eval is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    keep = rng.random(x.shape, dtype=np.float64 if x.dtype == np.float64 else np.float32) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    out = np.where(keep, x.data * scale, x.dtype.type(0))
    return _emit(out, (x,), lambda g: (np.where(keep, g * scale, g.dtype.type(0)),))


def cross_entropy(probs: Tensor, label: int, floor: float = 1e-12) -> Tensor:
    """``-log(probs[label])`` with the probability floored before the log."""
    K = probs.shape[-1]
    if not 0 <= label < K:
        raise ValueError(f"label {label} out of range for {K} classes")
    return mul(log(index(probs, (..., label)), floor), -1.0)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``softmax(logits)`` over a batch, fused for stability.

    Equal to averaging :func:`cross_entropy` of the softmax rows; the fused
    gradient is ``(p - onehot) / batch``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, K = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ValueError("labels must be a length-batch vector of class indices")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def rule(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _emit(loss, (logits,), rule)


# ------------------------------------------------------------ grad checking


def finite_diff_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    floor: float = 1e-6,
    paths: Iterable[str] | None = None,
) -> tuple[float, str | None, tuple[int, ...] | None]:
    """Compare tape gradients of ``f`` with central differences, scalar by scalar.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    round-off on near-zero gradients from registering as relative error.
    Returns ``(worst_error, path, index)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        base = f(params)
    if not np.isfinite(base.data).all():
        raise FloatingPointError("f returned a non-finite value")
    names = sorted(params) if paths is None else list(paths)
    analytic = dict(zip(names, tape.gradients(base, [params[k] for k in names])))

    worst, where, at = 0.0, None, None
    for name in names:
        p = params[name]
        for idx in np.ndindex(*p.shape):
            vals = []
            for sign in (1.0, -1.0):
                arr = np.array(p.data)
                arr[idx] += sign * eps
                trial = dict(params)
                trial[name] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
                v = float(f(trial).data)
                if not np.isfinite(v):
                    raise FloatingPointError(f"f non-finite at {name}{list(idx)}")
                vals.append(v)
            num = (vals[0] - vals[1]) / (2.0 * eps)
            ana = float(analytic[name][idx])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err > worst or where is None:
                worst, where, at = max(err, worst), name, idx
    return worst, where, at

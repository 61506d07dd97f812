"""Minimal reverse-mode differentiation over dense numpy arrays.

Only the primitives the gait transformer and its losses need are provided.
Recording happens on an explicit :class:`Tape`; with no tape active every
primitive is a plain numpy computation (the eval fast path). Reverse
traversal walks the tape in reverse recording order, which visits every
node after all of its consumers, so gradient accumulation is complete by
the time a node's own backward rule runs.

Reductions use numpy's fixed (pairwise) summation order, so forward values
are bit-reproducible for a fixed evaluation order and thread count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "softmax",
    "layer_norm",
    "gelu",
    "tanh",
    "exp",
    "log",
    "reduce_sum",
    "reduce_mean",
    "l2_normalize",
    "embedding_select",
    "masked_fill",
    "grad_check",
    "GradCheckReport",
]


class Tensor:
    """A dense array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Recording of primal ops enabling a single reverse sweep."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward))

    def backward(self, root: Tensor) -> None:
        """Seed d(root)/d(root) = 1 and accumulate into every reachable input."""
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
        root.grad = np.ones_like(root.data)
        for out, backward in reversed(self._nodes):
            if out.grad is not None:
                backward(out.grad)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Non-inplace addition: grads coming out of backward rules may be views
    # of other buffers, and those must never be mutated.
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient produced under numpy broadcasting back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, backward)
    return out


# --- arithmetic -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _record(out_data, (a, b), backward)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(a.data * b.data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * s)

    return _record(a.data * s, (a,), backward)


# --- shape ----------------------------------------------------------------


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.transpose(g, inverse))

    return _record(np.transpose(a.data, axes), (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    orig = a.data.shape

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(orig))

    return _record(a.data.reshape(shape), (a,), backward)


def concat(parts: Sequence, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                _accumulate(p, g[tuple(sl)])

    return _record(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"axis {axis} out of range for ndim {a.data.ndim}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[sl] = g
            _accumulate(a, full)

    return _record(a.data[sl], (a,), backward)


# --- nonlinear ------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    return _record(y, (a,), backward)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Pre-affine normalization: (x - mean) / sqrt(var + eps) along `axis`."""
    a = as_tensor(a)
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    mu = np.mean(a.data, axis=axis, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.data.dtype))
    y = xc * inv

    def backward(g):
        if a.requires_grad:
            gm = np.mean(g, axis=axis, keepdims=True)
            gy = np.mean(g * y, axis=axis, keepdims=True)
            _accumulate(a, inv * (g - gm - y * gy))

    return _record(y, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    c = np.asarray(_GELU_C, dtype=x.dtype)
    k = np.asarray(0.044715, dtype=x.dtype)
    t = np.tanh(c * (x + k * x * x * x))
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            du = c * (1.0 + 3.0 * k * x * x)
            _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _record(y, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - y * y))

    return _record(y, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * y)

    return _record(y, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _record(np.log(a.data), (a,), backward)


# --- reductions -----------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _expand_reduced(g, a.data.shape, axis, keepdims))

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _expand_reduced(g, a.data.shape, axis, keepdims) / count)

    return _record(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / sqrt(sum(x^2) + eps) along `axis`."""
    a = as_tensor(a)
    if eps <= 0:
        raise ValueError("l2_normalize eps must be > 0")
    ss = np.sum(a.data * a.data, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(ss + np.asarray(eps, dtype=a.data.dtype))
    y = a.data * inv

    def backward(g):
        if a.requires_grad:
            dot = np.sum(g * a.data, axis=axis, keepdims=True)
            _accumulate(a, g * inv - a.data * (dot * inv * inv * inv))

    return _record(y, (a,), backward)


# --- indexing -------------------------------------------------------------


def embedding_select(table, indices) -> Tensor:
    """Select rows of a 2-D table by integer index."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ValueError("indices must be integers")

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            _accumulate(table, full)

    return _record(table.data[idx], (table,), backward)


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where `mask` is True by `value`; gradient is zero there."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    fill = np.asarray(value, dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.where(mask, np.zeros((), dtype=g.dtype), g), a.data.shape))

    return _record(np.where(mask, fill, a.data), (a,), backward)


# --- gradient checking ----------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_coords: int
    worst: GradCheckEntry | None
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    step: float | Sequence[float] = 1e-4,
    tol: float = 1e-5,
    rng: np.random.Generator | None = None,
    exhaustive_limit: int = 64,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar `f` against central differences.

    Every coordinate is checked for tensors up to `exhaustive_limit` elements;
    larger tensors get `exhaustive_limit` random coordinates. Relative error
    uses denominator max(|analytic|, |numeric|, 1e-8). Requires float64 params
    and a deterministic `f`.

    `step` may be a ladder of step sizes; each coordinate then scores its
    best-conditioned central difference (small steps suit sharp directions,
    larger steps suit near-flat ones whose difference is roundoff-limited).
    A wrong analytic gradient disagrees at every step, so the ladder only
    removes the oracle's own discretization error.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params, '{name}' is {p.data.dtype}")
    rng = rng if rng is not None else np.random.default_rng(0)
    steps = [float(step)] if np.isscalar(step) else [float(s) for s in step]
    if not steps or any(s <= 0 for s in steps):
        raise ValueError("grad_check steps must be positive")

    with Tape() as tape:
        out = f(params)
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise NumericalError("grad_check: function value must be a finite scalar")
    tape.backward(out)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    for p in params.values():
        p.grad = None

    def evaluate() -> float:
        v = float(f(params).data)
        if not np.isfinite(v):
            raise NumericalError("grad_check: non-finite function value during probing")
        return v

    worst: GradCheckEntry | None = None
    max_rel = 0.0
    n_coords = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.size
        if size <= exhaustive_limit:
            coords = range(size)
        else:
            coords = sorted(rng.choice(size, size=exhaustive_limit, replace=False).tolist())
        gflat = analytic[name].reshape(-1)
        for i in coords:
            ana = float(gflat[i])
            orig = flat[i]
            best_rel = None
            best_numeric = 0.0
            for h in steps:
                flat[i] = orig + h
                f_plus = evaluate()
                flat[i] = orig - h
                f_minus = evaluate()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
                if best_rel is None or rel < best_rel:
                    best_rel = rel
                    best_numeric = numeric
            n_coords += 1
            if best_rel >= max_rel:
                max_rel = best_rel
                worst = GradCheckEntry(
                    name=name,
                    index=tuple(int(v) for v in np.unravel_index(i, p.data.shape)),
                    analytic=ana,
                    numeric=best_numeric,
                    rel_err=best_rel,
                )
    return GradCheckReport(max_rel_err=max_rel, n_coords=n_coords, worst=worst, tol=tol)

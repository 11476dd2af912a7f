"""Tape-based reverse-mode differentiation over dense numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order
together with a closure computing their vector-Jacobian product.
:func:`backward` replays the tape once in reverse. Outside a tape every
operation is a plain numpy evaluation, which is what inference uses.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class SelectionInstabilityError(RuntimeError):
    """Raised by :func:`grad_check` when routing flips under every probe."""


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_inputs", "_vjp", "_tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            if dtype is None and np.issubdtype(arr.dtype, np.number):
                arr = arr.astype(np.float64)
            else:
                raise TypeError(f"unsupported tensor dtype {arr.dtype}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._inputs: tuple = ()
        self._vjp: Callable | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if np.isscalar(value):
        return Tensor(np.full(like.shape, value, dtype=like.dtype))
    return Tensor(np.asarray(value, dtype=like.dtype))


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


class Tape:
    """Ordered record of the primitive operations run inside its context."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape contexts exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
        backward(loss, params)


@contextmanager
def no_tape():
    """Temporarily suspend recording on this thread."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    # A sum is non-finite whenever any element is; much cheaper than isfinite().all().
    if not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


def _emit(arr: np.ndarray, op: str, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _finite(arr, op)
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._inputs = ()
    out._vjp = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._vjp = vjp
        out._tape = tape
        tape.nodes.append(out)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaves listed in ``params`` that the loss does not depend on receive an
    all-zero gradient. Existing gradients are overwritten, not accumulated.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss._vjp is None:
        if loss.requires_grad:
            leaves[id(loss)] = loss
    else:
        for node in reversed(loss._tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for inp, gi in zip(node._inputs, node._vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    if inp._vjp is None:
                        leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
    if params is not None:
        for p in params:
            if id(p) not in leaves:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * x.dtype.type(c), "scale", (x,), lambda g: (g * x.dtype.type(c),))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis; the only broadcast supported."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ValueError(f"bias_add: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _emit(x.data + b.data, "bias_add", (x, b), lambda g: (g, g.sum(axis=lead)))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``i`` of a 2-D tensor by ``w[i]``."""
    if x.ndim != 2 or w.shape != (x.shape[0],):
        raise ValueError(f"scale_rows: weights {w.shape} do not match rows of {x.shape}")
    xd, wd = x.data, w.data

    def vjp(g):
        return g * wd[:, None], (g * xd).sum(axis=1)

    return _emit(xd * wd[:, None], "scale_rows", (x, w), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GeLU in its tanh form, ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    xd = x.data
    c = x.dtype.type(_GELU_C)
    a = x.dtype.type(_GELU_A)
    t = np.tanh(c * (xd + a * xd * xd * xd))
    half = x.dtype.type(0.5)

    def vjp(g):
        dt = (1 - t * t) * c * (1 + 3 * a * xd * xd)
        return (g * (half * (1 + t) + half * xd * dt),)

    return _emit(half * xd * (1 + t), "gelu", (x,), vjp)


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    fill = x.dtype.type(value)
    return _emit(np.where(keep, x.data, fill), "masked_fill", (x,), lambda g: (np.where(keep, g, 0),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., n, k]`` with ``b[k, m]`` or ``b[..., k, m]`` (same batch dims)."""
    if a.dtype != b.dtype:
        raise TypeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, m = bd.shape

        def vjp(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m) if b.requires_grad else None
            return ga, gb

    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise ValueError(f"matmul: batch dims differ {a.shape} @ {b.shape}")

        def vjp(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    return _emit(ad @ bd, "matmul", (a, b), vjp)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if gain.shape != x.shape[-1:]:
        raise ValueError(f"rms_norm: gain {gain.shape} vs input {x.shape}")
    xd, gd = x.data, gain.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    normed = xd * inv
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        gy = g * gd
        gx = inv * (gy - normed * (gy * normed).mean(axis=-1, keepdims=True))
        return gx, (g * normed).sum(axis=lead)

    return _emit(normed * gd, "rms_norm", (x, gain), vjp)


# ---------------------------------------------------------------- shape / indexing


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inverse),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _emit(x.data[index].copy(), "slice", (x,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat of no tensors")
    axis = axis % parts[0].ndim
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(np.concatenate([p.data for p in parts], axis=axis), "concat", tuple(parts), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def vjp(g):
        flat = ids.ravel()
        onehot = np.zeros((table.shape[0], flat.size), dtype=table.dtype)
        onehot[flat, np.arange(flat.size)] = 1
        return (onehot @ g.reshape(-1, table.shape[1]),)

    return _emit(table.data[ids], "embedding", (table,), vjp)


def gather_rows(x: Tensor, rows: np.ndarray, unique: bool = False) -> Tensor:
    """``x[rows]``; pass ``unique=True`` when ``rows`` has no repeats (faster backward)."""
    rows = np.asarray(rows, dtype=np.intp)

    def vjp(g):
        gx = np.zeros_like(x.data)
        if unique:
            gx[rows] = g
        else:
            np.add.at(gx, rows, g)
        return (gx,)

    return _emit(x.data[rows], "gather_rows", (x,), vjp)


def scatter_rows(n_rows: int, parts: Sequence[tuple[np.ndarray, Tensor]], like: Tensor) -> Tensor:
    """Sum each ``(rows, values)`` contribution into a zero ``[n_rows, ...]`` tensor.

    Rows may repeat across parts but must be distinct within one part.
    """
    out = np.zeros((n_rows,) + like.shape[1:], dtype=like.dtype)
    index = [np.asarray(r, dtype=np.intp) for r, _ in parts]
    for rows, (_, t) in zip(index, parts):
        if t.shape[0] != len(rows) or t.shape[1:] != like.shape[1:]:
            raise ValueError(f"scatter_rows: part {t.shape} does not match {len(rows)} rows")
        out[rows] += t.data

    def vjp(g):
        return tuple(g[rows] for rows in index)

    return _emit(out, "scatter_rows", tuple(t for _, t in parts), vjp)


def take_along(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick ``x[r, idx[r, j]]`` from a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 2 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ValueError(f"take_along: index {idx.shape} vs tensor {x.shape}")
    rows = np.arange(x.shape[0])[:, None]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (np.broadcast_to(rows, idx.shape), idx), g)
        return (gx,)

    return _emit(x.data[rows, idx], "take_along", (x,), vjp)


def pick(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Elements ``x[rows[i], cols[i]]`` of a 2-D tensor as a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _emit(x.data[rows, cols], "pick", (x,), vjp)


def scatter_cols(x: Tensor, idx: np.ndarray, width: int) -> Tensor:
    """Place ``x[r, j]`` at column ``idx[r, j]`` of a zero ``[rows, width]`` tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.shape != idx.shape or x.ndim != 2:
        raise ValueError(f"scatter_cols: index {idx.shape} vs values {x.shape}")
    rows = np.arange(x.shape[0])[:, None]
    out = np.zeros((x.shape[0], width), dtype=x.dtype)
    out[rows, idx] = x.data
    return _emit(out, "scatter_cols", (x,), lambda g: (g[rows, idx],))


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        return _emit(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = axis % x.ndim
    return _emit(
        x.data.sum(axis=axis),
        "sum",
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if x.data.size == 0:
        raise ValueError("mean of an empty tensor")
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    if logits.ndim == 0 or logits.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    _finite(logits.data, "softmax input")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, "softmax", (logits,), vjp)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    if logits.ndim == 0 or logits.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _emit(y, "log_softmax", (logits,), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over the masked-in rows of ``logits[T, V]``."""
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects [T, V] logits, got {logits.shape}")
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.intp)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if targets.shape != (n,) or mask.shape != (n,):
        raise ValueError("cross_entropy: targets and mask must have one entry per row")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is masked out")
    live = targets[mask]
    if live.min() < 0 or live.max() >= vocab:
        raise IndexError(f"cross_entropy: target id out of range [0, {vocab})")
    _finite(logits.data, "cross_entropy input")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe = np.where(mask, targets, 0)
    nll = -logp[np.arange(n), safe]
    loss = nll[mask].sum() / count

    def vjp(g):
        grad = np.exp(logp)
        grad[np.arange(n), safe] -= 1.0
        grad *= (mask / count).astype(logits.dtype)[:, None]
        return (grad * g,)

    return _emit(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), vjp)


# ---------------------------------------------------------------- discrete selection

_selection_log: threading.local = threading.local()


@contextmanager
def record_selections():
    """Collect every top-k index array chosen on this thread inside the block."""
    log: list[np.ndarray] = []
    previous = getattr(_selection_log, "log", None)
    _selection_log.log = log
    try:
        yield log
    finally:
        _selection_log.log = previous


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, ties resolved toward the lower index."""
    if k <= 0 or k > scores.shape[-1]:
        raise ValueError(f"top-k with k={k} over a pool of {scores.shape[-1]}")
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    log = getattr(_selection_log, "log", None)
    if log is not None:
        log.append(order.copy())
    return order


# ---------------------------------------------------------------- verification


def _selection_signature(log: list[np.ndarray]) -> bytes:
    return b"|".join(np.sort(a, axis=-1).tobytes() for a in log)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    probes: int = 64,
    seed: int = 0,
    max_resamples: int = 10,
    floor: float = 1e-7,
    step: float = 1e-5,
) -> float:
    """Compare taped gradients with central finite differences.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    Each probe picks a random parameter entry; a probe whose ±h perturbation
    changes any top-k selection is re-drawn. Returns the largest relative
    error ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    The difference step is ``step * max(1, |theta|)``. For a loss of order
    one, rounding noise in the numeric estimate is about ``1e-16 / step``, so
    checks over entries with gradients near ``floor`` want a larger step.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
    with record_selections() as log, Tape() as tape:
        loss = loss_fn()
    base_sig = _selection_signature(log)
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]
    del tape

    def evaluate() -> tuple[float, bytes]:
        with record_selections() as log, no_tape():
            value = loss_fn().item()
        return value, _selection_signature(log)

    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params], dtype=float)
    weights = sizes / sizes.sum()
    worst = 0.0
    for _ in range(probes):
        for attempt in range(max_resamples + 1):
            pi = int(rng.choice(len(params), p=weights))
            p = params[pi]
            flat = int(rng.integers(p.data.size))
            idx = np.unravel_index(flat, p.shape)
            theta = float(p.data[idx])
            h = step * max(1.0, abs(theta))
            p.data[idx] = theta + h
            f_plus, sig_plus = evaluate()
            p.data[idx] = theta - h
            f_minus, sig_minus = evaluate()
            p.data[idx] = theta
            if sig_plus == base_sig and sig_minus == base_sig:
                break
        else:
            name = p.name or f"param[{pi}]"
            raise SelectionInstabilityError(
                f"top-k selection changed under perturbation of {name} after {max_resamples} re-samples"
            )
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[pi][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst

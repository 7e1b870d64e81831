"""Reverse-mode automatic differentiation on 64-bit numpy arrays.

A forward pass records every differentiable operation onto an explicit
:class:`Tape`; ``tape.backward(loss)`` replays the records in reverse
execution order (which is a valid topological order) and accumulates
gradients into each tensor's ``grad`` slot.  Outside a ``with Tape():``
block the same functions run as plain numpy, which is what evaluation
and finite-difference probes use.

All math is float64: desk-scale models are small enough that speed is
irrelevant and gradient checking needs the precision.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "TapeError",
    "Tensor",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "concat",
    "stack",
    "take_rows",
    "index",
    "reduce_sum",
    "mean",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "sqrt",
    "softplus",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "cross_entropy_sum",
    "binary_cross_entropy",
    "as_tensor",
    "active_tape",
]


class TapeError(RuntimeError):
    """Misuse of the recording tape (e.g. backward called twice)."""


_ACTIVE_TAPE: "Tape | None" = None


def active_tape() -> "Tape | None":
    return _ACTIVE_TAPE


class Tape:
    """Operation record for one forward pass.

    Single-use: tapes are never reused across training steps.  Recording
    is not thread-safe; one tape is active at a time per process.
    """

    __slots__ = ("_records", "_spent")

    def __init__(self):
        self._records = []
        self._spent = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, backward_fn) -> None:
        self._records.append(backward_fn)

    def backward(self, loss: "Tensor") -> None:
        """Fill gradient slots of every tensor reachable from ``loss``.

        Tensors that never influenced the loss keep ``grad`` of zeros
        (or ``None`` if they were not touched at all this pass).
        """
        if self._spent:
            raise TapeError("backward already ran on this tape; record a new pass")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not np.isfinite(loss.data).all():
            raise TapeError("loss is not finite; refusing to backpropagate")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._records):
            fn()


class Tensor:
    """A float64 array plus a gradient slot filled by ``Tape.backward``."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __neg__(self):
        return mul(self, as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad, a.data.shape))
            _accum(b, _unbroadcast(out.grad, b.data.shape))

        tape.record(backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad, a.data.shape))
            _accum(b, _unbroadcast(-out.grad, b.data.shape))

        tape.record(backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

        tape.record(backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            _accum(a, _unbroadcast(out.grad / b.data, a.data.shape))
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

        tape.record(backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product with numpy semantics for 1-D and 2-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError(f"matmul supports 1-D/2-D operands, got {a.ndim}-D @ {b.ndim}-D")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    tape = _ACTIVE_TAPE
    if tape is not None:
        a_nd, b_nd = a.ndim, b.ndim

        def backward():
            if out.grad is None:
                return
            g = out.grad
            if a_nd == 2 and b_nd == 2:
                _accum(a, g @ b.data.T)
                _accum(b, a.data.T @ g)
            elif a_nd == 2 and b_nd == 1:
                _accum(a, np.outer(g, b.data))
                _accum(b, a.data.T @ g)
            elif a_nd == 1 and b_nd == 2:
                _accum(a, b.data @ g)
                _accum(b, np.outer(a.data, g))
            else:
                _accum(a, g * b.data)
                _accum(b, g * a.data)

        tape.record(backward)
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T)
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            _accum(a, out.grad.T)

        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    tape = _ACTIVE_TAPE
    if tape is not None:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward():
            if out.grad is None:
                return
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, out.grad[tuple(sl)])

        tape.record(backward)
    return out


def stack(tensors) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors]))
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            for i, t in enumerate(tensors):
                _accum(t, out.grad[i])

        tape.record(backward)
    return out


def take_rows(matrix: Tensor, ids) -> Tensor:
    """Gather rows by integer ids; duplicate ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.intp)
    out = Tensor(matrix.data[ids])
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            if matrix.grad is None:
                matrix.grad = np.zeros_like(matrix.data)
            np.add.at(matrix.grad, ids, out.grad)

        tape.record(backward)
    return out


def index(a: Tensor, key) -> Tensor:
    """Basic slicing/indexing; backward scatters into a zero buffer."""
    out = Tensor(a.data[key])
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, key, out.grad)

        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))

        tape.record(backward)
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), as_tensor(1.0 / n))


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def _unary(a: Tensor, value: np.ndarray, dlocal: np.ndarray) -> Tensor:
    out = Tensor(value)
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            _accum(a, out.grad * dlocal)

        tape.record(backward)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _unary(a, y, 1.0 - y * y)


def sigmoid(a: Tensor) -> Tensor:
    # stable for both signs
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _unary(a, y, y * (1.0 - y))


def relu(a: Tensor) -> Tensor:
    return _unary(a, np.maximum(a.data, 0.0), (a.data > 0).astype(np.float64))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _unary(a, y, y)


def log(a: Tensor) -> Tensor:
    return _unary(a, np.log(a.data), 1.0 / a.data)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _unary(a, y, 0.5 / y)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x) computed without overflow; derivative is sigmoid(x)."""
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _unary(a, y, s)


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Probability
    vector(s) along ``axis``; max-shifted so huge scores cannot overflow."""
    if a.data.size == 0:
        raise ValueError("softmax of empty input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            g = out.grad
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(a, y * (g - dot))

        tape.record(backward)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.size == 0:
        raise ValueError("log_softmax of empty input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)
    tape = _ACTIVE_TAPE
    if tape is not None:
        p = np.exp(y)

        def backward():
            if out.grad is None:
                return
            g = out.grad
            _accum(a, g - p * g.sum(axis=axis, keepdims=True))

        tape.record(backward)
    return out


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logit vector."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ValueError(f"cross_entropy expects a 1-D logit vector, got {logits.shape}")
    k = logits.data.shape[0]
    if not 0 <= int(target) < k:
        raise ValueError(f"target {target} out of range for {k} classes")
    target = int(target)
    shifted = logits.data - logits.data.max()
    p = np.exp(shifted)
    p /= p.sum()
    out = Tensor(-(shifted[target] - np.log(np.exp(shifted).sum())))
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            g = p.copy()
            g[target] -= 1.0
            _accum(logits, g * out.grad)

        tape.record(backward)
    return out


def cross_entropy_sum(logits: Tensor, targets) -> Tensor:
    """Sum of per-row cross-entropies for a (n, K) logit matrix."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or targets.ndim != 1 or logits.data.shape[0] != targets.shape[0]:
        raise ValueError("cross_entropy_sum expects (n, K) logits and n targets")
    k = logits.data.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValueError("target index out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(targets.shape[0])
    out = Tensor(-(shifted[rows, targets] - lse[:, 0]).sum())
    tape = _ACTIVE_TAPE
    if tape is not None:
        p = np.exp(shifted - lse)

        def backward():
            if out.grad is None:
                return
            g = p.copy()
            g[rows, targets] -= 1.0
            _accum(logits, g * out.grad)

        tape.record(backward)
    return out


def binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Standard (negative) multi-label BCE from logits, summed over entries.

    Computed in log-space as sum(softplus(x) - y*x), which equals
    -sum(y*log(sigmoid(x)) + (1-y)*log(1-sigmoid(x))) without ever
    forming the probabilities.
    """
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if logits.ndim != 1 or y.shape != logits.data.shape:
        raise ValueError(
            f"binary_cross_entropy length mismatch: logits {logits.shape}, targets {y.shape}"
        )
    return reduce_sum(sub(softplus(logits), mul(logits, as_tensor(y))))

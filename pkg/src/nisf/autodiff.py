"""Dense real tensors with a reverse-mode automatic differentiation tape.

Design notes:

* numpy arrays are the storage; the tape and all backward rules are
  implemented here. Tests run in float64 (finite differences are
  unreliable in float32); float32 is available for training speed via
  ``set_default_dtype``.
* Broadcasting is deliberately restricted to scalar-with-tensor and
  equal-shape operands so every backward rule stays auditable. Row-vector
  bias addition and row broadcasting of a latent vector are separate,
  named operations with explicit sum-over-rows backward rules.
* Every operation validates that its output is finite; a NaN/Inf raises
  ``NumericalError`` instead of propagating silently.
* Gradient tracking happens only while a ``Tape`` is active. Evaluating
  a frozen model outside a tape records nothing and is safe to run from
  many threads (pure reads).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

LOG_EPS = 1e-12  # single numerical guard: log(x) reads max(x, LOG_EPS)

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64
_finite_checks = True
_active_tape: "Tape | None" = None


def set_default_dtype(name: str) -> None:
    """Set the dtype used for newly created tensors ("float64" or "float32")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ContractError(f"unsupported dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_finite_checks(enabled: bool) -> None:
    """Enable/disable the per-op finite-value check (on by default)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def active_tape() -> "Tape | None":
    return _active_tape


class Tensor:
    """A dense n-dimensional real array with optional gradient tracking."""

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def reset_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Arithmetic sugar; the module-level functions carry the contracts.
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def reset_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.reset_grad()


class Tape:
    """Ordered record of executed operations with their backward rules.

    Entries are appended in execution order, so inputs of any op were
    recorded before the op itself; ``backward`` walks the record in
    reverse. Repeated ``backward`` calls accumulate into leaf gradients
    (clear with ``reset_grads``). A tape is confined to one logical
    training context; it is not safe to share a recording tape between
    threads.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._prev: Tape | None = None

    def __len__(self) -> int:
        return len(self._entries)

    def __enter__(self) -> "Tape":
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = self._prev
        self._prev = None

    def record(self, output: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._entries.append((output, backward))

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of every requires_grad leaf reachable from ``loss``."""
        if loss.values.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._entries:
            raise ContractError("backward on an empty tape")
        # Intermediate grads are per-walk scratch; leaves accumulate across walks.
        for out, _ in self._entries:
            out.grad = None
        loss.grad = np.ones_like(loss.values)
        for out, rule in reversed(self._entries):
            if out.grad is None:
                continue
            rule(out.grad)
            # An entry's output grad is complete here (all consumers were
            # recorded later, hence already walked); free it to cap memory.
            out.grad = None


def backward(loss: Tensor) -> None:
    """Run backward on the active tape (must be inside a ``with Tape()`` block)."""
    if _active_tape is None:
        raise ContractError("backward called with no active tape")
    _active_tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing


def _check_finite(vals: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(vals)):
        raise NumericalError(f"op '{op}' produced non-finite values")


def _make_output(vals: np.ndarray, op: str, inputs: Sequence[Tensor],
                 backward: Callable[[np.ndarray], None]) -> Tensor:
    _check_finite(vals, op)
    needs = _active_tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(vals, requires_grad=needs)
    if needs:
        _active_tape.record(out, backward)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.values.dtype, copy=True)
    else:
        t.grad += g


def _as_operands(a, b, op: str):
    """Resolve a binary op's operands under the restricted broadcasting rule."""
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    if at and bt:
        if a.shape != b.shape:
            raise DimensionError(f"op '{op}' needs equal shapes, got {a.shape} and {b.shape}")
        return a, b, a.values, b.values
    if at and isinstance(b, (int, float)):
        return a, None, a.values, float(b)
    if bt and isinstance(a, (int, float)):
        return None, b, float(a), b.values
    raise DimensionError(f"op '{op}' takes tensors or python scalars, got {type(a)} and {type(b)}")


# ---------------------------------------------------------------------------
# matrix product


def _gemm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # BLAS routes m==1 / n==1 products through gemv-style kernels whose
    # summation order differs from gemm; padding degenerate dims to 2 keeps
    # per-row results bit-identical across batch sizes.
    pad_m = x.shape[0] < 2
    pad_n = y.shape[1] < 2
    if pad_m:
        x = np.concatenate([x, x], axis=0)
    if pad_n:
        y = np.concatenate([y, y], axis=1)
    out = x @ y
    if pad_m:
        out = out[:1]
    if pad_n:
        out = out[:, :1]
    return np.ascontiguousarray(out) if (pad_m or pad_n) else out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m,k] and b [k,n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    vals = _gemm(a.values, b.values)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g @ b.values.T)
        if b.requires_grad:
            _accumulate(b, a.values.T @ g)

    return _make_output(vals, "matmul", (a, b), rule)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b with a row-vector bias: one tape entry per layer."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"linear needs [B,k] @ [k,n] + [n], got {x.shape}, "
                             f"{w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"linear extents disagree: {x.shape}, {w.shape}, {b.shape}")
    vals = _gemm(x.values, w.values) + b.values

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g @ w.values.T)
        if w.requires_grad:
            _accumulate(w, x.values.T @ g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return _make_output(vals, "linear", (x, w, b), rule)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    ta, tb, va, vb = _as_operands(a, b, "add")
    vals = va + vb

    def rule(g: np.ndarray) -> None:
        if ta is not None and ta.requires_grad:
            _accumulate(ta, g)
        if tb is not None and tb.requires_grad:
            _accumulate(tb, g)

    return _make_output(vals, "add", [t for t in (ta, tb) if t is not None], rule)


def sub(a, b) -> Tensor:
    ta, tb, va, vb = _as_operands(a, b, "sub")
    vals = va - vb

    def rule(g: np.ndarray) -> None:
        if ta is not None and ta.requires_grad:
            _accumulate(ta, g)
        if tb is not None and tb.requires_grad:
            _accumulate(tb, -g)

    return _make_output(vals, "sub", [t for t in (ta, tb) if t is not None], rule)


def mul(a, b) -> Tensor:
    ta, tb, va, vb = _as_operands(a, b, "mul")
    vals = va * vb

    def rule(g: np.ndarray) -> None:
        if ta is not None and ta.requires_grad:
            _accumulate(ta, g * vb)
        if tb is not None and tb.requires_grad:
            _accumulate(tb, g * va)

    return _make_output(vals, "mul", [t for t in (ta, tb) if t is not None], rule)


def div(a, b) -> Tensor:
    ta, tb, va, vb = _as_operands(a, b, "div")
    vals = va / vb

    def rule(g: np.ndarray) -> None:
        if ta is not None and ta.requires_grad:
            _accumulate(ta, g / vb)
        if tb is not None and tb.requires_grad:
            _accumulate(tb, -g * va / (vb * vb))

    return _make_output(vals, "div", [t for t in (ta, tb) if t is not None], rule)


def exp(x: Tensor) -> Tensor:
    vals = np.exp(x.values)

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * vals)

    return _make_output(vals, "exp", (x,), rule)


def cos(x: Tensor) -> Tensor:
    vals = np.cos(x.values)

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, -g * np.sin(x.values))

    return _make_output(vals, "cos", (x,), rule)


def square(x: Tensor) -> Tensor:
    vals = x.values * x.values

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, 2.0 * g * x.values)

    return _make_output(vals, "square", (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    # exp(-|x|) never overflows; both branches share it.
    z = np.exp(-np.abs(x.values))
    vals = np.where(x.values >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * vals * (1.0 - vals))

    return _make_output(vals, "sigmoid", (x,), rule)


def log(x: Tensor) -> Tensor:
    """Natural log of max(x, LOG_EPS); gradient is zero on the clamped region."""
    clamped = np.maximum(x.values, LOG_EPS)
    vals = np.log(clamped)

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, np.where(x.values >= LOG_EPS, g / clamped, 0.0))

    return _make_output(vals, "log", (x,), rule)


def gabor(x: Tensor, omega0: float, s0: float) -> Tensor:
    """Real Gabor wavelet cos(omega0*x) * exp(-(s0*x)^2), elementwise.

    Fused into one tape entry: the activation sits inside every residual
    block, so avoiding five intermediate arrays per call matters for
    training throughput.
    """
    xv = x.values
    envelope = np.exp(-np.square(s0 * xv))
    vals = np.cos(omega0 * xv) * envelope

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            d = -omega0 * np.sin(omega0 * xv) * envelope - 2.0 * s0 * s0 * xv * vals
            _accumulate(x, g * d)

    return _make_output(vals, "gabor", (x,), rule)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max-subtraction."""
    if x.ndim == 0 or x.shape[-1] < 2:
        raise DimensionError(f"softmax needs a last axis of extent >= 2, got shape {x.shape}")
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    vals = e / e.sum(axis=-1, keepdims=True)

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * vals).sum(axis=-1, keepdims=True)
            _accumulate(x, vals * (g - inner))

    return _make_output(vals, "softmax", (x,), rule)


# ---------------------------------------------------------------------------
# reductions and shape ops


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    vals = np.asarray(x.values.sum(axis=axis))

    def rule(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make_output(vals, "sum", (x,), rule)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    if n == 0:
        raise DimensionError("mean over an empty axis")
    vals = np.asarray(x.values.mean(axis=axis))

    def rule(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        scaled = g / n
        if axis is None:
            _accumulate(x, np.broadcast_to(scaled, x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(scaled, axis), x.shape))

    return _make_output(vals, "mean", (x,), rule)


def broadcast_rows(v: Tensor, num_rows: int) -> Tensor:
    """Tile a vector (1-D, or a single [1, d] row) into [num_rows, d].

    Backward sums the incoming gradient over rows, preserving the input
    shape.
    """
    if v.ndim == 1:
        width = v.shape[0]
    elif v.ndim == 2 and v.shape[0] == 1:
        width = v.shape[1]
    else:
        raise DimensionError(f"broadcast_rows needs a vector or single row, got shape {v.shape}")
    if num_rows < 1:
        raise DimensionError(f"broadcast_rows needs num_rows >= 1, got {num_rows}")
    vals = np.broadcast_to(v.values.reshape(1, width), (num_rows, width)).copy()

    def rule(g: np.ndarray) -> None:
        if v.requires_grad:
            _accumulate(v, g.sum(axis=0, keepdims=v.ndim == 2))

    return _make_output(vals, "broadcast_rows", (v,), rule)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a 1-D bias vector to every row of a 2-D tensor."""
    if a.ndim != 2 or v.ndim != 1 or a.shape[1] != v.shape[0]:
        raise DimensionError(f"add_rowvec needs [B,n] + [n], got {a.shape} and {v.shape}")
    vals = a.values + v.values

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g)
        if v.requires_grad:
            _accumulate(v, g.sum(axis=0))

    return _make_output(vals, "add_rowvec", (a, v), rule)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two 2-D tensors along columns."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols needs matching row counts, got {a.shape} and {b.shape}")
    vals = np.concatenate([a.values, b.values], axis=1)
    split = a.shape[1]

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g[:, :split])
        if b.requires_grad:
            _accumulate(b, g[:, split:])

    return _make_output(vals, "concat_cols", (a, b), rule)

"""Dense float32 tensors with define-by-run reverse-mode differentiation.

Shapes are explicit everywhere: binary elementwise ops require identical
shapes, and the only vector-against-matrix behaviour lives in dedicated ops
(add_row, mul_row, sub_col, mul_col, broadcast_rows). Every exported op
checks its output for NaN/Inf and raises NonFiniteError rather than letting
bad values propagate silently.

A Tape records operations while active (``with Tape() as t: ...``) and is
rebuilt every training step. ``backward(loss, tape)`` walks the tape once in
reverse and accumulates gradients into the ``grad`` buffer of every
requires_grad tensor reachable from ``loss``; repeated calls keep
accumulating until ``zero_grads`` resets them. Tapes are reusable, not
single-use.

Reductions (matmul, row sums, norms) accumulate in float64 internally and
round the result to the active dtype, which keeps loss values close to a
float64 reference even at large temperature scales. ``grad_check`` runs the
checked function under a float64 ``precision`` context: with float32
storage, a central difference at h=1e-3 is quantisation noise for small
gradient coordinates, so the derivative rules are verified in float64 while
production paths stay float32.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


_DTYPE_STACK: list[np.dtype] = [np.dtype(np.float32)]

NORM_FLOOR = 1e-12


def active_dtype() -> np.dtype:
    return _DTYPE_STACK[-1]


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype produced by ops (used by grad_check)."""
    _DTYPE_STACK.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


class Tensor:
    """A dense array plus an optional gradient buffer.

    Data is immutable by convention after creation (the optimizer rebinds
    ``data`` rather than writing through it); ``grad`` is the only field
    mutated in place, by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.ascontiguousarray(values, dtype=active_dtype())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tracked = self.requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops; every node's inputs precede it."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def _current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _prep(t: Tensor) -> np.ndarray:
    """Input array cast to the active dtype (no copy when it already matches)."""
    if not isinstance(t, Tensor):
        raise TypeError(f"expected Tensor, got {type(t).__name__}")
    a = t.data
    dt = active_dtype()
    return a if a.dtype == dt else a.astype(dt)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    tape = _current_tape()
    if tape is not None and any(i._tracked for i in inputs):
        out._tracked = True
        tape.nodes.append(TapeNode(inputs, out, backward_fn))
    else:
        out._tracked = False
    return out


def _cast_out(arr: np.ndarray) -> np.ndarray:
    dt = active_dtype()
    return arr if arr.dtype == dt else arr.astype(dt)


def _require_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _require_rank2(a: np.ndarray, op: str) -> None:
    if a.ndim != 2:
        raise ShapeError(f"{op}: expected a 2-d tensor, got shape {a.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    x, y = _prep(a), _prep(b)
    _require_same_shape(x, y, "add")
    return _emit(x + y, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    x, y = _prep(a), _prep(b)
    _require_same_shape(x, y, "sub")
    return _emit(x - y, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    x, y = _prep(a), _prep(b)
    _require_same_shape(x, y, "mul")
    return _emit(x * y, (a, b), lambda g: (g * y, g * x), "mul")


def smul(a: Tensor, c: float) -> Tensor:
    x = _prep(a)
    c = float(c)
    return _emit(_cast_out(x * c), (a,), lambda g: (g * c,), "smul")


def exp(a: Tensor) -> Tensor:
    x = _prep(a)
    y = np.exp(x)
    return _emit(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = _prep(a)
    if np.any(x <= 0):
        raise NonFiniteError("log: non-positive input")
    return _emit(np.log(x), (a,), lambda g: (g / x,), "log")


def sigmoid(a: Tensor) -> Tensor:
    x = _prep(a)
    y = _cast_out(1.0 / (1.0 + np.exp(-x.astype(np.float64))))
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    x = _prep(a)
    y = np.tanh(x)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    x = _prep(a)
    y = np.maximum(x, 0)
    return _emit(y, (a,), lambda g: (g * (x > 0),), "relu")


_UNARY = {"exp": exp, "log": log, "sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add/sub/mul (tensor,tensor), scalar-mul (tensor,float),
    exp/log/sigmoid/tanh/relu (tensor)."""
    if op_kind in _BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind == "scalar-mul":
        if b is None:
            raise ShapeError("scalar-mul needs a scalar operand")
        return smul(a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ShapeError(f"{op_kind} takes one operand")
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise kind {op_kind!r}")


# ---------------------------------------------------------------------------
# matrix and row-structured ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    x, y = _prep(a), _prep(b)
    _require_rank2(x, "matmul")
    _require_rank2(y, "matmul")
    if x.shape[1] != y.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {x.shape} x {y.shape}")
    out = _cast_out(x.astype(np.float64) @ y.astype(np.float64))
    return _emit(out, (a, b), lambda g: (g @ y.T, x.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    x = _prep(a)
    _require_rank2(x, "transpose")
    return _emit(np.ascontiguousarray(x.T), (a,),
                 lambda g: (np.ascontiguousarray(g.T),), "transpose")


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by per-row max subtraction."""
    x = _prep(a)
    _require_rank2(x, "softmax_rows")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True, dtype=np.float64)
    y = _cast_out(e / s)

    def backward(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - inner),)

    return _emit(y, (a,), backward, "softmax_rows")


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm; rows below the norm floor are
    divided by the floor instead (a zero row stays a zero row)."""
    x = _prep(a)
    _require_rank2(x, "l2_normalize_rows")
    sq = (x.astype(np.float64) ** 2).sum(axis=1, keepdims=True)
    n = np.maximum(np.sqrt(sq), NORM_FLOOR)
    nf = _cast_out(n)
    y = _cast_out(x / n)
    live = _cast_out(sq > NORM_FLOOR * NORM_FLOOR)

    def backward(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * inner * live) / nf,)

    return _emit(y, (a,), backward, "l2_normalize_rows")


def layer_norm_rows(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean and unit variance (no gain/bias)."""
    x = _prep(a)
    _require_rank2(x, "layer_norm_rows")
    mu = x.mean(axis=1, keepdims=True, dtype=np.float64)
    xc = x - mu
    var = (xc ** 2).mean(axis=1, keepdims=True, dtype=np.float64)
    inv = _cast_out(1.0 / np.sqrt(var + eps))
    y = _cast_out(xc * inv)

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        ym = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * ym),)

    return _emit(y, (a,), backward, "layer_norm_rows")


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    x = _prep(table)
    _require_rank2(x, "gather_rows")
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows: ids must be a non-empty 1-d sequence")
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise IndexError(f"gather_rows: id out of range 0..{x.shape[0] - 1}")
    out = np.ascontiguousarray(x[idx])

    def backward(g):
        dt = np.zeros_like(x)
        np.add.at(dt, idx, g)
        return (dt,)

    return _emit(out, (table,), backward, "gather_rows")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    x = _prep(a)
    _require_rank2(x, "slice_rows")
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"slice_rows: bad range [{start}:{stop}] for {x.shape}")
    out = np.ascontiguousarray(x[start:stop])

    def backward(g):
        dx = np.zeros_like(x)
        dx[start:stop] = g
        return (dx,)

    return _emit(out, (a,), backward, "slice_rows")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    x = _prep(a)
    _require_rank2(x, "slice_cols")
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: bad range [{start}:{stop}] for {x.shape}")
    out = np.ascontiguousarray(x[:, start:stop])

    def backward(g):
        dx = np.zeros_like(x)
        dx[:, start:stop] = g
        return (dx,)

    return _emit(out, (a,), backward, "slice_cols")


def _concat(parts: Sequence[Tensor], axis: int, op: str) -> Tensor:
    if not parts:
        raise ShapeError(f"{op}: nothing to concatenate")
    arrs = [_prep(p) for p in parts]
    for a in arrs:
        _require_rank2(a, op)
    other = 1 - axis
    if len({a.shape[other] for a in arrs}) != 1:
        raise ShapeError(f"{op}: mismatched extents {[a.shape for a in arrs]}")
    sizes = [a.shape[axis] for a in arrs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _emit(np.concatenate(arrs, axis=axis), tuple(parts), backward, op)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    return _concat(parts, 0, "concat_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    return _concat(parts, 1, "concat_cols")


def broadcast_rows(a: Tensor, m: int) -> Tensor:
    x = _prep(a)
    _require_rank2(x, "broadcast_rows")
    if x.shape[0] != 1:
        raise ShapeError(f"broadcast_rows: expected one row, got {x.shape}")
    return _emit(np.tile(x, (m, 1)), (a,),
                 lambda g: (g.sum(axis=0, keepdims=True),), "broadcast_rows")


def add_row(a: Tensor, row: Tensor) -> Tensor:
    x, r = _prep(a), _prep(row)
    _require_rank2(x, "add_row")
    if r.shape != (x.shape[1],):
        raise ShapeError(f"add_row: row shape {r.shape} vs matrix {x.shape}")
    return _emit(x + r, (a, row), lambda g: (g, g.sum(axis=0)), "add_row")


def mul_row(a: Tensor, row: Tensor) -> Tensor:
    x, r = _prep(a), _prep(row)
    _require_rank2(x, "mul_row")
    if r.shape != (x.shape[1],):
        raise ShapeError(f"mul_row: row shape {r.shape} vs matrix {x.shape}")
    return _emit(x * r, (a, row), lambda g: (g * r, (g * x).sum(axis=0)), "mul_row")


def sub_col(a: Tensor, col: Tensor) -> Tensor:
    x, c = _prep(a), _prep(col)
    _require_rank2(x, "sub_col")
    if c.shape != (x.shape[0], 1):
        raise ShapeError(f"sub_col: column shape {c.shape} vs matrix {x.shape}")
    return _emit(x - c, (a, col),
                 lambda g: (g, -g.sum(axis=1, keepdims=True)), "sub_col")


def mul_col(a: Tensor, col: Tensor) -> Tensor:
    x, c = _prep(a), _prep(col)
    _require_rank2(x, "mul_col")
    if c.shape != (x.shape[0], 1):
        raise ShapeError(f"mul_col: column shape {c.shape} vs matrix {x.shape}")
    return _emit(x * c, (a, col),
                 lambda g: (g * c, (g * x).sum(axis=1, keepdims=True)), "mul_col")


def sum_rows(a: Tensor) -> Tensor:
    x = _prep(a)
    _require_rank2(x, "sum_rows")
    out = _cast_out(x.sum(axis=1, keepdims=True, dtype=np.float64))
    return _emit(out, (a,),
                 lambda g: (np.ascontiguousarray(np.broadcast_to(g, x.shape)),),
                 "sum_rows")


def sum_all(a: Tensor) -> Tensor:
    x = _prep(a)
    out = _cast_out(np.asarray(x.sum(dtype=np.float64)))
    return _emit(out, (a,),
                 lambda g: (np.ascontiguousarray(np.broadcast_to(g, x.shape)),),
                 "sum_all")


def row_max(a: Tensor) -> Tensor:
    """Per-row maximum as a detached constant (no gradient flows through it).

    Subtracting it from the rows of a softmax/log-sum-exp argument changes
    neither values nor gradients, so treating it as constant is exact.
    """
    x = _prep(a)
    _require_rank2(x, "row_max")
    return Tensor(x.max(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(param) into ``grad`` of every requires_grad tensor.

    ``loss`` must be a scalar recorded on ``tape``. Each tape node is visited
    exactly once, in reverse recording order.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss._tracked:
        raise ValueError("backward: loss is not connected to any taped parameter")
    flowing: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape.nodes):
        g = flowing.pop(id(node.output), None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.backward_fn(g)):
            if ig is None or not inp._tracked:
                continue
            if inp.requires_grad:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                acc = flowing.get(id(inp))
                flowing[id(inp)] = ig if acc is None else acc + ig


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3) -> float:
    """Max relative error between taped gradients and central differences.

    Returns max over all coordinates of
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-8)``.
    Both sides are evaluated in float64 (see module docstring).
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    with precision(np.float64):
        zero_grads(params)
        tape = Tape()
        with tape:
            loss = f()
        backward(loss, tape)
        analytic = [
            np.zeros(p.data.shape, dtype=np.float64) if p.grad is None
            else np.asarray(p.grad, dtype=np.float64)
            for p in params
        ]
        worst = 0.0
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                a = float(an_flat[i])
                rel = abs(a - num) / (abs(a) + abs(num) + 1e-8)
                if rel > worst:
                    worst = rel
        return worst

"""Dense double-precision tensors with reverse-mode differentiation.

The engine only covers the operations the diagnostic model needs. Every
operation returns a new :class:`Tensor`; input buffers are never written
(they are flagged read-only). Broadcasting is limited to tensor-scalar
arithmetic; row-vector additions and per-row scaling are explicit ops
(:func:`add_row`, :func:`scale_rows`) so the backward rules stay auditable.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class GradCheckError(RuntimeError):
    """The checked function was not finite at a perturbed point."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array, dtype=np.float64)
    array.setflags(write=False)
    return array


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(s <= 0 for s in arr.shape):
            # zero-width tensors are allowed only as concat operands
            if not (arr.ndim == 2 and arr.shape[0] > 0):
                raise DimensionError(f"non-positive dimension in shape {arr.shape}")
        self.data = _frozen(arr)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # arithmetic sugar over the functional ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _frozen(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.name = None
    out._parents = tuple(parents)
    out._backward = backward
    out.op = op
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_2d(t: Tensor, what: str) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{what} expects a 2-D tensor, got shape {t.shape}")


# --------------------------------------------------------------------------
# elementwise arithmetic (exact shapes, or one scalar operand)
# --------------------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(grad: np.ndarray, like: Tensor) -> np.ndarray:
    if grad.shape == like.shape:
        return grad
    return np.full(like.shape, grad.sum())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _node(a.data * b.data, (a, b), backward, "mul")


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g):
        return (np.full(a.shape, g.item()),)

    return _node(np.array(a.data.sum()), (a,), backward, "sum")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("log of a non-positive value")

    def backward(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), backward, "log")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _node(out_data, (a,), backward, "exp")


# --------------------------------------------------------------------------
# matrix operations
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    _check_2d(a, "transpose")

    def backward(g):
        return (g.T,)

    return _node(a.data.T, (a,), backward, "transpose")


def softmax_rows(m: Tensor) -> Tensor:
    _check_2d(m, "softmax_rows")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=1, keepdims=True)
        return (out_data * (g - inner),)

    return _node(out_data, (m,), backward, "softmax_rows")


def sigmoid(m: Tensor) -> Tensor:
    x = m.data
    # two-branch form avoids overflow in exp for large |x|
    pos = x >= 0
    z = np.exp(-np.abs(x))
    out_data = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        return (g * out_data * (1.0 - out_data),)

    return _node(out_data, (m,), backward, "sigmoid")


def relu(m: Tensor) -> Tensor:
    mask = m.data > 0

    def backward(g):
        return (g * mask,)

    return _node(np.where(mask, m.data, 0.0), (m,), backward, "relu")


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, "concat_cols")
    _check_2d(b, "concat_cols")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ for {a.shape} and {b.shape}")
    split = a.shape[1]

    def backward(g):
        return g[:, :split], g[:, split:]

    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), backward, "concat_cols")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows needs at least one tensor")
    for p in parts:
        _check_2d(p, "concat_rows")
    width = parts[0].shape[1]
    if any(p.shape[1] != width for p in parts):
        raise DimensionError(f"concat_rows: widths differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward, "concat_rows")


def add_row(m: Tensor, row: Tensor) -> Tensor:
    """Add a ``1 x c`` row vector to every row of an ``r x c`` matrix."""
    _check_2d(m, "add_row")
    _check_2d(row, "add_row")
    if row.shape != (1, m.shape[1]):
        raise DimensionError(f"add_row: row shape {row.shape} does not fit {m.shape}")

    def backward(g):
        return g, g.sum(axis=0, keepdims=True)

    return _node(m.data + row.data, (m, row), backward, "add_row")


def scale_rows(m: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``i`` of ``m`` by the scalar ``w[i, 0]``."""
    _check_2d(m, "scale_rows")
    _check_2d(w, "scale_rows")
    if w.shape != (m.shape[0], 1):
        raise DimensionError(f"scale_rows: weights {w.shape} do not fit {m.shape}")

    def backward(g):
        return g * w.data, (g * m.data).sum(axis=1, keepdims=True)

    return _node(m.data * w.data, (m, w), backward, "scale_rows")


def take_rows(m: Tensor, index: Sequence[int]) -> Tensor:
    """Gather rows ``m[index]``; repeated indices accumulate in backward."""
    _check_2d(m, "take_rows")
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError("take_rows needs a non-empty 1-D index")
    if idx.min() < 0 or idx.max() >= m.shape[0]:
        raise ContractError(f"take_rows: index out of range for {m.shape[0]} rows")

    def backward(g):
        out = np.zeros(m.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(m.data[idx], (m,), backward, "take_rows")


def scatter_rows(m: Tensor, index: Sequence[int], num_rows: int) -> Tensor:
    """Place row ``i`` of ``m`` at row ``index[i]`` of a zero ``num_rows x c`` matrix."""
    _check_2d(m, "scatter_rows")
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape != (m.shape[0],):
        raise DimensionError(f"scatter_rows: {idx.size} indices for {m.shape[0]} rows")
    if len(set(idx.tolist())) != idx.size:
        raise ContractError("scatter_rows: duplicate target rows")
    out_data = np.zeros((num_rows, m.shape[1]))
    out_data[idx] = m.data

    def backward(g):
        return (g[idx],)

    return _node(out_data, (m,), backward, "scatter_rows")


def take_cols(m: Tensor, index: np.ndarray) -> Tensor:
    """Per-row column gather: ``out[i, j] = m[i, index[i, j]]``."""
    _check_2d(m, "take_cols")
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 2 or idx.shape[0] != m.shape[0]:
        raise DimensionError(f"take_cols: index shape {idx.shape} does not fit {m.shape}")
    rows = np.arange(m.shape[0])[:, None]

    def backward(g):
        out = np.zeros(m.shape)
        np.add.at(out, (np.broadcast_to(rows, idx.shape), idx), g)
        return (out,)

    return _node(m.data[rows, idx], (m,), backward, "take_cols")


def convex_mix(a: Tensor, b: Tensor, lam: Tensor) -> Tensor:
    """Elementwise ``(1 - lam) * a + lam * b`` clamped to the ``[a, b]`` bracket.

    The clamp only absorbs rounding; backward uses the unclamped derivative.
    """
    if not (a.shape == b.shape == lam.shape):
        raise DimensionError(f"convex_mix shapes differ: {a.shape}, {b.shape}, {lam.shape}")
    raw = (1.0 - lam.data) * a.data + lam.data * b.data
    out_data = np.clip(raw, np.minimum(a.data, b.data), np.maximum(a.data, b.data))

    def backward(g):
        return g * (1.0 - lam.data), g * lam.data, g * (b.data - a.data)

    return _node(out_data, (a, b, lam), backward, "convex_mix")


def mean_rows(m: Tensor) -> Tensor:
    """Column-wise mean, ``r x c -> 1 x c``."""
    _check_2d(m, "mean_rows")
    r = m.shape[0]

    def backward(g):
        return (np.broadcast_to(g / r, m.shape).copy(),)

    return _node(m.data.mean(axis=0, keepdims=True), (m,), backward, "mean_rows")


def cross_entropy_rows(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """``-sum_t log softmax(logits[t])[targets[t]]`` as a scalar."""
    _check_2d(logits, "cross_entropy_rows")
    tgt = np.asarray(targets, dtype=np.intp)
    if tgt.shape != (logits.shape[0],):
        raise DimensionError(f"{logits.shape[0]} logit rows for {tgt.size} targets")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= logits.shape[1]):
        raise ContractError("target id outside the logit width")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    rows = np.arange(tgt.size)
    loss = -log_probs[rows, tgt].sum()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, tgt] -= 1.0
        return (g.item() * grad,)

    return _node(np.array(loss), (logits,), backward, "cross_entropy_rows")


# --------------------------------------------------------------------------
# backward pass and finite-difference check
# --------------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each after all of its inputs."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of the scalar ``loss`` for every tensor in ``params``.

    Parameters the loss does not depend on get an exact zero array.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(topological_order(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    out = {}
    for name, tensor in params.items():
        g = grads.get(id(tensor))
        out[name] = np.zeros(tensor.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(tensor.shape)
    return out


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> float:
    """Worst relative error between ``backward`` and central differences.

    ``f`` maps a parameter dict to a scalar tensor. Each coordinate of the
    selected parameters is perturbed by ``+-eps``; the relative error uses
    ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    return max(grad_check_report(f, params, eps, names).values(), default=0.0)


def grad_check_report(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> dict[str, float]:
    """Per-parameter worst relative error; see :func:`grad_check`."""
    if not 0 < eps <= 1e-2:
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    analytic = backward(f(params), params)
    selected = list(params) if names is None else list(names)
    report = {}
    for name in selected:
        base = params[name]
        flat = base.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            values = []
            for step in (eps, -eps):
                bumped = flat.copy()
                bumped[i] += step
                trial = dict(params)
                trial[name] = Tensor(bumped.reshape(base.shape), requires_grad=True, name=name)
                v = f(trial).item()
                if not np.isfinite(v):
                    raise GradCheckError(f"non-finite value perturbing {name}[{i}]")
                values.append(v)
            numeric[i] = (values[0] - values[1]) / (2 * eps)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        report[name] = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    return report

"""Dense float64 tensors with reverse-mode gradients over a small op set.

The op set is what the desk-scale models need: add (with row-bias
broadcast), matmul, relu, scalar scale, sum, column slicing, element
picking, softmax and a fused softmax cross-entropy. A finite-difference
oracle checks the reverse-mode path independently.
"""
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np

from eat_ood.errors import ConfigurationError, ContractViolation, GradientOracleError, NumericDomainError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[float], float]


class Tensor:
    """A dense real array with an optional gradient buffer.

    Data is copied on construction and only changes through the explicit
    in-place update methods (``update_``, ``zero_grad``).
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _op: str = "",
    ):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._op = _op
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def update_(self, delta: np.ndarray) -> None:
        """In-place ``data += delta``; the only sanctioned mutation of values."""
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != self.data.shape:
            raise ContractViolation(f"update shape {delta.shape} does not match tensor shape {self.data.shape}")
        self.data += delta

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient."""
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation("backward() without a seed gradient needs a scalar tensor")
            seed = np.ones_like(self.data)
        else:
            seed = np.array(grad, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ContractViolation(f"seed gradient shape {seed.shape} != tensor shape {self.data.shape}")

        order = _topological_order(self)
        grads: Dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            parent_grads = node._backward(node_grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
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


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], op: str, backward) -> Tensor:
    needs_grad = any(p.requires_grad for p in parents)
    if not needs_grad:
        return Tensor(data, _op=op)
    out = Tensor(data, requires_grad=True, _parents=parents, _op=op)
    out._backward = backward
    return out


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericDomainError(f"non-finite value in {op}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum; a rank-1 ``b`` is broadcast over the rows of a rank-2 ``a``."""
    row_bias = a.ndim == 2 and b.ndim == 1
    if a.shape != b.shape and not (row_bias and b.shape[0] == a.shape[1]):
        raise ContractViolation(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g: np.ndarray):
        return g, (g.sum(axis=0) if row_bias else g)

    return _result(a.data + b.data, (a, b), "add", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a rank-1 or rank-2 ``a`` and a rank-2 ``b``."""
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g: np.ndarray):
        grad_a = g @ b.data.T
        grad_b = np.outer(a.data, g) if a.ndim == 1 else a.data.T @ g
        return grad_a, grad_b

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def relu(a: Tensor) -> Tensor:
    """Element-wise ``max(a, 0)``; NaN and infinite inputs raise instead of being clipped."""
    _check_finite(a.data, "relu input")
    mask = a.data > 0.0

    def backward(g: np.ndarray):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0.0), (a,), "relu", backward)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant factor."""
    factor = float(factor)

    def backward(g: np.ndarray):
        return (g * factor,)

    return _result(a.data * factor, (a,), "scale", backward)


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""

    def backward(g: np.ndarray):
        return (np.full_like(a.data, float(g)),)

    return _result(np.array(a.data.sum()), (a,), "sum", backward)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` of the last axis."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise ContractViolation(f"columns: slice [{start}, {stop}) outside last axis of {a.shape}")

    def backward(g: np.ndarray):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop], (a,), "columns", backward)


def pick(a: Tensor, index: Union[int, Tuple[int, ...]]) -> Tensor:
    """A single entry of ``a`` as a scalar tensor."""

    def backward(g: np.ndarray):
        full = np.zeros_like(a.data)
        full[index] = float(g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), "pick", backward)


def _stable_softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    if logits.shape[-1] < 1:
        raise ContractViolation("softmax needs at least one logit")
    _check_finite(logits.data, "softmax input")
    probs = _stable_softmax(logits.data)
    _check_finite(probs, "softmax")

    def backward(g: np.ndarray):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _result(probs, (logits,), "softmax", backward)


def softmax_probabilities(logits: np.ndarray) -> np.ndarray:
    """Plain-array softmax for evaluation paths that need no gradient."""
    values = np.asarray(logits, dtype=np.float64)
    _check_finite(values, "softmax input")
    return _stable_softmax(values)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Fused ``sum_b w_b * sum_j -t_bj * log softmax(logits_b)_j``.

    ``targets`` has the shape of ``logits`` and holds (possibly soft)
    target mass per class. Rank-1 logits are treated as a single row.
    """
    rows = logits.data if logits.ndim == 2 else logits.data[None, :]
    targets = np.asarray(targets, dtype=np.float64).reshape(rows.shape)
    if weights is None:
        weights = np.ones(rows.shape[0])
    weights = np.asarray(weights, dtype=np.float64).reshape(rows.shape[0])
    _check_finite(rows, "cross-entropy input")

    shifted = rows - rows.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    per_row = -(targets * log_probs).sum(axis=1)
    value = float((weights * per_row).sum())
    _check_finite(np.array(value), "cross-entropy")
    probs = np.exp(log_probs)

    def backward(g: np.ndarray):
        grad_rows = float(g) * weights[:, None] * (probs * targets.sum(axis=1, keepdims=True) - targets)
        return (grad_rows.reshape(logits.shape),)

    return _result(np.array(value), (logits,), "softmax_cross_entropy", backward)


def finite_diff_grad(f: Callable[[np.ndarray], float], params: Tensor, eps: float = 1e-6) -> Tensor:
    """Central-difference gradient of a scalar function at ``params``."""
    if not 1e-8 <= eps <= 1e-4:
        raise ConfigurationError(f"finite-difference step {eps} outside [1e-8, 1e-4]")
    base = params.data.astype(np.float64).ravel()
    grad = np.empty_like(base)

    def evaluate(point: np.ndarray, index: int) -> float:
        try:
            value = float(f(point.reshape(params.shape)))
        except NumericDomainError as e:
            raise GradientOracleError(f"objective failed: {e}", probe_index=index) from e
        if not np.isfinite(value):
            raise GradientOracleError("objective is not finite", probe_index=index)
        return value

    for i in range(base.size):
        point = base.copy()
        point[i] = base[i] + eps
        upper = evaluate(point, i)
        point[i] = base[i] - eps
        lower = evaluate(point, i)
        grad[i] = (upper - lower) / (2.0 * eps)
    return Tensor(grad.reshape(params.shape))


def max_relative_error(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-8) -> float:
    """Largest element-wise ``|a - r| / max(|a|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if analytic.shape != reference.shape:
        raise ContractViolation(f"shape mismatch {analytic.shape} vs {reference.shape}")
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.abs(analytic), floor)
    return float(np.max(np.abs(analytic - reference) / denom))

"""Training objectives over Tensor logits.

Every loss accepts a single logit vector ``[K]`` with an integer label, or
a batch ``[B, K]`` with a label array, and returns the batch mean of the
(optionally weighted) per-sample losses as a scalar Tensor. Abstention
classes occupy indices ``[C, C+k)``.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union
import logging

import numpy as np

from eat_ood.core import numerics
from eat_ood.core.numerics import Tensor
from eat_ood.errors import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)

Labels = Union[int, Sequence[int], np.ndarray]
HeadLogits = Union[Tensor, Sequence[Tensor]]


@dataclass(frozen=True)
class ClassPriors:
    """Inlier class priors pi and the log-prior margins derived from them."""
    pi: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        if pi.ndim != 1 or pi.size == 0:
            raise ConfigurationError("class priors must be a non-empty vector")
        if np.any(pi <= 0.0):
            raise ConfigurationError("class priors must be strictly positive (log of a zero prior is undefined)")
        if abs(pi.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"class priors sum to {pi.sum()!r}, not 1")
        object.__setattr__(self, "pi", pi)

    @classmethod
    def from_counts(cls, counts) -> "ClassPriors":
        counts = np.asarray(counts, dtype=np.float64)
        if np.any(counts <= 0):
            raise ConfigurationError("every class needs at least one training sample to have a prior")
        pi = counts / counts.sum()
        # renormalise once more so the sum is 1 to the last ulp
        return cls(pi / pi.sum())

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassPriors":
        return cls(np.full(num_classes, 1.0 / num_classes))

    @property
    def num_classes(self) -> int:
        return self.pi.size

    @property
    def log_pi(self) -> np.ndarray:
        return np.log(self.pi)

    def margin(self, y: int, y_other: int) -> float:
        """Pairwise label margin ``Delta_yy' = log(pi_y' / pi_y)``."""
        return float(np.log(self.pi[y_other] / self.pi[y]))


def _as_rows(logits: Tensor, labels: Labels):
    if logits.ndim == 1:
        return 1, np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim != 2:
        raise ContractViolation(f"logits must be rank-1 or rank-2, got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != logits.shape[0]:
        raise ContractViolation(f"{labels.size} labels for {logits.shape[0]} logit rows")
    return logits.shape[0], labels


def _weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.size != n:
        raise ContractViolation(f"{weights.size} weights for {n} samples")
    return weights


def ce_loss(logits: Tensor, label: Labels, weights=None) -> Tensor:
    """Cross-entropy ``log(1 + sum_{y' != y} exp(f_y' - f_y))``, batch-averaged."""
    n, labels = _as_rows(logits, label)
    num_outputs = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= num_outputs):
        raise ContractViolation(f"label outside [0, {num_outputs})")
    targets = np.zeros((n, num_outputs))
    targets[np.arange(n), labels] = 1.0
    summed = numerics.softmax_cross_entropy(logits, targets, _weights(weights, n))
    return numerics.scale(summed, 1.0 / n)


def assign_virtual_label(logits: Union[Tensor, np.ndarray], C: int, k: int):
    """Index of the largest abstention logit, lowest index on ties.

    Only ``logits[..., C:C+k]`` is inspected. Returns an int for a single
    vector and an int array for a batch.
    """
    if k < 1:
        raise ConfigurationError("virtual labels need at least one abstention class (k >= 1)")
    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if values.shape[-1] != C + k:
        raise ContractViolation(f"expected {C + k} logits, got {values.shape[-1]}")
    labels = C + np.argmax(values[..., C:C + k], axis=-1)
    return int(labels) if values.ndim == 1 else labels.astype(np.int64)


def outlier_loss(logits: Tensor, C: int, k: int, weights=None) -> Tensor:
    """Cross-entropy against the model's own virtual label.

    The label is read off the logit values, so no gradient flows through
    the argmax.
    """
    return ce_loss(logits, assign_virtual_label(logits, C, k), weights)


def oe_uniform_loss(logits: Tensor, C: int, weights=None) -> Tensor:
    """Cross-entropy of softmax(logits) against the uniform distribution on the first C classes."""
    if C < 1:
        raise ConfigurationError("OE loss needs at least one inlier class")
    if logits.shape[-1] < C:
        raise ContractViolation(f"expected at least {C} logits, got {logits.shape[-1]}")
    n = 1 if logits.ndim == 1 else logits.shape[0]
    targets = np.zeros((n, logits.shape[-1]))
    targets[:, :C] = 1.0 / C
    summed = numerics.softmax_cross_entropy(logits, targets, _weights(weights, n))
    return numerics.scale(summed, 1.0 / n)


def la_loss(logits: Tensor, label: Labels, priors: ClassPriors, weights=None) -> Tensor:
    """Logit-adjusted cross-entropy, computed as ``ce_loss(logits + log pi, y)``.

    With margins ``Delta_yy' = log(pi_y' / pi_y)`` this equals
    ``log(1 + sum_{y' != y} exp(Delta_yy') * exp(f_y' - f_y))``.
    """
    if logits.shape[-1] != priors.num_classes:
        raise ContractViolation(f"{logits.shape[-1]} logits for {priors.num_classes} class priors")
    adjusted = numerics.add(logits, Tensor(priors.log_pi))
    return ce_loss(adjusted, label, weights)


def _heads(logits: Optional[HeadLogits]):
    if logits is None:
        return []
    return [logits] if isinstance(logits, Tensor) else list(logits)


def inlier_term(inlier_logits: HeadLogits, labels: Labels, weights=None) -> Tensor:
    """Sum over heads of the weighted batch-mean cross-entropy on the inlier labels."""
    heads = _heads(inlier_logits)
    if not heads or any(h.data.size == 0 for h in heads):
        raise ContractViolation("the inlier batch must not be empty")
    terms = [ce_loss(h, labels, weights) for h in heads]
    return sum_terms(terms)


def outlier_term(outlier_logits: Optional[HeadLogits], C: int, k: int, objective: str = "virtual") -> Tensor:
    """Sum over heads of the batch-mean outlier objective; 0 for an empty batch.

    ``objective`` is ``virtual`` (abstention-class virtual labels), ``oe``
    (uniform over inlier classes) or ``none``.
    """
    heads = [h for h in _heads(outlier_logits) if h.data.size > 0]
    if objective == "none" or not heads:
        return Tensor(0.0)
    if objective == "virtual":
        terms = [outlier_loss(h, C, k) for h in heads]
    elif objective == "oe":
        terms = [oe_uniform_loss(h, C) for h in heads]
    else:
        raise ConfigurationError(f"unknown outlier objective {objective!r}")
    return sum_terms(terms)


def total_loss_terms(
    inlier_logits: HeadLogits,
    labels: Labels,
    outlier_logits: Optional[HeadLogits],
    lam: float,
    C: int,
    k: int,
    weights=None,
    objective: str = "virtual",
) -> Tuple[Tensor, Tensor, Tensor]:
    """``(L_in, L_out, L_in + lam * L_out)`` with both terms summed over the m heads.

    ``inlier_logits`` and ``outlier_logits`` are one Tensor per head (or a
    single Tensor for one head), aligned head by head.
    """
    if lam < 0:
        raise ConfigurationError(f"lambda must be non-negative, got {lam}")
    inlier = inlier_term(inlier_logits, labels, weights)
    outlier = outlier_term(outlier_logits, C, k, objective)
    return inlier, outlier, numerics.add(inlier, numerics.scale(outlier, lam))


def total_loss(
    inlier_logits: HeadLogits,
    labels: Labels,
    outlier_logits: Optional[HeadLogits],
    lam: float,
    C: int,
    k: int,
    weights=None,
    objective: str = "virtual",
) -> Tensor:
    """``sum_i (L_in^(i) + lam * L_out^(i))`` over the m heads."""
    return total_loss_terms(inlier_logits, labels, outlier_logits, lam, C, k, weights, objective)[2]


def sum_terms(terms: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum of scalar loss Tensors on one tape."""
    result = terms[0]
    for term in terms[1:]:
        result = numerics.add(result, term)
    return result

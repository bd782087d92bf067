"""Gradient noise contributed by outlier objectives, checked three ways.

For an outlier x~ with probabilities z~ = softmax(f(x~)), the virtual-label
loss contributes ``g = -grad(z~_j) / z~_j`` with j the arg-max abstention
class, and the uniform OE loss contributes
``g' = -(1/C) * sum_{j<C} grad(z~_j) / z~_j``. Here both are built from
back-propagated probability gradients and compared with the reverse-mode
gradient of the corresponding loss and, optionally, with central
differences.
"""
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, List, Optional, Tuple
import logging

import numpy as np

from eat_ood.core import losses, numerics
from eat_ood.core.model import ModelParams, forward
from eat_ood.core.numerics import Tensor
from eat_ood.errors import ConfigurationError, ContractViolation, NumericDomainError
from eat_ood.utils.csvio import format_float, write_rows

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-300
ANALYTIC_ERR_FLOOR = 1e-10
ORACLE_ERR_FLOOR = 1e-6
DIRECTION_COSINE = 0.99


@dataclass
class NoiseReport:
    sample_index: int
    head: int
    virtual_label: int
    g: np.ndarray
    g_prime: np.ndarray
    max_rel_err_g: float
    max_rel_err_gprime: float
    max_rel_err_fd_g: Optional[float] = None
    max_rel_err_fd_gprime: Optional[float] = None


@dataclass
class NoiseSummary:
    samples: int
    heads: int
    pairs: int
    g_direction_diversity: float
    gprime_direction_diversity: float
    max_rel_err_g: float
    max_rel_err_gprime: float
    distinct_virtual_labels: int

    def line(self) -> str:
        return (
            f"samples={self.samples} heads={self.heads} pairs={self.pairs} "
            f"g_direction_diversity={self.g_direction_diversity:.6f} "
            f"gprime_direction_diversity={self.gprime_direction_diversity:.6f} "
            f"max_rel_err_g={self.max_rel_err_g:.3e} max_rel_err_gprime={self.max_rel_err_gprime:.3e} "
            f"distinct_virtual_labels={self.distinct_virtual_labels}"
        )


def _require_single_head(params: ModelParams) -> None:
    if params.m != 1:
        raise ContractViolation(f"gradient noise is defined per classifier; got {params.m} heads (use single_head)")


def _logits(params: ModelParams, x) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractViolation("gradient noise is computed for one sample at a time")
    return forward(params, x)[0]


def probability_gradient(params: ModelParams, x, j: int) -> Tuple[float, np.ndarray]:
    """``(z~_j, grad_theta z~_j)`` by back-propagating the scalar probability."""
    params.zero_grad()
    z = numerics.softmax(_logits(params, x))
    z_j = numerics.pick(z, j)
    z_j.backward()
    grad = params.flat_grad()
    params.zero_grad()
    return z_j.item(), grad


def loss_gradient(params: ModelParams, x, loss_fn: Callable[[Tensor], Tensor]) -> np.ndarray:
    """Flat reverse-mode gradient of ``loss_fn`` at one sample; gradients are cleared afterwards."""
    params.zero_grad()
    loss_fn(_logits(params, x)).backward()
    grad = params.flat_grad()
    params.zero_grad()
    return grad


def analytic_noise_virtual(params: ModelParams, x) -> Tuple[Tensor, int]:
    """``g = -grad(z~_j) / z~_j`` with j the virtual label of ``x``."""
    _require_single_head(params)
    if params.k < 1:
        raise ConfigurationError("virtual-label noise needs at least one abstention class")
    j = losses.assign_virtual_label(_logits(params, x), params.C, params.k)
    z_j, grad = probability_gradient(params, x, j)
    if z_j < PROBABILITY_FLOOR:
        raise NumericDomainError(f"probability of virtual class {j} underflows ({z_j!r})")
    return Tensor(-grad / z_j), j


def analytic_noise_oe(params: ModelParams, x) -> Tensor:
    """``g' = -(1/C) * sum_{j<C} grad(z~_j) / z~_j``."""
    _require_single_head(params)
    total = np.zeros(params.flat().size)
    for j in range(params.C):
        z_j, grad = probability_gradient(params, x, j)
        if z_j < PROBABILITY_FLOOR:
            raise NumericDomainError(f"probability of inlier class {j} underflows ({z_j!r})")
        total += grad / z_j
    return Tensor(-total / params.C)


def virtual_loss_gradient(params: ModelParams, x, j: int) -> np.ndarray:
    """Reverse-mode gradient of the outlier loss with virtual label ``j`` held fixed."""
    return loss_gradient(params, x, lambda logits: losses.ce_loss(logits, j))


def oe_loss_gradient(params: ModelParams, x) -> np.ndarray:
    return loss_gradient(params, x, lambda logits: losses.oe_uniform_loss(logits, params.C))


def finite_difference_gradient(params: ModelParams, x, loss_fn: Callable[[Tensor], Tensor], eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss_fn`` over the flat parameter vector."""
    scratch = params.copy()
    theta = params.flat()

    def objective(point: np.ndarray) -> float:
        scratch.load_flat_(point)
        return loss_fn(_logits(scratch, x)).item()

    return numerics.finite_diff_grad(objective, Tensor(theta), eps).data


def _direction_diversity(vectors: List[np.ndarray]) -> Tuple[int, int]:
    """``(pairs, pairs whose cosine is below DIRECTION_COSINE)``."""
    pairs = differing = 0
    for a, b in combinations(vectors, 2):
        pairs += 1
        norm = np.linalg.norm(a) * np.linalg.norm(b)
        cosine = float(a @ b / norm) if norm > 0 else (1.0 if not a.any() and not b.any() else 0.0)
        if cosine < DIRECTION_COSINE:
            differing += 1
    return pairs, differing


def verify_gradient_noise(
    params: ModelParams,
    outliers: np.ndarray,
    with_oracle: bool = False,
    eps: float = 1e-6,
) -> Tuple[List[NoiseReport], NoiseSummary]:
    """Check both noise identities for every outlier row and every head.

    The summary reports, per formula, the fraction of same-head sample pairs
    whose noise directions differ (cosine below 0.99).
    """
    outliers = np.atleast_2d(np.asarray(outliers, dtype=np.float64))
    if outliers.shape[0] == 0:
        raise ContractViolation("the outlier batch must not be empty")

    reports: List[NoiseReport] = []
    pairs = g_differing = gp_differing = 0
    for head in range(params.m):
        view = params.single_head(head)
        g_vectors, gp_vectors = [], []
        for index, x in enumerate(outliers):
            try:
                g, j = analytic_noise_virtual(view, x)
                g_prime = analytic_noise_oe(view, x)
                report = NoiseReport(
                    sample_index=index,
                    head=head,
                    virtual_label=j,
                    g=g.data,
                    g_prime=g_prime.data,
                    max_rel_err_g=numerics.max_relative_error(g.data, virtual_loss_gradient(view, x, j), ANALYTIC_ERR_FLOOR),
                    max_rel_err_gprime=numerics.max_relative_error(g_prime.data, oe_loss_gradient(view, x), ANALYTIC_ERR_FLOOR),
                )
                if with_oracle:
                    fd_g = finite_difference_gradient(view, x, lambda logits: losses.ce_loss(logits, j), eps)
                    fd_gp = finite_difference_gradient(view, x, lambda logits: losses.oe_uniform_loss(logits, view.C), eps)
                    report.max_rel_err_fd_g = numerics.max_relative_error(g.data, fd_g, ORACLE_ERR_FLOOR)
                    report.max_rel_err_fd_gprime = numerics.max_relative_error(g_prime.data, fd_gp, ORACLE_ERR_FLOOR)
            except NumericDomainError as e:
                raise NumericDomainError(f"sample {index}, head {head}: {e}") from e
            reports.append(report)
            g_vectors.append(report.g)
            gp_vectors.append(report.g_prime)
        head_pairs, g_diff = _direction_diversity(g_vectors)
        _, gp_diff = _direction_diversity(gp_vectors)
        pairs += head_pairs
        g_differing += g_diff
        gp_differing += gp_diff

    summary = NoiseSummary(
        samples=outliers.shape[0],
        heads=params.m,
        pairs=pairs,
        g_direction_diversity=g_differing / pairs if pairs else 0.0,
        gprime_direction_diversity=gp_differing / pairs if pairs else 0.0,
        max_rel_err_g=max(r.max_rel_err_g for r in reports),
        max_rel_err_gprime=max(r.max_rel_err_gprime for r in reports),
        distinct_virtual_labels=len({r.virtual_label for r in reports}),
    )
    logger.info(f"Gradient-noise check: {summary.line()}")
    return reports, summary


def write_noise_reports(reports: List[NoiseReport], path: str) -> None:
    """One CSV row per (sample, head); oracle columns are blank when the oracle did not run."""
    header = [
        "sample", "head", "virtual_label", "max_rel_err_g", "max_rel_err_gprime",
        "max_rel_err_fd_g", "max_rel_err_fd_gprime", "norm_g", "norm_gprime",
    ]
    rows = []
    for r in reports:
        rows.append([
            str(r.sample_index),
            str(r.head),
            str(r.virtual_label),
            format_float(r.max_rel_err_g),
            format_float(r.max_rel_err_gprime),
            "" if r.max_rel_err_fd_g is None else format_float(r.max_rel_err_fd_g),
            "" if r.max_rel_err_fd_gprime is None else format_float(r.max_rel_err_fd_gprime),
            format_float(np.linalg.norm(r.g)),
            format_float(np.linalg.norm(r.g_prime)),
        ])
    write_rows(path, header, rows)

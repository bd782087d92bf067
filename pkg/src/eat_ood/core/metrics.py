"""OOD detection and inlier classification measures.

OOD is the positive class and a higher score means more OOD. A score equal
to a threshold counts as detected. Every sweep implementation has a
brute-force ``oracle_*`` twin that enumerates thresholds or pairs directly.

Score file layout: header ``id,is_ood,score,pred,label``; ``pred`` and
``label`` are empty on OOD rows.
"""
from itertools import product
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
from pydantic import BaseModel, Field

from eat_ood.core.model import ScoreRecord
from eat_ood.errors import ContractViolation, DataParseError, UndefinedMetricError
from eat_ood.utils.csvio import format_float, parse_float, parse_int, read_rows, write_rows

logger = logging.getLogger(__name__)

SCORE_HEADER = ["id", "is_ood", "score", "pred", "label"]
COUNT_SLACK = 1e-9


def _split(records: Sequence[ScoreRecord]) -> Tuple[np.ndarray, np.ndarray]:
    inlier = np.array([r.ood_score for r in records if not r.is_ood], dtype=np.float64)
    ood = np.array([r.ood_score for r in records if r.is_ood], dtype=np.float64)
    if inlier.size == 0 or ood.size == 0:
        raise UndefinedMetricError(f"need inlier and OOD records, got {inlier.size} inlier and {ood.size} OOD")
    return inlier, ood


def _inlier_rows(records: Sequence[ScoreRecord]) -> Tuple[np.ndarray, np.ndarray]:
    """Scores and correctness flags of the inlier records."""
    rows = [r for r in records if not r.is_ood]
    if any(r.predicted_class is None or r.true_class is None for r in rows):
        raise ContractViolation("accuracy metrics need predicted and true classes on every inlier record")
    scores = np.array([r.ood_score for r in rows], dtype=np.float64)
    correct = np.array([r.predicted_class == r.true_class for r in rows], dtype=bool)
    return scores, correct


def _required_count(fraction: float, total: int) -> int:
    """Smallest count whose share of ``total`` reaches ``fraction``."""
    return max(1, math.ceil(fraction * total - COUNT_SLACK))


def _allowed_count(fraction: float, total: int) -> int:
    """Largest count whose share of ``total`` stays within ``fraction``."""
    return math.floor(fraction * total + COUNT_SLACK)


def _sweep(inlier: np.ndarray, ood: np.ndarray):
    """Cumulative (threshold, TP, FP) at every distinct score, descending."""
    scores = np.concatenate([ood, inlier])
    is_ood = np.concatenate([np.ones(ood.size, dtype=np.int64), np.zeros(inlier.size, dtype=np.int64)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_ood = scores[order], is_ood[order]
    tp = np.cumsum(is_ood)
    fp = np.cumsum(1 - is_ood)
    last_of_group = np.r_[scores[1:] != scores[:-1], True]
    return scores[last_of_group], tp[last_of_group], fp[last_of_group]


def auroc(records: Sequence[ScoreRecord]) -> float:
    """Area under the ROC curve by trapezoids over the threshold sweep."""
    inlier, ood = _split(records)
    _, tp, fp = _sweep(inlier, ood)
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    doubled_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    return doubled_area / (2 * ood.size * inlier.size)


def oracle_auroc(records: Sequence[ScoreRecord]) -> float:
    """Mann-Whitney form: pairs won by the OOD score, ties counted half."""
    inlier, ood = _split(records)
    doubled = 0
    for o, i in product(ood, inlier):
        doubled += 2 if o > i else (1 if o == i else 0)
    return doubled / (2 * ood.size * inlier.size)


def _average_precision(tp: Sequence[int], fp: Sequence[int], positives: int) -> float:
    total = 0.0
    previous_tp = 0
    for tp_i, fp_i in zip(tp, fp):
        total += ((tp_i - previous_tp) * tp_i) / (positives * (tp_i + fp_i))
        previous_tp = tp_i
    return total


def aupr(records: Sequence[ScoreRecord]) -> float:
    """Average precision with OOD as positives: sum of precision times recall increments."""
    inlier, ood = _split(records)
    _, tp, fp = _sweep(inlier, ood)
    return _average_precision(tp.tolist(), fp.tolist(), ood.size)


def oracle_aupr(records: Sequence[ScoreRecord]) -> float:
    inlier, ood = _split(records)
    thresholds = sorted(set(ood.tolist()) | set(inlier.tolist()), reverse=True)
    tp = [sum(1 for s in ood if s >= t) for t in thresholds]
    fp = [sum(1 for s in inlier if s >= t) for t in thresholds]
    return _average_precision(tp, fp, ood.size)


def tpr_threshold(records: Sequence[ScoreRecord], n: float) -> float:
    """Largest threshold at which at least a fraction ``n`` of OOD scores are detected."""
    if not 0.0 < n <= 1.0:
        raise ContractViolation(f"TPR operating point {n} outside (0, 1]")
    _, ood = _split(records)
    ranked = np.sort(ood)[::-1]
    return float(ranked[_required_count(n, ood.size) - 1])


def fpr_at_tpr(records: Sequence[ScoreRecord], n: float) -> float:
    """Fraction of inliers flagged at the threshold of :func:`tpr_threshold`."""
    inlier, _ = _split(records)
    t = tpr_threshold(records, n)
    return int(np.count_nonzero(inlier >= t)) / inlier.size


def oracle_fpr_at_tpr(records: Sequence[ScoreRecord], n: float) -> float:
    inlier, ood = _split(records)
    required = _required_count(n, ood.size)
    candidates = set(ood.tolist()) | set(inlier.tolist())
    t = max(c for c in candidates if sum(1 for s in ood if s >= c) >= required)
    return sum(1 for s in inlier if s >= t) / inlier.size


def _accuracy(correct: np.ndarray) -> float:
    if correct.size == 0:
        raise UndefinedMetricError("no inlier samples remain below the threshold")
    return int(np.count_nonzero(correct)) / correct.size


def acc_at_tpr(records: Sequence[ScoreRecord], n: float) -> float:
    """Accuracy on the inliers that stay below the TPR-``n`` threshold."""
    t = tpr_threshold(records, n)
    scores, correct = _inlier_rows(records)
    return _accuracy(correct[scores < t])


def oracle_acc_at_tpr(records: Sequence[ScoreRecord], n: float) -> float:
    inlier, ood = _split(records)
    required = _required_count(n, ood.size)
    candidates = set(ood.tolist()) | set(inlier.tolist())
    t = max(c for c in candidates if sum(1 for s in ood if s >= c) >= required)
    kept = [r.predicted_class == r.true_class for r in records if not r.is_ood and r.ood_score < t]
    if not kept:
        raise UndefinedMetricError("no inlier samples remain below the threshold")
    return sum(kept) / len(kept)


def fpr_threshold(records: Sequence[ScoreRecord], n: float) -> float:
    """Lowest threshold whose inlier false-positive fraction is at most ``n``.

    Returns ``inf`` when no inlier can be flagged within the budget.
    """
    if not 0.0 <= n < 1.0:
        raise ContractViolation(f"FPR operating point {n} outside [0, 1)")
    inlier, _ = _split(records)
    allowed = _allowed_count(n, inlier.size)
    ranked = np.sort(inlier)[::-1]
    threshold = math.inf
    flagged = 0
    for value in np.unique(ranked)[::-1]:
        flagged = int(np.count_nonzero(ranked >= value))
        if flagged > allowed:
            break
        threshold = float(value)
    return threshold


def acc_at_fpr(records: Sequence[ScoreRecord], n: float) -> float:
    """Accuracy on the inliers retained when a fraction ``n`` of them may be flagged as OOD."""
    t = fpr_threshold(records, n)
    scores, correct = _inlier_rows(records)
    return _accuracy(correct[scores < t])


def oracle_acc_at_fpr(records: Sequence[ScoreRecord], n: float) -> float:
    inlier, _ = _split(records)
    allowed = _allowed_count(n, inlier.size)
    candidates = [c for c in set(inlier.tolist()) if sum(1 for s in inlier if s >= c) <= allowed]
    t = min(candidates) if candidates else math.inf
    kept = [r.predicted_class == r.true_class for r in records if not r.is_ood and r.ood_score < t]
    if not kept:
        raise UndefinedMetricError("no inlier samples remain below the threshold")
    return sum(kept) / len(kept)


def n_correct(N: int, fpr95: float, acc95: float) -> int:
    """Correctly classified inliers kept after filtering 95% of OOD: ``round(N * (1 - fpr95) * acc95)``."""
    if not (0.0 <= fpr95 <= 1.0 and 0.0 <= acc95 <= 1.0):
        raise ContractViolation(f"rates must lie in [0, 1], got fpr95={fpr95}, acc95={acc95}")
    return int(math.floor(N * (1.0 - fpr95) * acc95 + 0.5))


def accuracy(records: Sequence[ScoreRecord], classes: Optional[Iterable[int]] = None) -> Optional[float]:
    """Plain inlier accuracy, optionally restricted to ``classes``; None when no record qualifies."""
    rows = [r for r in records if not r.is_ood and r.true_class is not None]
    if classes is not None:
        wanted = set(classes)
        rows = [r for r in rows if r.true_class in wanted]
    if not rows:
        return None
    return sum(r.predicted_class == r.true_class for r in rows) / len(rows)


def percent_key(fraction: float) -> str:
    """Report key for an operating point, e.g. 0.95 -> ``95``."""
    return f"{fraction * 100:g}"


class MetricsReport(BaseModel):
    """All measures at the requested operating points, keyed by percentage."""
    auroc: float = Field(..., ge=0.0, le=1.0)
    aupr: float = Field(..., ge=0.0, le=1.0)
    fpr_at_tpr: Dict[str, float]
    acc_at_tpr: Dict[str, Optional[float]]
    acc_at_fpr: Dict[str, Optional[float]]
    fpr95: float
    one_minus_fpr95: float
    acc95: Optional[float]
    n_correct: int
    n_correct_product: float
    accuracy: Optional[float]
    head_accuracy: Optional[float] = None
    tail_accuracy: Optional[float] = None
    n_in: int
    n_out: int

    def flat_items(self) -> Dict[str, Optional[float]]:
        items: Dict[str, Optional[float]] = {"auroc": self.auroc, "aupr": self.aupr}
        items.update({f"fpr_at_tpr_{k}": v for k, v in self.fpr_at_tpr.items()})
        items.update({f"acc_at_tpr_{k}": v for k, v in self.acc_at_tpr.items()})
        items.update({f"acc_at_fpr_{k}": v for k, v in self.acc_at_fpr.items()})
        items.update({
            "fpr95": self.fpr95,
            "one_minus_fpr95": self.one_minus_fpr95,
            "acc95": self.acc95,
            "n_correct": self.n_correct,
            "n_correct_product": self.n_correct_product,
            "accuracy": self.accuracy,
            "head_accuracy": self.head_accuracy,
            "tail_accuracy": self.tail_accuracy,
            "n_in": self.n_in,
            "n_out": self.n_out,
        })
        return items

    def to_text(self) -> str:
        lines = []
        for key, value in self.flat_items().items():
            if value is None:
                text = "undefined"
            elif isinstance(value, int):
                text = str(value)
            else:
                text = format_float(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


def _defined(fn, *args) -> Optional[float]:
    try:
        return fn(*args)
    except UndefinedMetricError as e:
        logger.warning(f"{fn.__name__}{args[1:]}: {e}")
        return None


def evaluate(
    records: Sequence[ScoreRecord],
    tpr_points: Sequence[float] = (0.80, 0.90, 0.95, 0.98),
    fpr_points: Sequence[float] = (0.0, 0.001, 0.01, 0.1),
    tail: Optional[Iterable[int]] = None,
) -> MetricsReport:
    """Compute every measure; ``tail`` lists the tail classes for the head/tail split."""
    inlier, ood = _split(records)
    fpr95 = fpr_at_tpr(records, 0.95)
    acc95 = _defined(acc_at_tpr, records, 0.95)
    product_95 = (1.0 - fpr95) * (acc95 if acc95 is not None else 0.0)

    head_acc = tail_acc = None
    if tail is not None:
        tail = set(tail)
        labels = {r.true_class for r in records if not r.is_ood and r.true_class is not None}
        head_acc = accuracy(records, labels - tail)
        tail_acc = accuracy(records, tail)

    return MetricsReport(
        auroc=auroc(records),
        aupr=aupr(records),
        fpr_at_tpr={percent_key(n): fpr_at_tpr(records, n) for n in tpr_points},
        acc_at_tpr={percent_key(n): _defined(acc_at_tpr, records, n) for n in tpr_points},
        acc_at_fpr={percent_key(n): _defined(acc_at_fpr, records, n) for n in fpr_points},
        fpr95=fpr95,
        one_minus_fpr95=1.0 - fpr95,
        acc95=acc95,
        n_correct=n_correct(inlier.size, fpr95, acc95 if acc95 is not None else 0.0),
        n_correct_product=product_95,
        accuracy=accuracy(records),
        head_accuracy=head_acc,
        tail_accuracy=tail_acc,
        n_in=inlier.size,
        n_out=ood.size,
    )


def write_report(report: MetricsReport, text_path: str, json_path: str) -> None:
    Path(text_path).parent.mkdir(parents=True, exist_ok=True)
    with open(text_path, "w") as f:
        f.write(report.to_text())
    with open(json_path, "w") as f:
        f.write(report.model_dump_json(indent=2))
    logger.info(f"Metrics report written to {text_path} and {json_path}")


def write_scores_csv(records: Sequence[ScoreRecord], path: str) -> None:
    rows = []
    for r in records:
        rows.append([
            str(r.sample_id),
            "1" if r.is_ood else "0",
            format_float(r.ood_score),
            "" if r.is_ood or r.predicted_class is None else str(r.predicted_class),
            "" if r.is_ood or r.true_class is None else str(r.true_class),
        ])
    write_rows(path, SCORE_HEADER, rows)


def read_scores_csv(path: str) -> List[ScoreRecord]:
    """Parse a score file, ours or external, validating flags and the score range."""
    _, rows = read_rows(path, SCORE_HEADER)
    records = []
    for line, cells in rows:
        flag = cells[1].strip()
        if flag not in ("0", "1"):
            raise DataParseError(f"is_ood must be 0 or 1, got {flag!r}", path=path, line=line)
        is_ood = flag == "1"
        score = parse_float(cells[2], path, line)
        if not 0.0 <= score <= 1.0:
            raise DataParseError(f"score {score} outside [0, 1]", path=path, line=line)
        pred = parse_int(cells[3], path, line) if cells[3].strip() and not is_ood else None
        label = parse_int(cells[4], path, line) if cells[4].strip() and not is_ood else None
        records.append(ScoreRecord(parse_int(cells[0], path, line), is_ood, score, pred, label))
    return records


def score_histogram(records: Sequence[ScoreRecord], bins: int) -> List[Tuple[float, float, int, int]]:
    """Counts of inlier and OOD scores over ``bins`` equal-width bins of [0, 1]."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    inlier = np.array([r.ood_score for r in records if not r.is_ood])
    ood = np.array([r.ood_score for r in records if r.is_ood])
    in_counts, _ = np.histogram(inlier, bins=edges)
    ood_counts, _ = np.histogram(ood, bins=edges)
    return [(edges[i], edges[i + 1], int(in_counts[i]), int(ood_counts[i])) for i in range(bins)]


def write_histogram_csv(rows: Sequence[Tuple[float, float, int, int]], path: str) -> None:
    write_rows(
        path,
        ["bin_lo", "bin_hi", "inlier_count", "ood_count"],
        [[format_float(lo), format_float(hi), str(a), str(b)] for lo, hi, a, b in rows],
    )

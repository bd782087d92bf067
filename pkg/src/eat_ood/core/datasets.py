"""Synthetic long-tailed inlier data, OOD data, and the sample CSV format.

Sample CSV layout: header ``id,label,w0,...,w{d-1}``; ``label = -1`` marks
an unlabeled OOD row.
"""
from dataclasses import dataclass, field
from typing import List, Optional
import hashlib
import logging

import numpy as np

from eat_ood.config.config import LongTailSpec
from eat_ood.errors import ConfigurationError, ContractViolation, DataParseError
from eat_ood.utils.csvio import format_float, parse_float, parse_int, read_rows, write_rows

logger = logging.getLogger(__name__)

OOD_LABEL = -1
PATTERN_BANK_SEED = 7919
CLUSTER_MEANS_KEY = 104729
OOD_MODES = ("uniform", "shifted-gaussian", "held-out-patterns")


@dataclass
class SampleSet:
    """Rows of inputs with integer ids and labels (``-1`` for OOD rows)."""
    ids: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray
    sources: Optional[np.ndarray] = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ContractViolation(f"inputs must be rank-2, got shape {self.inputs.shape}")
        n = self.inputs.shape[0]
        if len(self.ids) != n or len(self.labels) != n:
            raise ContractViolation("ids, labels and input rows must have equal length")
        if self.sources is not None:
            self.sources = np.asarray(self.sources, dtype=np.int64).reshape(-1)
            if len(self.sources) != n:
                raise ContractViolation("sources must have one entry per row")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index: np.ndarray) -> "SampleSet":
        index = np.asarray(index, dtype=np.int64)
        sources = None if self.sources is None else self.sources[index]
        return SampleSet(self.ids[index], self.inputs[index], self.labels[index], sources)

    def of_classes(self, classes) -> "SampleSet":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))

    def digest(self) -> str:
        """SHA-256 over ids, labels and input bytes."""
        h = hashlib.sha256()
        for part in (self.ids, self.labels, self.inputs):
            h.update(np.ascontiguousarray(part).tobytes())
        return h.hexdigest()

    @classmethod
    def empty(cls, dim: int) -> "SampleSet":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, dim)), np.zeros(0, dtype=np.int64))


@dataclass
class Batch:
    """Training rows with per-sample loss weights in (0, 1]."""
    inputs: np.ndarray
    labels: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ContractViolation(f"batch inputs must be rank-2, got shape {self.inputs.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.inputs.shape[0]
        self.weights = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.labels) != n or len(self.weights) != n:
            raise ContractViolation("batch inputs, labels and weights must have equal length")
        if np.any(self.weights <= 0.0) or np.any(self.weights > 1.0):
            raise ContractViolation("sample weights must lie in (0, 1]")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def concat(self, other: "Batch") -> "Batch":
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        return Batch(
            np.vstack([self.inputs, other.inputs]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.weights, other.weights]),
        )


def round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def longtail_counts(spec: LongTailSpec) -> List[int]:
    """Exponential profile ``n_c = round(head_count * rho^(-c/(C-1)))``."""
    C = spec.num_classes
    if C == 1:
        return [spec.head_count]
    return [round_half_up(spec.head_count * spec.imbalance_ratio ** (-c / (C - 1))) for c in range(C)]


def class_counts(samples: SampleSet, num_classes: int) -> np.ndarray:
    labels = samples.labels[samples.labels >= 0]
    return np.bincount(labels, minlength=num_classes)[:num_classes]


def tail_classes(counts) -> List[int]:
    """Classes whose training count is below the median class count."""
    counts = np.asarray(counts)
    median = float(np.median(counts))
    return [int(c) for c in np.flatnonzero(counts < median)]


def render_pattern(index: int, width: int, height: int) -> np.ndarray:
    """Deterministic pattern ``index`` of the shared pattern bank, flattened.

    A filled rectangle plus three scattered cells on a ``height x width``
    grid. Inlier class ``c`` uses pattern ``c``; held-out OOD patterns use
    indices from ``C`` upward, so the two never share a pattern.
    """
    rng = np.random.default_rng([PATTERN_BANK_SEED, index])
    grid = np.zeros((height, width))
    box_w = int(rng.integers(1, max(1, width // 2) + 1))
    box_h = int(rng.integers(1, max(1, height // 2) + 1))
    x0 = int(rng.integers(0, width - box_w + 1))
    y0 = int(rng.integers(0, height - box_h + 1))
    grid[y0:y0 + box_h, x0:x0 + box_w] = 1.0
    grid.flat[rng.integers(0, width * height, size=3)] = 1.0
    return grid.ravel()


def _grid_shape(spec: LongTailSpec):
    if spec.geometry == "grid-image":
        return spec.grid_width, spec.grid_height
    return spec.input_dim, 1


def cluster_means(spec: LongTailSpec) -> np.ndarray:
    rng = np.random.default_rng([CLUSTER_MEANS_KEY, spec.seed])
    directions = rng.standard_normal((spec.num_classes, spec.input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return spec.separation * directions


def gen_longtail(spec: LongTailSpec, id_offset: int = 0) -> SampleSet:
    """Draw the long-tailed labeled set described by ``spec``."""
    counts = longtail_counts(spec)
    if counts[-1] < 1:
        raise ConfigurationError(
            f"infeasible long-tail spec: tail class gets {counts[-1]} samples "
            f"(head_count={spec.head_count}, imbalance_ratio={spec.imbalance_ratio})"
        )
    rng = np.random.default_rng(spec.seed)
    width, height = _grid_shape(spec)
    means = cluster_means(spec) if spec.geometry == "gaussian-clusters" else None

    blocks, labels = [], []
    for c, n_c in enumerate(counts):
        center = means[c] if means is not None else render_pattern(c, width, height)
        blocks.append(center + spec.noise_std * rng.standard_normal((n_c, spec.input_dim)))
        labels.append(np.full(n_c, c))
    inputs = np.vstack(blocks)
    labels = np.concatenate(labels)
    ids = id_offset + np.arange(len(labels))
    logger.debug(f"Generated long-tail set: counts={counts}, geometry={spec.geometry}")
    return SampleSet(ids, inputs, labels, sources=labels.copy())


def gen_balanced(spec: LongTailSpec, per_class: int, seed: int, id_offset: int = 0) -> SampleSet:
    """Balanced test set from the same class generators as ``spec``."""
    test_spec = spec.model_copy(update={"imbalance_ratio": 1.0, "head_count": per_class, "seed": seed})
    samples = gen_longtail(test_spec, id_offset=id_offset)
    if spec.geometry == "gaussian-clusters":
        # class means depend on the seed; keep the training means
        rng = np.random.default_rng(seed)
        noise = spec.noise_std * rng.standard_normal(samples.inputs.shape)
        samples.inputs = cluster_means(spec)[samples.labels] + noise
    return samples


def gen_ood(
    count: int,
    dim: int,
    mode: str,
    seed: int,
    *,
    num_classes: int = 10,
    heldout_patterns: int = 8,
    pattern_offset: int = 0,
    grid_width: Optional[int] = None,
    grid_height: Optional[int] = None,
    shift: float = 4.0,
    noise_std: float = 0.35,
    id_offset: int = 0,
) -> SampleSet:
    """Unlabeled OOD rows from one of the structural generators.

    ``uniform`` fills the unit hypercube, ``shifted-gaussian`` centers a
    unit Gaussian at ``shift`` in every coordinate, and ``held-out-patterns``
    renders pattern-bank entries ``num_classes + pattern_offset + i`` for
    ``i < heldout_patterns``, none of which is an inlier pattern.
    """
    if mode not in OOD_MODES:
        raise ConfigurationError(f"unknown OOD mode {mode!r}, expected one of {', '.join(OOD_MODES)}")
    if count < 1:
        raise ContractViolation("OOD sample count must be at least 1")
    rng = np.random.default_rng(seed)
    sources = np.full(count, -1)

    if mode == "uniform":
        inputs = rng.random((count, dim))
    elif mode == "shifted-gaussian":
        inputs = shift + rng.standard_normal((count, dim))
    else:
        width = grid_width if grid_width is not None else dim
        height = grid_height if grid_height is not None else 1
        if width * height != dim:
            raise ConfigurationError(f"grid {width}x{height} does not match dimension {dim}")
        first = num_classes + pattern_offset
        bank = np.stack([render_pattern(first + i, width, height) for i in range(heldout_patterns)])
        sources = first + rng.integers(0, heldout_patterns, size=count)
        inputs = bank[sources - first] + noise_std * rng.standard_normal((count, dim))

    ids = id_offset + np.arange(count)
    return SampleSet(ids, inputs, np.full(count, OOD_LABEL), sources=sources)


def write_samples_csv(samples: SampleSet, path: str) -> None:
    header = ["id", "label"] + [f"w{i}" for i in range(samples.dim)]
    rows = [
        [str(int(i)), str(int(y))] + [format_float(v) for v in x]
        for i, y, x in zip(samples.ids, samples.labels, samples.inputs)
    ]
    write_rows(path, header, rows)


def read_samples_csv(path: str) -> SampleSet:
    """Parse a sample file written by :func:`write_samples_csv`; every cell must be finite."""
    header, rows = read_rows(path, ["id", "label"])
    dim = len(header) - 2
    for i, name in enumerate(header[2:]):
        if name != f"w{i}":
            raise DataParseError(f"unexpected column {name!r}, expected w{i}", path=path, line=1)
    ids, labels, inputs = [], [], []
    for line, cells in rows:
        ids.append(parse_int(cells[0], path, line))
        labels.append(parse_int(cells[1], path, line))
        inputs.append([parse_float(c, path, line) for c in cells[2:]])
    if not ids:
        return SampleSet.empty(dim)
    return SampleSet(np.array(ids), np.array(inputs).reshape(len(ids), dim), np.array(labels))

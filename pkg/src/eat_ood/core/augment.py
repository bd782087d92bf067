"""Context-rich tail-class augmentation with the CutMix operator.

A tail-class foreground is pasted onto a head-class or OOD background
through a binary mask; the composite keeps the foreground label and is
down-weighted in the loss.
"""
from dataclasses import dataclass
from typing import Optional, Tuple, Union
import logging

import numpy as np

from eat_ood.core.datasets import Batch, SampleSet
from eat_ood.core.numerics import Tensor
from eat_ood.errors import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)

Box = Tuple[int, int, int, int]


@dataclass(frozen=True)
class CutMixMask:
    """Binary mask over an ``H x W`` grid: 1 keeps the background, 0 takes the foreground.

    ``box`` is the half-open foreground rectangle ``(x0, y0, x1, y1)`` for
    sampled masks, ``None`` for explicitly built ones.
    """
    width: int
    height: int
    mask: np.ndarray
    box: Optional[Box] = None

    @classmethod
    def from_box(cls, width: int, height: int, box: Box) -> "CutMixMask":
        x0, y0, x1, y1 = box
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise ContractViolation(f"box {box} outside a {width}x{height} grid")
        mask = np.ones((height, width))
        mask[y0:y1, x0:x1] = 0.0
        return cls(width, height, mask, box)

    @classmethod
    def explicit(cls, mask: np.ndarray) -> "CutMixMask":
        """Any binary mask, degenerate ones included."""
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim != 2 or not np.all((mask == 0.0) | (mask == 1.0)):
            raise ContractViolation("an explicit mask must be a binary 2-D grid")
        return cls(mask.shape[1], mask.shape[0], mask.copy())

    @property
    def box_area(self) -> int:
        return int(self.width * self.height - self.mask.sum())


def sample_mask(width: int, height: int, area_fraction: float, rng: np.random.Generator) -> CutMixMask:
    """Rectangle of about ``area_fraction * W * H`` cells at a uniform position.

    Box sides are ``round(W * sqrt(a))`` by ``round(H * sqrt(a))``, clamped
    so the box is neither empty nor the whole grid.
    """
    if width < 2 or height < 2:
        raise ContractViolation(f"CutMix needs a grid of at least 2x2, got {width}x{height}")
    if not 0.0 < area_fraction < 1.0:
        raise ConfigurationError(f"CutMix area fraction {area_fraction} outside (0, 1)")
    side = np.sqrt(area_fraction)
    box_w = int(min(max(np.floor(width * side + 0.5), 1), width))
    box_h = int(min(max(np.floor(height * side + 0.5), 1), height))
    if box_w == width and box_h == height:
        box_h -= 1
    x0 = int(rng.integers(0, width - box_w + 1))
    y0 = int(rng.integers(0, height - box_h + 1))
    return CutMixMask.from_box(width, height, (x0, y0, x0 + box_w, y0 + box_h))


def cutmix(background, foreground, mask: CutMixMask):
    """``M * background + (1 - M) * foreground``, cell by cell.

    Inputs may be flattened (row-major) or ``H x W`` grids, as arrays or
    Tensors; the result has the background's shape and type.
    """
    b = background.data if isinstance(background, Tensor) else np.asarray(background, dtype=np.float64)
    f = foreground.data if isinstance(foreground, Tensor) else np.asarray(foreground, dtype=np.float64)
    cells = mask.width * mask.height
    if b.size != cells or f.size != cells or b.shape != f.shape:
        raise ContractViolation(
            f"CutMix shapes disagree: background {b.shape}, foreground {f.shape}, mask {mask.height}x{mask.width}"
        )
    keep = mask.mask.reshape(b.shape).astype(bool)
    out = np.where(keep, b, f)
    return Tensor(out) if isinstance(background, Tensor) else out


@dataclass
class BackgroundPool:
    """Head-class and OOD backgrounds, drawn from with equal probability."""
    head: SampleSet
    ood: SampleSet

    def __len__(self) -> int:
        return len(self.head) + len(self.ood)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        sources = [s for s in (self.head, self.ood) if len(s) > 0]
        source = sources[int(rng.integers(0, len(sources)))]
        return source.inputs[int(rng.integers(0, len(source)))]


def make_tail_augmented_batch(
    tail: SampleSet,
    pool: BackgroundPool,
    count: int,
    w_gen: float,
    rng: np.random.Generator,
    width: int,
    height: int,
    alpha: float = 1.0,
) -> Batch:
    """``count`` CutMix composites of uniformly drawn tail foregrounds on pool backgrounds.

    Each composite carries its foreground's label and weight ``w_gen``. The
    foreground area fraction is drawn from ``Beta(alpha, alpha)``.
    """
    if not 0.0 < w_gen <= 1.0:
        raise ConfigurationError(f"generated-sample weight {w_gen} outside (0, 1]")
    if count < 0:
        raise ContractViolation("augmentation count must be non-negative")
    if count == 0:
        return Batch(np.zeros((0, tail.dim)), np.zeros(0, dtype=np.int64), np.zeros(0))
    if len(tail) == 0:
        raise ContractViolation("no tail-class samples to use as foregrounds")
    if len(pool) == 0:
        raise ConfigurationError("CutMix background pool is empty")

    cells = width * height
    lo, hi = 1.0 / cells, 1.0 - 1.0 / cells
    inputs = np.empty((count, tail.dim))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        index = int(rng.integers(0, len(tail)))
        area = float(np.clip(rng.beta(alpha, alpha), lo, hi))
        mask = sample_mask(width, height, area, rng)
        inputs[i] = cutmix(pool.draw(rng), tail.inputs[index], mask)
        labels[i] = tail.labels[index]
    return Batch(inputs, labels, np.full(count, w_gen))

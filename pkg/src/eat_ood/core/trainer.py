"""Two-stage training.

Stage 1 trains extractor and heads jointly on inliers (plus down-weighted
CutMix tail composites) and OOD rows, with per-head virtual labels drawn
fresh every step. Stage 2 freezes the extractor and refines the heads
with the logit-adjusted loss.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple
import logging
import math

import numpy as np

from eat_ood.config.config import TrainConfig
from eat_ood.core import losses, numerics
from eat_ood.core.augment import BackgroundPool, make_tail_augmented_batch
from eat_ood.core.datasets import Batch, SampleSet, class_counts, tail_classes
from eat_ood.core.losses import ClassPriors
from eat_ood.core.model import ModelParams, features, forward
from eat_ood.core.numerics import Tensor
from eat_ood.errors import ContractViolation, NumericDomainError, TrainingDivergedError
from eat_ood.utils.csvio import format_float, write_rows

logger = logging.getLogger(__name__)

OUTLIER_OBJECTIVE = {"eat": "virtual", "oe": "oe", "msp": "none"}


@dataclass(frozen=True)
class LossTraceEntry:
    epoch: int
    split: str
    mean_loss: float


@dataclass(frozen=True)
class StepInfo:
    """Loss components of one optimisation step, before the update."""
    epoch: int
    step: int
    inlier_term: float
    outlier_term: float
    total: float
    lr: float


@dataclass
class TrainResult:
    params: ModelParams
    trace: List[LossTraceEntry] = field(default_factory=list)


class MomentumSGD:
    """Heavy-ball gradient descent: ``v = mu * v + g``, ``theta -= lr * v``."""

    def __init__(self, parameters: List[Tensor], momentum: float):
        self.parameters = parameters
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in parameters]

    def step(self, lr: float) -> None:
        for p, v in zip(self.parameters, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.update_(-lr * v)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base_lr`` towards 0 over ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _minibatches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


class _OutlierStream:
    """Cycles through reshuffled outlier rows, ``size`` at a time."""

    def __init__(self, outliers: SampleSet, rng: np.random.Generator):
        self.outliers = outliers
        self.rng = rng
        self.order = rng.permutation(len(outliers)) if len(outliers) else np.zeros(0, dtype=np.int64)
        self.position = 0

    def take(self, size: int) -> np.ndarray:
        if len(self.outliers) == 0 or size == 0:
            return np.zeros((0, self.outliers.dim))
        picked = []
        while len(picked) < size:
            if self.position == len(self.order):
                self.order = self.rng.permutation(len(self.outliers))
                self.position = 0
            chunk = self.order[self.position:self.position + size - len(picked)]
            self.position += len(chunk)
            picked.extend(chunk.tolist())
        return self.outliers.inputs[np.array(picked)]


def _tail_augmenter(config: TrainConfig, inliers: SampleSet, outliers: SampleSet, num_classes: int, grid_shape):
    """Closure producing CutMix tail composites, or None when augmentation is off."""
    if not config.use_cutmix or config.augment_count_per_batch == 0:
        return None
    if grid_shape is None:
        logger.warning("CutMix needs grid-shaped inputs; tail augmentation disabled")
        return None
    counts = class_counts(inliers, num_classes)
    tails = tail_classes(counts)
    if not tails:
        logger.warning("No class is below the median count; tail augmentation disabled")
        return None
    heads = [c for c in range(num_classes) if c not in tails]
    tail_set = inliers.of_classes(tails)
    pool = BackgroundPool(head=inliers.of_classes(heads), ood=outliers)
    width, height = grid_shape
    logger.info(f"CutMix tail classes: {tails}")

    def augment(rng: np.random.Generator) -> Batch:
        return make_tail_augmented_batch(
            tail_set, pool, config.augment_count_per_batch, config.w_gen, rng, width, height, config.cutmix_alpha
        )

    return augment


def train_stage1(
    config: TrainConfig,
    inliers: SampleSet,
    outliers: SampleSet,
    num_classes: int,
    grid_shape: Optional[Tuple[int, int]] = None,
    on_step: Optional[Callable[[StepInfo], None]] = None,
) -> TrainResult:
    """Joint training of extractor and heads on the stage-1 objective."""
    if len(inliers) == 0:
        raise ContractViolation("stage 1 needs a non-empty inlier set")
    objective = OUTLIER_OBJECTIVE[config.method]
    if objective != "none" and len(outliers) == 0:
        raise ContractViolation(f"method {config.method!r} needs a non-empty outlier set")

    params = ModelParams.initialize(
        inliers.dim, config.hidden_dim, num_classes, config.k, config.m, config.seed, config.method
    )
    trace: List[LossTraceEntry] = []
    if config.epochs_stage1 == 0:
        return TrainResult(params, trace)

    rng = np.random.default_rng([config.seed, 1])
    augment = _tail_augmenter(config, inliers, outliers, num_classes, grid_shape)
    stream = _OutlierStream(outliers, rng)
    optimizer = MomentumSGD(params.parameters(), config.momentum)
    steps_per_epoch = math.ceil(len(inliers) / config.batch_size)
    total_steps = config.epochs_stage1 * steps_per_epoch
    global_step = 0

    for epoch in range(1, config.epochs_stage1 + 1):
        epoch_losses = []
        for step, index in enumerate(_minibatches(len(inliers), config.batch_size, rng)):
            batch = Batch(inliers.inputs[index], inliers.labels[index])
            if augment is not None:
                batch = batch.concat(augment(rng))
            outlier_inputs = stream.take(len(index)) if objective != "none" else np.zeros((0, inliers.dim))

            params.zero_grad()
            lr = cosine_lr(config.lr_stage1, global_step, total_steps)
            try:
                outlier_logits = forward(params, outlier_inputs) if len(outlier_inputs) else None
                inlier, outlier, loss = losses.total_loss_terms(
                    forward(params, batch.inputs), batch.labels, outlier_logits,
                    config.lam, num_classes, config.k, batch.weights, objective,
                )
            except NumericDomainError as e:
                logger.error(f"Stage 1 diverged at epoch {epoch}, step {step}: {e}")
                raise TrainingDivergedError(f"stage 1 diverged: {e}", epoch=epoch, step=step) from e
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError("stage 1 loss is not finite", epoch=epoch, step=step)

            if on_step is not None:
                on_step(StepInfo(epoch, step, inlier.item(), outlier.item(), loss.item(), lr))
            loss.backward()
            optimizer.step(lr)
            epoch_losses.append(loss.item())
            global_step += 1

        mean_loss = float(np.mean(epoch_losses))
        trace.append(LossTraceEntry(epoch, "stage1", mean_loss))
        logger.info(f"Stage 1 epoch {epoch}/{config.epochs_stage1}: mean loss {mean_loss:.6f}")

    return TrainResult(params, trace)


def finetune_stage2(
    params: ModelParams,
    inliers: SampleSet,
    priors: ClassPriors,
    config: TrainConfig,
) -> TrainResult:
    """Head-only refinement with the LA loss over the C inlier logits of every head.

    The extractor of the returned model is bit-identical to the input's.
    """
    tuned = params.copy()
    trace: List[LossTraceEntry] = []
    if config.epochs_stage2 == 0 or len(inliers) == 0:
        return TrainResult(tuned, trace)
    if priors.num_classes != tuned.C:
        raise ContractViolation(f"{priors.num_classes} priors for a {tuned.C}-class model")

    frozen = features(tuned, inliers.inputs).data
    rng = np.random.default_rng([config.seed, 2])
    optimizer = MomentumSGD(tuned.head_parameters(), config.momentum)
    steps_per_epoch = math.ceil(len(inliers) / config.batch_size)
    total_steps = config.epochs_stage2 * steps_per_epoch
    global_step = 0

    for epoch in range(1, config.epochs_stage2 + 1):
        epoch_losses = []
        for step, index in enumerate(_minibatches(len(inliers), config.batch_size, rng)):
            feats = Tensor(frozen[index])
            tuned.zero_grad()
            try:
                terms = [
                    losses.la_loss(numerics.columns(head(feats), 0, tuned.C), inliers.labels[index], priors)
                    for head in tuned.heads
                ]
                loss = losses.sum_terms(terms)
            except NumericDomainError as e:
                raise TrainingDivergedError(f"stage 2 diverged: {e}", epoch=epoch, step=step) from e
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError("stage 2 loss is not finite", epoch=epoch, step=step)
            loss.backward()
            optimizer.step(cosine_lr(config.lr_stage2, global_step, total_steps))
            epoch_losses.append(loss.item())
            global_step += 1

        mean_loss = float(np.mean(epoch_losses))
        trace.append(LossTraceEntry(epoch, "stage2", mean_loss))
        logger.info(f"Stage 2 epoch {epoch}/{config.epochs_stage2}: mean loss {mean_loss:.6f}")

    return TrainResult(tuned, trace)


def train(
    config: TrainConfig,
    inliers: SampleSet,
    outliers: SampleSet,
    num_classes: int,
    grid_shape: Optional[Tuple[int, int]] = None,
) -> TrainResult:
    """Stage 1, then stage 2 when ``config.use_finetune`` is set."""
    stage1 = train_stage1(config, inliers, outliers, num_classes, grid_shape)
    if not config.use_finetune:
        return stage1
    priors = ClassPriors.from_counts(class_counts(inliers, num_classes))
    stage2 = finetune_stage2(stage1.params, inliers, priors, config)
    return TrainResult(stage2.params, stage1.trace + stage2.trace)


def write_loss_trace(trace: List[LossTraceEntry], path: str) -> None:
    """Mean loss per epoch and stage as ``epoch,split,mean_loss``."""
    write_rows(path, ["epoch", "split", "mean_loss"], [[str(e.epoch), e.split, format_float(e.mean_loss)] for e in trace])

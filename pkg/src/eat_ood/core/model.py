"""Shared feature extractor with m classifier heads over C+k logits.

Checkpoint format (JSON, ``format = "eat-ood-checkpoint"``, ``version = 1``):
``architecture`` holds ``C, k, m, d, h``, ``method`` the training method,
and ``tensors`` a list of ``{name, shape, data}`` entries in the order
``extractor.0.weight, extractor.0.bias, extractor.1.weight,
extractor.1.bias, head.<i>.weight, head.<i>.bias``. Weights are stored
input-major (``in x out``) as flat row-major float lists.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Union
import copy
import hashlib
import logging
import os

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from eat_ood.config.config import Method
from eat_ood.core import numerics
from eat_ood.core.datasets import SampleSet
from eat_ood.core.numerics import Tensor
from eat_ood.errors import ContractViolation, DataParseError, MissingFileError, NumericDomainError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "eat-ood-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class DenseLayer:
    """Affine map ``x @ weight + bias`` with ``weight`` of shape ``(in, out)``."""
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return numerics.add(numerics.matmul(x, self.weight), self.bias)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    @classmethod
    def random(cls, fan_in: int, fan_out: int, rng: np.random.Generator, gain: float) -> "DenseLayer":
        weight = rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
        return cls(Tensor(weight, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True))

    @classmethod
    def zeros(cls, fan_in: int, fan_out: int) -> "DenseLayer":
        return cls(Tensor(np.zeros((fan_in, fan_out)), requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True))


@dataclass
class ModelParams:
    """Extractor layers ``d -> h -> h`` (ReLU after each) plus m heads ``h -> C+k``."""
    extractor: List[DenseLayer]
    heads: List[DenseLayer]
    num_classes: int
    num_abstention: int
    method: Method = "eat"

    def __post_init__(self):
        if not self.heads:
            raise ContractViolation("a model needs at least one head")
        arity = {h.weight.shape[1] for h in self.heads}
        if arity != {self.num_classes + self.num_abstention}:
            raise ContractViolation(f"every head must emit C+k = {self.num_classes + self.num_abstention} logits")

    @property
    def C(self) -> int:
        return self.num_classes

    @property
    def k(self) -> int:
        return self.num_abstention

    @property
    def m(self) -> int:
        return len(self.heads)

    @property
    def input_dim(self) -> int:
        return self.extractor[0].weight.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.extractor[-1].weight.shape[1]

    @classmethod
    def initialize(
        cls, input_dim: int, hidden_dim: int, C: int, k: int, m: int, seed: int, method: Method = "eat"
    ) -> "ModelParams":
        """He-initialised extractor; each head drawn from its own RNG stream."""
        if m < 1 or k < 0 or C < 1:
            raise ContractViolation(f"invalid architecture C={C}, k={k}, m={m}")
        streams = np.random.SeedSequence(seed).spawn(1 + m)
        ext_rng = np.random.default_rng(streams[0])
        extractor = [
            DenseLayer.random(input_dim, hidden_dim, ext_rng, gain=2.0),
            DenseLayer.random(hidden_dim, hidden_dim, ext_rng, gain=2.0),
        ]
        heads = [DenseLayer.random(hidden_dim, C + k, np.random.default_rng(s), gain=1.0) for s in streams[1:]]
        return cls(extractor, heads, C, k, method)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int, C: int, k: int, m: int) -> "ModelParams":
        extractor = [DenseLayer.zeros(input_dim, hidden_dim), DenseLayer.zeros(hidden_dim, hidden_dim)]
        return cls(extractor, [DenseLayer.zeros(hidden_dim, C + k) for _ in range(m)], C, k)

    def extractor_parameters(self) -> List[Tensor]:
        return [p for layer in self.extractor for p in layer.parameters()]

    def head_parameters(self) -> List[Tensor]:
        return [p for layer in self.heads for p in layer.parameters()]

    def parameters(self) -> List[Tensor]:
        return self.extractor_parameters() + self.head_parameters()

    def named_parameters(self):
        for i, layer in enumerate(self.extractor):
            yield f"extractor.{i}.weight", layer.weight
            yield f"extractor.{i}.bias", layer.bias
        for i, layer in enumerate(self.heads):
            yield f"head.{i}.weight", layer.weight
            yield f"head.{i}.bias", layer.bias

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def single_head(self, index: int) -> "ModelParams":
        """View sharing the extractor tensors and head ``index``."""
        return ModelParams(self.extractor, [self.heads[index]], self.C, self.k, self.method)

    def flat(self) -> np.ndarray:
        """All parameters as one vector theta, in ``named_parameters`` order."""
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def load_flat_(self, theta: np.ndarray) -> None:
        """Overwrite every parameter in place from the flat vector ``theta``."""
        theta = np.asarray(theta, dtype=np.float64).ravel()
        sizes = [p.data.size for p in self.parameters()]
        if sum(sizes) != theta.size:
            raise ContractViolation(f"parameter vector has {theta.size} entries, model has {sum(sizes)}")
        offset = 0
        for p, size in zip(self.parameters(), sizes):
            p.data[...] = theta[offset:offset + size].reshape(p.shape)
            offset += size

    def flat_grad(self) -> np.ndarray:
        return np.concatenate(
            [(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in self.parameters()]
        )

    def extractor_digest(self) -> str:
        h = hashlib.sha256()
        for p in self.extractor_parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _input_tensor(params: ModelParams, x) -> Tensor:
    values = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if values.ndim not in (1, 2) or values.shape[-1] != params.input_dim:
        raise ContractViolation(f"input of shape {values.shape} does not match input dimension {params.input_dim}")
    if not np.all(np.isfinite(values)):
        raise NumericDomainError("model input contains NaN or infinite values")
    return Tensor(values)


def features(params: ModelParams, x) -> Tensor:
    """Shared extractor output ``relu(relu(x W1 + b1) W2 + b2)``."""
    hidden = _input_tensor(params, x)
    for layer in params.extractor:
        hidden = numerics.relu(layer(hidden))
    return hidden


def forward(params: ModelParams, x) -> List[Tensor]:
    """One logit Tensor of length C+k per head; the extractor is evaluated once."""
    shared = features(params, x)
    return [head(shared) for head in params.heads]


def head_probabilities(params: ModelParams, x) -> np.ndarray:
    """Softmax outputs stacked as ``[m, ..., C+k]``."""
    return np.stack([numerics.softmax_probabilities(logits.data) for logits in forward(params, x)])


def _unwrap(values: np.ndarray, x):
    values = np.asarray(values)
    single = (x.ndim if isinstance(x, Tensor) else np.ndim(x)) == 1
    return values.item() if single else values


def ood_score(params: ModelParams, x):
    """``G(x)``: head-averaged softmax mass on the k abstention classes."""
    probs = head_probabilities(params, x)
    mass = probs[..., params.C:].sum(axis=-1).mean(axis=0)
    return _unwrap(np.clip(mass, 0.0, 1.0), x)


def predict_inlier(params: ModelParams, x):
    """Argmax over the first C entries of the head-averaged probabilities."""
    mean_probs = head_probabilities(params, x).mean(axis=0)
    return _unwrap(np.argmax(mean_probs[..., :params.C], axis=-1), x)


def msp_score(params: ModelParams, x):
    """``1 - max`` of the head-averaged inlier probabilities, renormalised over the C inlier classes."""
    inlier = head_probabilities(params, x).mean(axis=0)[..., :params.C]
    inlier = inlier / inlier.sum(axis=-1, keepdims=True)
    return _unwrap(np.clip(1.0 - inlier.max(axis=-1), 0.0, 1.0), x)


def detector_score(params: ModelParams, x):
    """The OOD score used for ``params.method``: G for EAT, MSP for the baselines."""
    if params.method == "eat" and params.k > 0:
        return ood_score(params, x)
    return msp_score(params, x)


@dataclass(frozen=True)
class ScoreRecord:
    """One evaluation row; ``ood_score`` is higher for more OOD-looking samples."""
    sample_id: int
    is_ood: bool
    ood_score: float
    predicted_class: Optional[int] = None
    true_class: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.ood_score <= 1.0:
            raise ContractViolation(f"OOD score {self.ood_score} outside [0, 1]")


def score_samples(params: ModelParams, samples: SampleSet, is_ood: bool) -> List[ScoreRecord]:
    """One ScoreRecord per row; class columns stay empty for OOD rows."""
    if len(samples) == 0:
        return []
    scores = np.atleast_1d(detector_score(params, samples.inputs))
    preds = np.atleast_1d(predict_inlier(params, samples.inputs))
    records = []
    for sample_id, label, score, pred in zip(samples.ids, samples.labels, scores, preds):
        records.append(
            ScoreRecord(
                sample_id=int(sample_id),
                is_ood=is_ood,
                ood_score=float(score),
                predicted_class=None if is_ood else int(pred),
                true_class=None if is_ood else int(label),
            )
        )
    return records


class CheckpointTensor(BaseModel):
    name: str
    shape: List[int]
    data: List[float]


class Architecture(BaseModel):
    C: int = Field(..., ge=1)
    k: int = Field(..., ge=0)
    m: int = Field(..., ge=1)
    d: int = Field(..., ge=1)
    h: int = Field(..., ge=1)


class Checkpoint(BaseModel):
    format: Literal["eat-ood-checkpoint"] = CHECKPOINT_FORMAT
    version: int = CHECKPOINT_VERSION
    method: Method = "eat"
    architecture: Architecture
    tensors: List[CheckpointTensor]


def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> None:
    """Write architecture, method and every tensor as one JSON document."""
    checkpoint = Checkpoint(
        method=params.method,
        architecture=Architecture(C=params.C, k=params.k, m=params.m, d=params.input_dim, h=params.hidden_dim),
        tensors=[
            CheckpointTensor(name=name, shape=list(t.shape), data=t.data.ravel().tolist())
            for name, t in params.named_parameters()
        ],
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(checkpoint.model_dump_json())
    logger.info(f"Checkpoint written to {path}")


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    """Rebuild a model from :func:`save_checkpoint` output, checking names and shapes."""
    if not os.path.exists(path):
        raise MissingFileError(f"Checkpoint not found: {path}")
    with open(path, "r") as f:
        raw = f.read()
    try:
        checkpoint = Checkpoint.model_validate_json(raw)
    except ValidationError as e:
        raise DataParseError(f"invalid checkpoint: {e}", path=str(path)) from e
    if checkpoint.version != CHECKPOINT_VERSION:
        raise DataParseError(f"unsupported checkpoint version {checkpoint.version}", path=str(path))

    arch = checkpoint.architecture
    params = ModelParams.zeros(arch.d, arch.h, arch.C, arch.k, arch.m)
    params.method = checkpoint.method
    expected = dict(params.named_parameters())
    if [t.name for t in checkpoint.tensors] != list(expected):
        raise DataParseError("checkpoint tensors do not match the declared architecture", path=str(path))
    for stored in checkpoint.tensors:
        target = expected[stored.name]
        if tuple(stored.shape) != target.shape or len(stored.data) != target.data.size:
            raise DataParseError(f"tensor {stored.name} has the wrong shape", path=str(path))
        target.data = np.array(stored.data, dtype=np.float64).reshape(target.shape)
    return params

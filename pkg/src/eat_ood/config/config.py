from typing import List, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

Geometry = Literal["gaussian-clusters", "grid-image"]
OODMode = Literal["uniform", "shifted-gaussian", "held-out-patterns"]
Method = Literal["eat", "oe", "msp"]


class LongTailSpec(BaseModel):
    """Synthetic long-tailed in-distribution dataset description."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_classes: int = Field(default=10, ge=1, description="Number of inlier classes C")
    imbalance_ratio: float = Field(default=100.0, ge=1.0, description="Imbalance ratio rho = n_0 / n_{C-1}")
    head_count: int = Field(default=500, ge=1, description="Samples in the most frequent class")
    geometry: Geometry = Field(default="grid-image", description="Sample geometry")
    grid_width: int = Field(default=8, ge=1, description="Grid width W (grid-image mode)")
    grid_height: int = Field(default=8, ge=1, description="Grid height H (grid-image mode)")
    input_dim: int = Field(default=64, ge=1, description="Input dimension d; W*H in grid-image mode")
    noise_std: float = Field(default=0.35, gt=0.0, description="Additive Gaussian noise level")
    separation: float = Field(default=3.0, gt=0.0, description="Scale of class means (gaussian-clusters mode)")
    seed: int = Field(default=0, ge=0, description="Generator seed")

    @model_validator(mode="after")
    def _check_grid(self) -> "LongTailSpec":
        if self.geometry == "grid-image" and self.input_dim != self.grid_width * self.grid_height:
            raise ValueError(
                f"grid-image mode needs input_dim == grid_width * grid_height "
                f"({self.input_dim} != {self.grid_width * self.grid_height})"
            )
        return self


class OODSpec(BaseModel):
    """Unlabeled OOD sample set description."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    count: int = Field(default=2000, ge=1, description="Number of OOD samples")
    mode: OODMode = Field(default="held-out-patterns", description="OOD generator")
    heldout_patterns: int = Field(default=8, ge=1, description="Patterns drawn in held-out-patterns mode")
    pattern_offset: int = Field(default=0, ge=0, description="First held-out pattern, counted after the inlier patterns")
    shift: float = Field(default=4.0, description="Mean offset in shifted-gaussian mode")


class DatasetConfig(BaseModel):
    """Training and test data for one experiment."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    longtail: LongTailSpec = Field(default_factory=LongTailSpec)
    test_per_class: int = Field(default=100, ge=1, description="Balanced inlier test samples per class")
    ood_train: OODSpec = Field(default_factory=OODSpec)
    ood_test: OODSpec = Field(default_factory=lambda: OODSpec(count=1000, pattern_offset=8))


class TrainConfig(BaseModel):
    """Two-stage training configuration."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    method: Method = Field(default="eat", description="eat, oe (outlier exposure) or msp (no outlier loss)")
    lam: float = Field(default=0.05, ge=0.0, description="Outlier loss trade-off lambda")
    k: int = Field(default=3, ge=0, description="Number of abstention classes")
    m: int = Field(default=3, ge=1, description="Number of classifier heads")
    hidden_dim: int = Field(default=32, ge=1, description="Feature dimension h")
    epochs_stage1: int = Field(default=30, ge=0)
    epochs_stage2: int = Field(default=1, ge=0)
    lr_stage1: float = Field(default=1e-2, gt=0.0)
    lr_stage2: float = Field(default=1e-3, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(default=64, ge=1)
    w_gen: float = Field(default=0.05, gt=0.0, le=1.0, description="Weight of CutMix-generated tail samples")
    augment_count_per_batch: int = Field(default=16, ge=0)
    cutmix_alpha: float = Field(default=1.0, gt=0.0, description="Beta concentration of the CutMix area fraction")
    use_cutmix: bool = Field(default=True, description="Add CutMix tail samples in stage 1")
    use_finetune: bool = Field(default=True, description="Run the stage-2 LA fine-tuning")
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_method(self) -> "TrainConfig":
        if self.method == "eat" and self.k < 1:
            raise ValueError("method 'eat' needs at least one abstention class (k >= 1)")
        return self

    def for_method(self, method: Method) -> "TrainConfig":
        """Configuration for ``method`` with the architecture unchanged.

        Baselines train without CutMix tail samples and without stage 2.
        """
        if method == "eat":
            return self.model_copy(update={"method": method})
        return self.model_copy(update={"method": method, "use_cutmix": False, "use_finetune": False})

    def with_seed(self, seed: int) -> "TrainConfig":
        return self.model_copy(update={"seed": seed})


class ExperimentConfig(BaseModel):
    """Top-level experiment configuration, parsed from a JSON file."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    output_dir: str = Field(default="runs/default", description="Directory for every produced file")
    tpr_percents: List[float] = Field(default_factory=lambda: [80.0, 90.0, 95.0, 98.0])
    fpr_percents: List[float] = Field(default_factory=lambda: [0.0, 0.1, 1.0, 10.0])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4, 5], description="Seeds for sweep")
    workers: int = Field(default=1, ge=1, description="Parallel sweep workers")
    histogram_bins: int = Field(default=20, ge=1)

    @model_validator(mode="after")
    def _check_points(self) -> "ExperimentConfig":
        for n in self.tpr_percents:
            if not 0.0 < n <= 100.0:
                raise ValueError(f"TPR operating point {n}% outside (0, 100]")
        for n in self.fpr_percents:
            if not 0.0 <= n < 100.0:
                raise ValueError(f"FPR operating point {n}% outside [0, 100)")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        return self

    @property
    def tpr_points(self) -> List[float]:
        return [n / 100.0 for n in self.tpr_percents]

    @property
    def fpr_points(self) -> List[float]:
        return [n / 100.0 for n in self.fpr_percents]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        longtail = self.dataset.longtail.model_copy(update={"seed": seed})
        dataset = self.dataset.model_copy(update={"longtail": longtail})
        return self.model_copy(update={"dataset": dataset, "train": self.train.with_seed(seed)})

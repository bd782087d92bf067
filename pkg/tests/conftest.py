import numpy as np
import pytest

from eat_ood.config.config import ExperimentConfig
from eat_ood.core.model import ModelParams, ScoreRecord


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_model():
    """d=4, h=5, C=3, k=2, one head."""
    return ModelParams.initialize(4, 5, 3, 2, 1, seed=3)


def make_records(inlier_scores, ood_scores, correct=None):
    """Inlier records get class 0 as truth; ``correct[i]`` False predicts class 1."""
    correct = [True] * len(inlier_scores) if correct is None else correct
    records = []
    for i, (score, ok) in enumerate(zip(inlier_scores, correct)):
        records.append(ScoreRecord(i, False, float(score), 0 if ok else 1, 0))
    for j, score in enumerate(ood_scores):
        records.append(ScoreRecord(len(inlier_scores) + j, True, float(score)))
    return records


@pytest.fixture
def tiny_config(tmp_path):
    """A fast experiment: 4 classes on a 4x4 grid, a few epochs."""
    return ExperimentConfig.model_validate({
        "dataset": {
            "longtail": {
                "num_classes": 4, "imbalance_ratio": 10, "head_count": 40,
                "grid_width": 4, "grid_height": 4, "input_dim": 16, "seed": 0,
            },
            "test_per_class": 10,
            "ood_train": {"count": 60, "heldout_patterns": 3},
            "ood_test": {"count": 30, "heldout_patterns": 3, "pattern_offset": 3},
        },
        "train": {
            "k": 2, "m": 2, "hidden_dim": 8, "epochs_stage1": 2, "epochs_stage2": 1,
            "batch_size": 16, "augment_count_per_batch": 4,
        },
        "output_dir": str(tmp_path / "run"),
        "seeds": [0],
    })

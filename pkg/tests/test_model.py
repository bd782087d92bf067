import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from eat_ood.core import numerics
from eat_ood.core.datasets import SampleSet
from eat_ood.core.model import (
    ModelParams,
    detector_score,
    forward,
    load_checkpoint,
    msp_score,
    ood_score,
    predict_inlier,
    save_checkpoint,
    score_samples,
)
from eat_ood.errors import ContractViolation, DataParseError, MissingFileError, NumericDomainError


def _with_head_biases(C, k, biases, hidden=3, d=2):
    """Zero weights everywhere; each head's logits equal its bias vector."""
    params = ModelParams.zeros(d, hidden, C, k, len(biases))
    for head, bias in zip(params.heads, biases):
        head.bias.data[...] = bias
    return params


def test_zero_model_gives_zero_logits():
    params = ModelParams.zeros(4, 5, 3, 2, 3)
    outputs = forward(params, np.ones(4))
    assert len(outputs) == 3
    for logits in outputs:
        assert_array_equal(logits.data, np.zeros(5))


def test_heads_are_isolated(rng):
    params = ModelParams.initialize(4, 6, 3, 3, 3, seed=1)
    x = rng.normal(size=4)
    before = [t.data.copy() for t in forward(params, x)]
    params.heads[1].weight.update_(rng.normal(size=params.heads[1].weight.shape))
    after = [t.data for t in forward(params, x)]
    assert_array_equal(after[0], before[0])
    assert_array_equal(after[2], before[2])
    assert not np.array_equal(after[1], before[1])


def test_heads_are_initialized_independently():
    params = ModelParams.initialize(4, 6, 3, 3, 3, seed=1)
    assert not np.array_equal(params.heads[0].weight.data, params.heads[1].weight.data)


def test_dimension_mismatch():
    params = ModelParams.zeros(4, 5, 3, 2, 1)
    with pytest.raises(ContractViolation):
        forward(params, np.ones(3))


def test_non_finite_inputs_are_rejected(small_model):
    for bad in (np.array([0.1, np.nan, 0.2, 0.3]), np.array([[0.0, 0.0, 0.0, 0.0], [np.inf, 0.0, 0.0, 0.0]])):
        with pytest.raises(NumericDomainError):
            forward(small_model, bad)
        with pytest.raises(NumericDomainError):
            ood_score(small_model, bad)
    samples = SampleSet(np.arange(1), np.array([[np.nan, 0.0, 0.0, 0.0]]), [0])
    with pytest.raises(NumericDomainError):
        score_samples(small_model, samples, is_ood=False)


def test_ood_score_examples():
    uniform = _with_head_biases(3, 3, [np.zeros(6)])
    assert math.isclose(ood_score(uniform, np.zeros(2)), 0.5, rel_tol=1e-14)

    confident = _with_head_biases(3, 3, [np.array([50.0, 0, 0, 0, 0, 0])] * 2)
    assert ood_score(confident, np.zeros(2)) < 1e-20

    # abstention masses 0.2 and 0.6 over C=2, k=2 with equal logits inside each group
    def head_for(mass):
        return np.array([0.0, 0.0, math.log(mass / (1 - mass)), math.log(mass / (1 - mass))])

    mixed = _with_head_biases(2, 2, [head_for(0.2), head_for(0.6)])
    assert math.isclose(ood_score(mixed, np.zeros(2)), 0.4, rel_tol=1e-12)


def test_score_is_bounded_and_complements_inlier_mass(rng):
    params = ModelParams.initialize(4, 6, 3, 2, 3, seed=2)
    x = rng.normal(size=(50, 4)) * 3
    g = ood_score(params, x)
    assert np.all((g >= 0) & (g <= 1))
    mean_probs = np.mean([numerics.softmax_probabilities(t.data) for t in forward(params, x)], axis=0)
    assert_allclose(g + mean_probs[:, :3].sum(axis=1), 1.0, atol=1e-12)


def test_predict_inlier_examples():
    single = _with_head_biases(3, 2, [np.log(np.array([0.5, 0.3, 0.2, 1e-3, 1e-3]))])
    assert predict_inlier(single, np.zeros(2)) == 0

    heavy = _with_head_biases(3, 2, [np.log(np.array([0.05, 0.04, 0.01, 0.5, 0.4]))])
    assert predict_inlier(heavy, np.zeros(2)) == 0

    # head 0 says class 0 at 0.55, head 1 says class 1 at 0.9
    disagree = _with_head_biases(2, 1, [
        np.log(np.array([0.55, 0.35, 0.10])),
        np.log(np.array([0.05, 0.90, 0.05])),
    ])
    assert predict_inlier(disagree, np.zeros(2)) == 1


def test_predict_inlier_ignores_logit_shift(rng):
    params = ModelParams.initialize(4, 6, 3, 2, 2, seed=3)
    x = rng.normal(size=(20, 4))
    before = predict_inlier(params, x)
    params.heads[0].bias.update_(np.full(5, 7.5))
    assert_array_equal(predict_inlier(params, x), before)


def test_msp_examples():
    assert math.isclose(msp_score(_with_head_biases(10, 0, [np.zeros(10)]), np.zeros(2)), 0.9, rel_tol=1e-12)
    assert msp_score(_with_head_biases(3, 0, [np.array([60.0, 0, 0])]), np.zeros(2)) < 1e-20
    probs = np.log(np.array([0.6, 0.3, 0.1]))
    assert math.isclose(msp_score(_with_head_biases(3, 0, [probs]), np.zeros(2)), 0.4, rel_tol=1e-12)


def test_baseline_without_abstention_classes():
    params = _with_head_biases(3, 0, [np.array([1.0, 2.0, 0.5])])
    assert ood_score(params, np.zeros(2)) == 0.0
    params.method = "msp"
    assert detector_score(params, np.zeros(2)) == msp_score(params, np.zeros(2))


def test_score_samples_records(rng):
    params = ModelParams.initialize(4, 6, 3, 2, 2, seed=4)
    inliers = SampleSet(np.arange(5), rng.normal(size=(5, 4)), [0, 1, 2, 0, 1])
    records = score_samples(params, inliers, is_ood=False)
    assert [r.sample_id for r in records] == [0, 1, 2, 3, 4]
    assert all(0 <= r.predicted_class < 3 for r in records)
    assert [r.true_class for r in records] == [0, 1, 2, 0, 1]
    outliers = score_samples(params, inliers, is_ood=True)
    assert all(r.predicted_class is None and r.true_class is None for r in outliers)


def test_flat_round_trip_and_digest(rng):
    params = ModelParams.initialize(4, 6, 3, 2, 2, seed=5)
    theta = params.flat()
    clone = params.copy()
    clone.load_flat_(theta + 1.0)
    assert_array_equal(clone.flat(), theta + 1.0)
    assert_array_equal(params.flat(), theta)
    assert clone.extractor_digest() != params.extractor_digest()
    with pytest.raises(ContractViolation):
        params.load_flat_(theta[:-1])


def test_checkpoint_round_trip(tmp_path):
    params = ModelParams.initialize(4, 6, 3, 2, 2, seed=6, method="oe")
    path = tmp_path / "checkpoint.json"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    assert_array_equal(loaded.flat(), params.flat())
    assert (loaded.C, loaded.k, loaded.m, loaded.method) == (3, 2, 2, "oe")
    save_checkpoint(loaded, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(MissingFileError):
        load_checkpoint(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text('{"format": "eat-ood-checkpoint", "architecture": {}}')
    with pytest.raises(DataParseError):
        load_checkpoint(broken)

import numpy as np
import pytest

from eat_ood.core import gradnoise, losses
from eat_ood.core.gradnoise import (
    analytic_noise_oe,
    analytic_noise_virtual,
    finite_difference_gradient,
    oe_loss_gradient,
    verify_gradient_noise,
    virtual_loss_gradient,
    write_noise_reports,
)
from eat_ood.core.model import ModelParams
from eat_ood.core.numerics import max_relative_error
from eat_ood.errors import ConfigurationError, ContractViolation


def _random_model(rng, k=2):
    return ModelParams.initialize(4, 5, 3, k, 1, seed=int(rng.integers(0, 2**31)))


def test_noise_matches_reverse_mode_gradients(rng):
    labels = set()
    for _ in range(100):
        params = _random_model(rng)
        x = rng.normal(size=4) * 2
        g, j = analytic_noise_virtual(params, x)
        labels.add(j)
        assert 3 <= j < 5
        assert max_relative_error(g.data, virtual_loss_gradient(params, x, j), 1e-10) <= 1e-8
        g_prime = analytic_noise_oe(params, x)
        assert max_relative_error(g_prime.data, oe_loss_gradient(params, x), 1e-10) <= 1e-8
    assert labels == {3, 4}


def test_noise_matches_finite_differences(rng):
    for _ in range(10):
        params = _random_model(rng)
        x = rng.normal(size=4)
        g, j = analytic_noise_virtual(params, x)
        fd = finite_difference_gradient(params, x, lambda logits: losses.ce_loss(logits, j))
        assert max_relative_error(g.data, fd, 1e-6) <= 1e-4
        fd_oe = finite_difference_gradient(params, x, lambda logits: losses.oe_uniform_loss(logits, 3))
        assert max_relative_error(analytic_noise_oe(params, x).data, fd_oe, 1e-6) <= 1e-4


def test_gradients_leave_parameters_untouched(rng):
    params = _random_model(rng)
    theta = params.flat()
    analytic_noise_oe(params, rng.normal(size=4))
    finite_difference_gradient(params, rng.normal(size=4), lambda logits: losses.ce_loss(logits, 0))
    np.testing.assert_array_equal(params.flat(), theta)
    assert all(p.grad is None for p in params.parameters())


def test_noise_needs_one_head_and_abstention_classes(rng):
    multi = ModelParams.initialize(4, 5, 3, 2, 2, seed=1)
    with pytest.raises(ContractViolation):
        analytic_noise_virtual(multi, np.zeros(4))
    baseline = _random_model(rng, k=0)
    with pytest.raises(ConfigurationError):
        analytic_noise_virtual(baseline, np.zeros(4))
    with pytest.raises(ContractViolation):
        analytic_noise_oe(_random_model(rng), np.zeros((2, 4)))


def test_verify_covers_every_head(rng, tmp_path):
    params = ModelParams.initialize(4, 5, 3, 2, 3, seed=7)
    outliers = rng.normal(size=(6, 4)) * 2
    reports, summary = verify_gradient_noise(params, outliers, with_oracle=True)
    assert len(reports) == 18
    assert {r.head for r in reports} == {0, 1, 2}
    assert summary.pairs == 3 * 15
    assert summary.max_rel_err_g <= 1e-8
    assert summary.max_rel_err_gprime <= 1e-8
    assert all(r.max_rel_err_fd_g <= 1e-4 and r.max_rel_err_fd_gprime <= 1e-4 for r in reports)
    assert 0.0 <= summary.g_direction_diversity <= 1.0
    assert 1 <= summary.distinct_virtual_labels <= 2
    assert summary.line().startswith("samples=6 heads=3 pairs=45")

    path = tmp_path / "gradcheck.csv"
    write_noise_reports(reports, str(path))
    lines = path.read_text().splitlines()
    assert lines[0].startswith("sample,head,virtual_label")
    assert len(lines) == 19


def test_verify_without_oracle_leaves_columns_blank(rng, tmp_path):
    reports, _ = verify_gradient_noise(_random_model(rng), rng.normal(size=(2, 4)))
    assert all(r.max_rel_err_fd_g is None for r in reports)
    path = tmp_path / "gradcheck.csv"
    write_noise_reports(reports, str(path))
    assert path.read_text().splitlines()[1].split(",")[5] == ""


def test_verify_rejects_empty_batch():
    with pytest.raises(ContractViolation):
        verify_gradient_noise(ModelParams.initialize(4, 5, 3, 2, 1, seed=0), np.zeros((0, 4)))


def test_direction_diversity_counts_pairs():
    a = np.array([1.0, 0.0])
    pairs, differing = gradnoise._direction_diversity([a, a * 2, np.array([0.0, 1.0])])
    assert (pairs, differing) == (3, 2)


def test_identical_rows_share_one_noise_direction(small_model, rng):
    x = rng.normal(size=4)
    g, _ = analytic_noise_virtual(small_model, x)
    assert gradnoise._direction_diversity([g.data, g.data, g.data]) == (3, 0)
    _, summary = verify_gradient_noise(small_model, np.tile(x, (5, 1)))
    assert summary.pairs == 10
    assert summary.g_direction_diversity == 0.0
    assert summary.gprime_direction_diversity == 0.0
    assert summary.distinct_virtual_labels == 1


def _routing_model():
    """C=1, k=2; input e_0 lands on abstention logit 1 and e_1 on logit 2."""
    params = ModelParams.zeros(2, 2, 1, 2, 1)
    for layer in params.extractor:
        layer.weight.data[...] = np.eye(2)
    params.heads[0].weight.data[...] = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    return params


def test_different_virtual_labels_give_different_noise():
    params = _routing_model()
    g_first, j_first = analytic_noise_virtual(params, np.array([1.0, 0.0]))
    g_second, j_second = analytic_noise_virtual(params, np.array([0.0, 1.0]))
    assert (j_first, j_second) == (1, 2)
    assert gradnoise._direction_diversity([g_first.data, g_second.data]) == (1, 1)
    _, summary = verify_gradient_noise(params, np.eye(2))
    assert summary.distinct_virtual_labels == 2
    assert summary.g_direction_diversity == 1.0


def test_confident_virtual_label_silences_the_noise():
    norms, oe_norms = [], []
    for boost in (0.0, 5.0, 10.0, 20.0, 40.0):
        params = ModelParams.zeros(2, 3, 2, 2, 1)
        params.heads[0].bias.data[2] = boost
        g, j = analytic_noise_virtual(params, np.zeros(2))
        assert j == 2
        norms.append(np.linalg.norm(g.data))
        oe_norms.append(np.linalg.norm(analytic_noise_oe(params, np.zeros(2)).data))
    assert all(later < earlier for earlier, later in zip(norms[:-1], norms[1:]))
    assert norms[-1] <= 1e-15
    # the uniform OE target keeps pulling towards the inlier classes
    assert oe_norms[-1] > 1.0


def test_single_class_without_abstention_has_no_oe_noise(rng):
    params = ModelParams.initialize(4, 5, 1, 0, 1, seed=11)
    for _ in range(5):
        x = rng.normal(size=4)
        assert not analytic_noise_oe(params, x).data.any()
        assert not oe_loss_gradient(params, x).any()
    with pytest.raises(ConfigurationError):
        analytic_noise_virtual(params, np.zeros(4))


@pytest.mark.slow
def test_noise_matches_finite_differences_over_many_models(rng):
    for _ in range(100):
        params = _random_model(rng)
        x = rng.normal(size=4)
        g, j = analytic_noise_virtual(params, x)
        fd = finite_difference_gradient(params, x, lambda logits: losses.ce_loss(logits, j))
        assert max_relative_error(g.data, fd, 1e-6) <= 1e-4
        fd_oe = finite_difference_gradient(params, x, lambda logits: losses.oe_uniform_loss(logits, 3))
        assert max_relative_error(analytic_noise_oe(params, x).data, fd_oe, 1e-6) <= 1e-4

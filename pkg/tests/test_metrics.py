import math

import numpy as np
import pytest
from sklearn.metrics import average_precision_score, roc_auc_score

from conftest import make_records
from eat_ood.core import metrics
from eat_ood.core.model import ScoreRecord
from eat_ood.errors import ContractViolation, DataParseError, UndefinedMetricError

# (ACC95 %, 1 - FPR95 %, printed count) for ten thousand inlier test samples
N_CORRECT_TABLE = [
    (71.43, 31.72, 2266), (73.11, 32.57, 2381), (73.76, 32.47, 2395),
    (64.27, 41.96, 2697), (64.50, 46.55, 3002), (61.67, 52.22, 3220),
    (82.67, 19.36, 1601), (82.30, 20.45, 1683), (82.61, 22.03, 1820),
    (76.22, 23.34, 1779), (77.56, 23.89, 1853), (77.07, 25.11, 1935),
    (65.64, 36.02, 2364), (68.05, 36.69, 2497), (62.07, 44.98, 2791),
    (67.04, 34.28, 2298), (69.04, 35.19, 2430), (66.15, 39.15, 2590),
    (71.21, 31.11, 2215), (72.43, 32.56, 2358), (70.55, 36.00, 2540),
]
# printed from two-decimal percentages that round the other way
ROUNDED_IN_PRINT = {(82.67, 19.36): 1600, (62.07, 44.98): 2792}


def test_auroc_examples():
    assert metrics.auroc(make_records([0.1, 0.2], [0.8, 0.9])) == 1.0
    assert metrics.auroc(make_records([0.4] * 3, [0.4] * 2)) == 0.5
    assert metrics.auroc(make_records([0.1, 0.6], [0.5, 0.9])) == 0.75
    assert metrics.auroc(make_records([0.8, 0.9], [0.1, 0.2])) == 0.0


def test_aupr_examples():
    assert metrics.aupr(make_records([0.1, 0.2], [0.8, 0.9])) == 1.0
    assert math.isclose(metrics.aupr(make_records([0.3] * 9, [0.3])), 0.1, rel_tol=1e-12)
    assert math.isclose(metrics.aupr(make_records([0.6], [0.9, 0.5])), 5 / 6, rel_tol=1e-12)


def test_fpr_at_tpr_examples():
    ood = np.linspace(0.5, 0.99, 20)
    assert metrics.fpr_at_tpr(make_records([0.1, 0.2, 0.3, 0.55], ood), 0.95) == 0.25
    assert metrics.fpr_at_tpr(make_records([0.1, 0.2], [0.8, 0.9]), 0.95) == 0.0
    # a tie at the threshold counts as flagged
    assert metrics.fpr_at_tpr(make_records([0.5, 0.1], [0.5, 0.9]), 1.0) == 0.5
    assert metrics.tpr_threshold(make_records([0.1], ood), 0.95) == ood[1]


def test_acc_at_tpr_example():
    records = make_records([0.1, 0.2, 0.3, 0.4, 0.9], [0.5, 0.6], correct=[True, True, False, True, True])
    assert metrics.acc_at_tpr(records, 0.95) == 0.75


def test_acc_at_fpr_examples():
    records = make_records(
        [0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [0.9], correct=[True, False, True, True, True, False]
    )
    assert metrics.fpr_threshold(records, 0.2) == 0.6
    assert metrics.acc_at_fpr(records, 0.2) == 0.8
    assert metrics.fpr_threshold(records, 0.0) == math.inf
    assert math.isclose(metrics.acc_at_fpr(records, 0.0), 4 / 6, rel_tol=1e-12)


def test_acc_at_fpr_keeps_tied_scores_together():
    records = make_records([0.5, 0.5, 0.1, 0.2], [0.9], correct=[False, False, True, True])
    assert metrics.fpr_threshold(records, 0.25) == math.inf
    assert metrics.acc_at_fpr(records, 0.25) == 0.5
    assert metrics.fpr_threshold(records, 0.5) == 0.5
    assert metrics.acc_at_fpr(records, 0.5) == 1.0


def test_undefined_measures():
    with pytest.raises(UndefinedMetricError):
        metrics.auroc(make_records([0.1, 0.2], []))
    with pytest.raises(UndefinedMetricError):
        metrics.aupr(make_records([], [0.5]))
    with pytest.raises(UndefinedMetricError):
        metrics.acc_at_tpr(make_records([0.9], [0.1]), 0.95)
    with pytest.raises(ContractViolation):
        metrics.fpr_at_tpr(make_records([0.1], [0.9]), 0.0)
    with pytest.raises(ContractViolation):
        metrics.acc_at_fpr(make_records([0.1], [0.9]), 1.0)
    with pytest.raises(ContractViolation):
        metrics.acc_at_tpr([ScoreRecord(0, False, 0.1), ScoreRecord(1, True, 0.9)], 0.9)


def _random_records(rng):
    n_in, n_out = int(rng.integers(1, 30)), int(rng.integers(1, 30))
    # two-decimal scores give plenty of ties
    inlier = np.round(rng.random(n_in), 2)
    ood = np.round(rng.beta(2, 1, n_out), 2)
    return make_records(inlier, ood, correct=(rng.random(n_in) < 0.7).tolist())


def _both(fast, oracle, records, n):
    try:
        value = fast(records, n)
    except UndefinedMetricError:
        with pytest.raises(UndefinedMetricError):
            oracle(records, n)
        return
    assert abs(value - oracle(records, n)) <= 1e-12


def test_sweeps_agree_with_brute_force(rng):
    for _ in range(500):
        records = _random_records(rng)
        assert abs(metrics.auroc(records) - metrics.oracle_auroc(records)) <= 1e-12
        assert abs(metrics.aupr(records) - metrics.oracle_aupr(records)) <= 1e-12
        for n in (0.8, 0.9, 0.95, 0.98, 1.0):
            _both(metrics.fpr_at_tpr, metrics.oracle_fpr_at_tpr, records, n)
            _both(metrics.acc_at_tpr, metrics.oracle_acc_at_tpr, records, n)
        for n in (0.0, 0.001, 0.01, 0.1, 0.5):
            _both(metrics.acc_at_fpr, metrics.oracle_acc_at_fpr, records, n)


def test_agrees_with_scikit_learn(rng):
    for _ in range(100):
        records = _random_records(rng)
        y = [int(r.is_ood) for r in records]
        s = [r.ood_score for r in records]
        assert abs(metrics.auroc(records) - roc_auc_score(y, s)) <= 1e-12
        assert abs(metrics.aupr(records) - average_precision_score(y, s)) <= 1e-12


def test_invariant_under_monotone_transform(rng):
    for _ in range(50):
        records = _random_records(rng)
        cubed = [ScoreRecord(r.sample_id, r.is_ood, r.ood_score ** 3, r.predicted_class, r.true_class)
                 for r in records]
        assert metrics.auroc(cubed) == metrics.auroc(records)
        assert metrics.aupr(cubed) == metrics.aupr(records)
        assert metrics.fpr_at_tpr(cubed, 0.95) == metrics.fpr_at_tpr(records, 0.95)


def test_fpr_at_tpr_grows_with_the_tpr_target(rng):
    targets = (0.5, 0.8, 0.9, 0.95, 0.98, 1.0)
    for _ in range(200):
        records = _random_records(rng)
        values = [metrics.fpr_at_tpr(records, n) for n in targets]
        assert all(later >= earlier for earlier, later in zip(values[:-1], values[1:]))


def test_indistinguishable_scores_flag_inliers_at_the_tpr_rate(rng):
    scores = rng.random(4000)
    records = make_records(scores[:2000], scores[2000:])
    assert abs(metrics.fpr_at_tpr(records, 0.95) - 0.95) <= 0.03
    assert abs(metrics.fpr_at_tpr(records, 0.8) - 0.8) <= 0.03
    assert abs(metrics.auroc(records) - 0.5) <= 0.03


def test_n_correct_reproduces_table():
    for acc, kept, printed in N_CORRECT_TABLE:
        value = metrics.n_correct(10000, 1.0 - kept / 100.0, acc / 100.0)
        assert value == ROUNDED_IN_PRINT.get((acc, kept), printed)
        assert abs(value - printed) <= 1


def test_n_correct_examples():
    assert metrics.n_correct(10000, 0.5, 0.5) == 2500
    assert metrics.n_correct(10000, 0.0, 1.0) == 10000
    assert metrics.n_correct(10000, 1.0, 0.9) == 0
    with pytest.raises(ContractViolation):
        metrics.n_correct(100, 1.5, 0.5)


def test_accuracy_by_class_group():
    records = [
        ScoreRecord(0, False, 0.1, 0, 0),
        ScoreRecord(1, False, 0.1, 1, 0),
        ScoreRecord(2, False, 0.1, 2, 2),
        ScoreRecord(3, True, 0.9),
    ]
    assert metrics.accuracy(records) == 2 / 3
    assert metrics.accuracy(records, [2]) == 1.0
    assert metrics.accuracy(records, [5]) is None


def test_evaluate_report(tmp_path):
    records = make_records([0.1, 0.2, 0.3, 0.95], [0.5, 0.6, 0.7, 0.8, 0.9], correct=[True, False, True, True])
    report = metrics.evaluate(records, (0.8, 0.95), (0.0, 0.001), tail=[0])
    items = report.flat_items()
    for key in ("auroc", "aupr", "fpr_at_tpr_95", "acc_at_tpr_80", "acc_at_fpr_0.1", "n_correct", "tail_accuracy"):
        assert key in items
    assert report.fpr95 == 0.25
    assert math.isclose(report.acc95, 2 / 3, rel_tol=1e-12)
    assert report.n_correct == 2
    assert (report.n_in, report.n_out) == (4, 5)
    assert report.head_accuracy is None
    assert report.tail_accuracy == 0.75

    text, js = tmp_path / "metrics.txt", tmp_path / "metrics.json"
    metrics.write_report(report, str(text), str(js))
    assert "fpr95 = 0.25" in text.read_text().splitlines()
    assert metrics.MetricsReport.model_validate_json(js.read_text()) == report


def test_evaluate_marks_undefined_accuracy():
    report = metrics.evaluate(make_records([0.9, 0.95], [0.1, 0.2]))
    assert report.acc95 is None
    assert report.n_correct == 0
    assert "acc95 = undefined" in report.to_text()


def test_score_file_round_trip(tmp_path):
    records = make_records([0.25, 0.0], [1.0], correct=[True, False])
    path = tmp_path / "scores.csv"
    metrics.write_scores_csv(records, str(path))
    assert path.read_text().splitlines()[0] == "id,is_ood,score,pred,label"
    assert path.read_text().splitlines()[3] == "2,1,1,,"
    assert metrics.read_scores_csv(str(path)) == records


@pytest.mark.parametrize(
    "row,line", [("0,2,0.5,0,0", 2), ("0,0,1.5,0,0", 2), ("0,0,abc,0,0", 2), ("0,0,nan,0,0", 2), ("0,1,inf,,", 2)]
)
def test_score_file_errors(tmp_path, row, line):
    path = tmp_path / "scores.csv"
    path.write_text("id,is_ood,score,pred,label\n" + row + "\n")
    with pytest.raises(DataParseError) as info:
        metrics.read_scores_csv(str(path))
    assert info.value.line == line


def test_score_histogram():
    rows = metrics.score_histogram(make_records([0.0, 0.05, 0.5], [0.99, 1.0]), 4)
    assert [r[2] for r in rows] == [2, 0, 1, 0]
    assert [r[3] for r in rows] == [0, 0, 0, 2]
    assert rows[-1][1] == 1.0

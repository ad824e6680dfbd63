import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semfuse.evaluation import (
    ConfusionMatrix,
    EvalReport,
    aggregate_folds,
    confusion_matrix,
    metrics,
    predict_labels,
    report_json,
    write_report,
)

# summed 5-fold test-set confusion matrices (rows actual, columns predicted)
GAB_BINARY = [[1470, 162], [167, 1710]]
GAB_MULTI = [[441, 49, 33, 213], [14, 82, 3, 19], [9, 1, 102, 32], [141, 40, 76, 622]]
TWITTER_BINARY = [[1106, 568], [317, 1111]]
TWITTER_MULTI = [[470, 35, 11, 123], [16, 149, 9, 9], [15, 4, 79, 26], [160, 12, 37, 273]]

PUBLISHED = [
    # matrix, accuracy, macro-F1, F1 tolerance
    (GAB_BINARY, 0.906, 0.906, 0.001),
    (TWITTER_BINARY, 0.715, 0.714, 0.001),
    (GAB_MULTI, 0.665, 0.625, 0.001),
    # the published F1 is a mean over folds; pooling the folds moves it slightly
    (TWITTER_MULTI, 0.680, 0.675, 0.002),
]


def metrics_by_loops(m):
    m = np.asarray(m)
    c = len(m)
    correct = sum(m[i][i] for i in range(c))
    total = sum(m[i][j] for i in range(c) for j in range(c))
    f1s = []
    for k in range(c):
        tp = m[k][k]
        fp = sum(m[i][k] for i in range(c) if i != k)
        fn = sum(m[k][j] for j in range(c) if j != k)
        f1s.append(0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return correct / total, sum(f1s) / c


@pytest.mark.parametrize("matrix,acc,f1,f1_tol", PUBLISHED)
def test_published_tables(matrix, acc, f1, f1_tol):
    a, f = metrics(ConfusionMatrix(np.array(matrix)))
    assert abs(a - acc) <= 0.001
    assert abs(f - f1) <= f1_tol


def test_table_row_totals_match_corpus_counts():
    assert np.sum(GAB_BINARY) == 3509 and np.sum(GAB_BINARY[1]) == 1877
    assert np.sum(TWITTER_BINARY) == 3102 and np.sum(TWITTER_BINARY[1]) == 1428
    assert np.sum(GAB_MULTI) == 1877 and np.sum(TWITTER_MULTI) == 1428


@pytest.mark.parametrize("matrix", [m for m, *_ in PUBLISHED])
def test_loop_oracle_on_tables(matrix):
    np.testing.assert_allclose(metrics(ConfusionMatrix(np.array(matrix))), metrics_by_loops(matrix), atol=1e-12)


def test_degenerate_single_class():
    # class 1 never appears or is predicted: its F1 counts as zero
    acc, f1 = metrics(ConfusionMatrix(np.array([[1, 0], [0, 0]])))
    assert acc == 1.0 and f1 == 0.5


def test_perfect_and_empty():
    assert metrics(ConfusionMatrix(np.eye(4, dtype=int) * 3)) == (1.0, 1.0)
    with pytest.raises(ValueError):
        metrics(ConfusionMatrix(np.zeros((2, 2), dtype=int)))


matrices = st.integers(2, 5).flatmap(
    lambda c: st.lists(st.lists(st.integers(0, 50), min_size=c, max_size=c), min_size=c, max_size=c)
).filter(lambda m: np.sum(m) > 0)


@settings(max_examples=200)
@given(matrices)
def test_matches_loop_oracle(m):
    np.testing.assert_allclose(metrics(ConfusionMatrix(np.array(m))), metrics_by_loops(m), atol=1e-12)


@settings(max_examples=100)
@given(matrices, st.randoms())
def test_class_relabeling_invariance(m, rnd):
    m = np.array(m)
    perm = list(range(len(m)))
    rnd.shuffle(perm)
    permuted = m[np.ix_(perm, perm)]
    np.testing.assert_allclose(metrics(ConfusionMatrix(m)), metrics(ConfusionMatrix(permuted)), atol=1e-12)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_confusion_counts(pairs):
    preds, labels = [p for p, _ in pairs], [y for _, y in pairs]
    cm = confusion_matrix(preds, labels, 4)
    assert cm.total == len(pairs)
    for i in range(4):
        for j in range(4):
            assert cm.counts[i, j] == sum(1 for p, y in pairs if y == i and p == j)


def test_confusion_validation():
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(ValueError):
        confusion_matrix([2], [0], 2)
    with pytest.raises(ValueError):
        ConfusionMatrix(np.array([[1, -1], [0, 0]]))
    with pytest.raises(ValueError):
        ConfusionMatrix(np.zeros((2, 3)))


def test_predict_labels_ties_go_low():
    lp = np.log([[0.5, 0.5], [0.2, 0.8], [0.9, 0.1]])
    assert predict_labels(lp).tolist() == [0, 1, 0]


def report_with_accuracy(correct, total=10):
    return EvalReport.from_predictions([0] * correct + [1] * (total - correct), [0] * total, 2)


def test_aggregate_by_hand():
    agg = aggregate_folds([report_with_accuracy(7), report_with_accuracy(8)])
    assert agg.accuracy_mean == pytest.approx(0.75)
    assert agg.accuracy_std == pytest.approx(0.05)
    assert agg.confusion_sum.tolist() == [[15, 5], [0, 0]]


def test_aggregate_validation():
    with pytest.raises(ValueError):
        aggregate_folds([])
    with pytest.raises(ValueError):
        aggregate_folds([report_with_accuracy(5), EvalReport.from_predictions([0], [3], 4)])


def test_report_roundtrip(tmp_path):
    reports = [EvalReport.from_confusion(ConfusionMatrix(np.array(GAB_BINARY))), report_with_accuracy(6)]
    obj = write_report(tmp_path / "r.json", "binary", "mfas", reports)
    on_disk = json.loads((tmp_path / "r.json").read_text())
    assert on_disk == obj == report_json("binary", "mfas", reports)
    assert EvalReport.from_json(reports[0].to_json()) == reports[0]
    assert on_disk["aggregate"]["confusion_sum"] == [[1476, 166], [167, 1710]]

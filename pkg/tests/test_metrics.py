import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from paresis.metrics import (ConfusionMatrix, balanced_accuracy_from_rates, confusion, format_report,
                             render_confusion, report, report_to_csv)
from paresis.windowing import ACTIONS


def test_confusion_examples():
    np.testing.assert_array_equal(confusion([0, 1, 2], [0, 1, 2], 3).counts, np.eye(3))
    np.testing.assert_array_equal(confusion([0, 1, 1], [1, 0, 0], 2).counts, [[0, 1], [2, 0]])
    cm = confusion([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 0, 2], 3)
    np.testing.assert_array_equal(cm.counts, [[1, 1, 0], [0, 1, 0], [1, 0, 2]])
    assert cm.total == 6
    with pytest.raises(ValueError):
        confusion([0, 3], [0, 1], 3)
    with pytest.raises(ValueError):
        confusion([0, 1], [0], 2)


def test_perfect_binary():
    rep = report(ConfusionMatrix(np.array([[50, 0], [0, 50]]), ("L", "R")))
    for avg in rep.averages.values():
        assert all(v == 1.0 for v in avg.values())
    assert not rep.warning


def test_hand_binary_case():
    # class 0 is the positive class: TP=40, FN=10, FP=20, TN=30
    rep = report(ConfusionMatrix(np.array([[40, 10], [20, 30]]), ("pos", "neg")))
    assert rep.accuracy == pytest.approx(0.7, abs=1e-4)
    assert rep.precision[0] == pytest.approx(0.6667, abs=1e-4)
    assert rep.recall[0] == pytest.approx(0.8, abs=1e-4)
    assert rep.f1[0] == pytest.approx(0.7273, abs=1e-4)
    assert (rep.tp[0], rep.fn[0], rep.fp[0], rep.tn[0]) == (40, 10, 20, 30)
    assert rep.balanced_accuracy == (0.8 + 0.6) / 2


def test_balanced_accuracy_worked_example():
    assert balanced_accuracy_from_rates([97.38, 98.58]) == pytest.approx(97.98, abs=0.01)
    cm = ConfusionMatrix(np.array([[9738, 262], [142, 9858]]), ("Left", "Right"))
    assert 100 * report(cm).balanced_accuracy == pytest.approx(97.98, abs=0.01)


def test_zero_support_class():
    cm = ConfusionMatrix(np.array([[5, 1, 0], [2, 4, 0], [0, 0, 0]]), ("a", "b", "c"))
    rep = report(cm)
    assert rep.zero_support == ["c"] and rep.warning
    assert rep.recall[2] == 0 and rep.precision[2] == 0
    assert rep.averages["macro"]["recall"] == pytest.approx((5 / 6 + 4 / 6 + 0) / 3)
    ex = report(cm, exclude_empty=True)
    assert ex.averages["macro"]["recall"] == pytest.approx((5 / 6 + 4 / 6) / 2)
    with pytest.raises(ValueError):
        report(ConfusionMatrix(np.zeros((2, 2)), ("a", "b")))


@st.composite
def label_pairs(draw):
    n = draw(st.integers(2, 6))
    size = draw(st.integers(1, 60))
    labels = st.lists(st.integers(0, n - 1), min_size=size, max_size=size)
    return n, np.array(draw(labels)), np.array(draw(labels))


@settings(max_examples=150, deadline=None)
@given(label_pairs())
def test_report_invariants(case):
    n, t, p = case
    rep = report(confusion(t, p, n))
    acc = np.trace(confusion(t, p, n).counts) / len(t)
    micro = rep.averages["micro"]
    assert micro["precision"] == micro["recall"] == micro["accuracy"] == acc
    pr = rep.precision + rep.recall
    f1_pr = np.divide(2 * rep.precision * rep.recall, pr, out=np.zeros(n), where=pr > 0)
    np.testing.assert_allclose(rep.f1, f1_pr, atol=1e-12)
    for avg in rep.averages.values():
        assert all(0 <= v <= 1 for v in avg.values())
    row = confusion(t, p, n).row_normalized()
    sums = row.sum(axis=1)
    assert np.all((np.abs(sums - 100) < 0.01) | (sums == 0))


@settings(max_examples=80, deadline=None)
@given(label_pairs(), st.randoms(use_true_random=False))
def test_permutation_equivariance(case, rnd):
    n, t, p = case
    perm = np.array(rnd.sample(range(n), n))
    a, b = report(confusion(t, p, n)), report(confusion(perm[t], perm[p], n))
    np.testing.assert_allclose(b.recall[perm], a.recall, atol=1e-15)
    np.testing.assert_allclose(b.f1[perm], a.f1, atol=1e-15)
    for avg in ("micro", "macro"):
        for k, v in a.averages[avg].items():
            assert b.averages[avg][k] == pytest.approx(v, abs=1e-12)


def test_binary_balanced_accuracy_exact():
    cm = ConfusionMatrix(np.array([[7, 3], [1, 9]]), ("a", "b"))
    rep = report(cm)
    assert rep.balanced_accuracy == (rep.recall[0] + rep.recall[1]) / 2


def test_render_identity_row_normalized():
    cm = ConfusionMatrix(np.eye(3, dtype=int) * 4, ("a", "b", "c"))
    rows = list(csv.reader(io.StringIO(render_confusion(cm, "row"))))
    assert rows[0] == ["truth\\pred", "a", "b", "c"]
    assert [r[1:] for r in rows[1:]] == [["100.00", "0.00", "0.00"], ["0.00", "100.00", "0.00"],
                                         ["0.00", "0.00", "100.00"]]


def test_render_drinking_row():
    counts = np.zeros((9, 9), dtype=int)
    d, f = ACTIONS.index("drinking"), ACTIONS.index("feeding")
    counts[d, d], counts[d, f], counts[d, 0] = 4979, 2067, 2954
    np.fill_diagonal(counts[:d], 1)
    counts[d + 1:, d + 1:] += np.eye(9 - d - 1, dtype=int)
    cm = ConfusionMatrix(counts, ACTIONS)
    rows = {r[0]: r[1:] for r in csv.reader(io.StringIO(render_confusion(cm, "row")))}
    assert rows["drinking"][d] == "49.79" and rows["drinking"][f] == "20.67"
    text = render_confusion(cm, "row", fmt="text")
    assert "49.79" in text and "drinking" in text


def test_render_counts_and_bad_mode():
    cm = confusion([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 0, 2], 3, ["x", "y", "z"])
    rows = list(csv.reader(io.StringIO(render_confusion(cm))))
    assert rows[3] == ["z", "1", "0", "2"]
    with pytest.raises(ValueError):
        render_confusion(cm, "col")


def test_report_csv_columns():
    rep = report(confusion([0, 1, 1, 0], [0, 1, 0, 0], 2, ["L", "R"]))
    summary, per_class = report_to_csv(rep)
    s = list(csv.DictReader(io.StringIO(summary)))
    assert [r["metric"] for r in s] == ["accuracy", "precision", "recall", "f1", "balanced_accuracy"]
    assert float(s[0]["micro"]) == 0.75
    pc = list(csv.DictReader(io.StringIO(per_class)))
    assert pc[1]["class"] == "R" and pc[1]["tp"] == "1" and pc[1]["fn"] == "1"
    assert "balanced accuracy" in format_report(rep)

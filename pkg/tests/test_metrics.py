import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cgnn.metrics import (
    ConfusionCounts,
    UndefinedMetricWarning,
    accuracy,
    average_distance,
    balanced_accuracy,
    confusion_counts,
)


def brute_counts(pred, truth):
    tp = tn = fp = fn = 0
    for p, y in zip(pred, truth):
        if p and y:
            tp += 1
        elif not p and not y:
            tn += 1
        elif p:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn


def test_worked_values():
    assert accuracy(ConfusionCounts(tp=8, tn=0, fp=1, fn=1)) == 0.8
    assert balanced_accuracy(ConfusionCounts(tp=50, fn=0, tn=0, fp=50)) == 0.5
    assert balanced_accuracy(ConfusionCounts(tp=30, fn=20, tn=40, fp=10)) == pytest.approx(0.7, abs=1e-15)
    assert balanced_accuracy(ConfusionCounts(tp=5, tn=5)) == 1.0
    assert accuracy(ConfusionCounts(tp=3, tn=4)) == 1.0
    assert average_distance([1, 5], [2, 3]) == 1.5
    assert average_distance([2, 2, 4], [2, 2, 4]) == 0.0


def test_counts_match_item_by_item():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        pred, truth = rng.integers(0, 2, n), rng.integers(0, 2, n)
        c = confusion_counts(pred, truth)
        tp, tn, fp, fn = brute_counts(pred, truth)
        assert (c.tp, c.tn, c.fp, c.fn) == (tp, tn, fp, fn)
        assert accuracy(c) == (tp + tn) / n


def test_constant_predictor_on_balanced_labels():
    labels = np.array([0, 1] * 50)
    assert balanced_accuracy(confusion_counts(np.ones(100), labels)) == 0.5
    assert balanced_accuracy(confusion_counts(np.zeros(100), labels)) == 0.5


def test_missing_class_returns_defined_term_and_warns():
    with pytest.warns(UndefinedMetricWarning):
        assert balanced_accuracy(ConfusionCounts(tp=3, fn=1)) == 0.75
    with pytest.warns(UndefinedMetricWarning):
        assert balanced_accuracy(ConfusionCounts(tn=1, fp=1)) == 0.5
    with pytest.raises(ValueError):
        balanced_accuracy(ConfusionCounts())


def test_errors():
    with pytest.raises(ValueError):
        accuracy(ConfusionCounts())
    with pytest.raises(ValueError):
        average_distance([1, 2], [1])


def test_average_distance_matches_loop():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        p, y = rng.integers(1, 6, n), rng.integers(1, 6, n)
        expected = sum(abs(int(a) - int(b)) for a, b in zip(p, y)) / n
        assert average_distance(p, y) == expected


@given(st.integers(1, 50), st.integers(0, 50))
def test_balanced_classes_symmetric_errors_coincide(n, k):
    k = min(k, n)
    c = ConfusionCounts(tp=n - k, fn=k, tn=n - k, fp=k)
    assert balanced_accuracy(c) == pytest.approx(accuracy(c), abs=1e-15)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60), st.randoms())
def test_bounds_and_permutation_invariance(pairs, rnd):
    pred, truth = map(list, zip(*pairs))
    c = confusion_counts(pred, truth)
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    c2 = confusion_counts(*map(list, zip(*shuffled)))
    assert c == c2
    assert 0 <= accuracy(c) <= 1
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert 0 <= balanced_accuracy(c) <= 1


@given(st.lists(st.tuples(st.integers(1, 5), st.integers(1, 5)), min_size=1, max_size=60))
def test_average_distance_bounds(pairs):
    p, y = zip(*pairs)
    assert 0 <= average_distance(p, y) <= 4

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mmnet.errors import ShapeError, ValidationError
from mmnet.metrics import (
    ConfusionMatrix,
    accuracy,
    confusion_from_labels,
    f_beta,
    macro_average,
    metric_report,
    micro_average,
    one_vs_rest,
    per_class_metrics,
    scores_from_counts,
)

HAND = ConfusionMatrix([[2, 0, 0], [1, 1, 0], [0, 0, 1]])

count_matrices = st.integers(1, 6).flatmap(lambda c: hnp.arrays(np.int64, (c, c), elements=st.integers(0, 30)))


def test_confusion_examples():
    assert confusion_from_labels([0, 1, 2], [0, 1, 2], 3).counts.tolist() == np.eye(3, dtype=int).tolist()
    assert confusion_from_labels([], [], 3).counts.tolist() == [[0] * 3] * 3
    cm = confusion_from_labels([0, 0, 1, 1, 2], [0, 1, 1, 0, 2], 3)
    assert cm.counts.tolist() == [[1, 1, 0], [1, 1, 0], [0, 0, 1]]


def test_confusion_errors():
    with pytest.raises(ValidationError):
        confusion_from_labels([0, 3], [0, 1], 3)
    with pytest.raises(ShapeError):
        confusion_from_labels([0, 1], [0], 3)
    with pytest.raises(ValidationError):
        ConfusionMatrix([[1, -1], [0, 0]])


def test_binary_hand_arithmetic():
    s = scores_from_counts(2, 1, 1, 6)
    assert s.precision == pytest.approx(2 / 3)
    assert s.recall == pytest.approx(2 / 3)
    assert s.specificity == pytest.approx(6 / 7)
    assert s.f_score == pytest.approx(2 / 3)


def test_binary_via_confusion():
    cm = ConfusionMatrix([[2, 1], [1, 6]])
    assert one_vs_rest(cm, 0) == (2, 1, 1, 6)
    assert per_class_metrics(cm, 0) == scores_from_counts(2, 1, 1, 6)


def test_f2_substitution():
    assert f_beta(0.5, 1.0, 2.0) == pytest.approx(5 * 0.5 / (4 * 0.5 + 1))
    assert f_beta(0.5, 1.0, 2.0) == pytest.approx(0.8333, abs=5e-5)


def test_absent_class_scores_zero():
    cm = ConfusionMatrix([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
    s = per_class_metrics(cm, 2)
    assert (s.precision, s.recall, s.f_score) == (0.0, 0.0, 0.0)
    assert s.specificity == 1.0


def test_all_zero_is_zero_everywhere():
    s = scores_from_counts(0, 0, 0, 0)
    assert (s.precision, s.recall, s.specificity, s.f_score) == (0.0, 0.0, 0.0, 0.0)


def test_micro_hand_example():
    m = micro_average(HAND)
    for v in (m.precision, m.recall, m.f_score):
        assert v == pytest.approx(0.8, abs=1e-15)
    assert accuracy(HAND) == 0.8
    assert Fraction(int(np.trace(HAND.counts)), HAND.total) == Fraction(4, 5)


def test_macro_examples():
    perfect = ConfusionMatrix(np.eye(4, dtype=int) * 5)
    mac = macro_average(perfect)
    assert (mac.precision, mac.recall, mac.specificity, mac.f_score) == (1.0, 1.0, 1.0, 1.0)
    # class 0 predicted twice, once right (P=0.5); class 1 predicted once and right (P=1.0)
    cm = ConfusionMatrix([[1, 0], [1, 1]])
    assert macro_average(cm).precision == pytest.approx(0.75)


def test_macro_hand_values():
    mac = macro_average(HAND)
    assert mac.precision == pytest.approx((2 / 3 + 1 + 1) / 3)
    assert mac.recall == pytest.approx((1 + 0.5 + 1) / 3)


def test_large_near_perfect_specificity():
    c = 667
    counts = np.eye(c, dtype=np.int64) * 45
    rng = np.random.default_rng(0)
    for k in rng.choice(c, 60, replace=False):
        counts[k, k] -= 2
        counts[k, (k + 1) % c] += 2
    cm = ConfusionMatrix(counts)
    assert macro_average(cm).specificity >= 0.998
    assert accuracy(cm) > 0.99


def test_accuracy_empty_is_error():
    with pytest.raises(ValidationError):
        accuracy(ConfusionMatrix(np.zeros((3, 3), int)))


def test_accuracy_monte_carlo_uniform():
    rng = np.random.default_rng(1)
    true = rng.integers(0, 5, 20_000)
    pred = rng.integers(0, 5, 20_000)
    assert accuracy(confusion_from_labels(true, pred, 5)) == pytest.approx(0.2, abs=0.01)


def test_sharded_confusion_adds_up():
    rng = np.random.default_rng(2)
    t, p = rng.integers(0, 4, 100), rng.integers(0, 4, 100)
    whole = confusion_from_labels(t, p, 4)
    parts = confusion_from_labels(t[:40], p[:40], 4) + confusion_from_labels(t[40:], p[40:], 4)
    assert whole.counts.tolist() == parts.counts.tolist()


@settings(max_examples=100, deadline=None)
@given(count_matrices.filter(lambda m: m.sum() > 0))
def test_micro_identity(counts):
    cm = ConfusionMatrix(counts)
    m, acc = micro_average(cm), accuracy(cm)
    assert abs(m.precision - acc) <= 1e-12
    assert abs(m.recall - acc) <= 1e-12
    assert abs(m.f_score - acc) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(count_matrices)
def test_counts_partition_total(counts):
    cm = ConfusionMatrix(counts)
    for k in range(cm.num_classes):
        assert sum(one_vs_rest(cm, k)) == cm.total


@settings(max_examples=60, deadline=None)
@given(count_matrices, st.floats(0.25, 4))
def test_scores_in_unit_interval_and_f1_is_harmonic(counts, beta):
    cm = ConfusionMatrix(counts)
    for k in range(cm.num_classes):
        s = per_class_metrics(cm, k, beta)
        for v in (s.precision, s.recall, s.specificity, s.f_score):
            assert 0.0 <= v <= 1.0 + 1e-12
        s1 = per_class_metrics(cm, k)
        if s1.precision + s1.recall > 0:
            assert s1.f_score == pytest.approx(2 * s1.precision * s1.recall / (s1.precision + s1.recall))


@settings(max_examples=60, deadline=None)
@given(count_matrices.filter(lambda m: m.sum() > 0), st.randoms(use_true_random=False))
def test_permutation_invariance(counts, rnd):
    c = len(counts)
    perm = list(range(c))
    rnd.shuffle(perm)
    a = ConfusionMatrix(counts)
    b = ConfusionMatrix(counts[np.ix_(perm, perm)])
    assert accuracy(a) == accuracy(b)
    assert micro_average(a) == micro_average(b)
    for new_k, old_k in enumerate(perm):
        assert per_class_metrics(b, new_k) == per_class_metrics(a, old_k)
    ma, mb = macro_average(a), macro_average(b)
    assert ma.precision == pytest.approx(mb.precision) and ma.f_score == pytest.approx(mb.f_score)


def test_report_outputs():
    cm = ConfusionMatrix(HAND.counts, ["a", "b", "c"])
    rep = metric_report(cm)
    assert rep.accuracy_percent == 80
    d = rep.to_dict()
    assert d["schema"] == "mmnet.metric_report/1"
    assert set(d["per_class"]) == {"a", "b", "c"}
    assert "0.800" in rep.table("toy") and "toy" in rep.table("toy")

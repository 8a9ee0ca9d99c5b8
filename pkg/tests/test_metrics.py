import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddxnet.errors import InvalidArgumentError, UndefinedMetricError
from ddxnet.metrics import (accuracy, argmax_lowest, binary_auroc, classification_report,
                            confusion_matrix, macro_f1, multilabel_report, per_class_prf,
                            report_json)

from gradcheck import auroc_pairs


def test_confusion_matrix_basics():
    truth = [0, 1, 2, 3, 4, 0]
    cm = confusion_matrix(truth, truth, 5)
    assert cm.shape == (5, 5)
    assert np.array_equal(cm, np.diag(np.bincount(truth, minlength=5)))
    rng = np.random.default_rng(0)
    t = rng.integers(0, 4, 50)
    p = rng.integers(0, 4, 50)
    cm = confusion_matrix(p, t, 4)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(t, minlength=4))
    np.testing.assert_array_equal(cm.sum(axis=0), np.bincount(p, minlength=4))
    assert cm.sum() == 50
    with pytest.raises(InvalidArgumentError):
        confusion_matrix([0, 5], [0, 1], 5)
    with pytest.raises(InvalidArgumentError):
        confusion_matrix([-1], [0], 2)


def test_argmax_ties_lowest():
    assert argmax_lowest(np.array([[0.5, 0.5], [0.2, 0.8], [1.0, 1.0]])).tolist() == [0, 1, 0]


def test_hand_computed_prf():
    cm = np.array([[1, 1], [0, 2]])
    assert accuracy(cm) == 0.75
    p, r, f1 = per_class_prf(cm)
    np.testing.assert_allclose(p, [1.0, 2 / 3])
    np.testing.assert_allclose(r, [0.5, 1.0])
    np.testing.assert_allclose(f1, [2 / 3, 0.8])
    assert macro_f1(cm) == pytest.approx((2 / 3 + 0.8) / 2)
    assert round(macro_f1(cm), 6) == 0.733333


def test_prf_zero_division_and_errors():
    cm = np.array([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
    assert accuracy(cm) == 1.0
    assert per_class_prf(cm)[2][2] == 0.0
    assert macro_f1(cm) == pytest.approx(2 / 3)
    assert macro_f1(np.eye(3, dtype=int) * 4) == 1.0
    with pytest.raises(InvalidArgumentError):
        accuracy(np.zeros((2, 2)))


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60),
       st.permutations(range(4)))
def test_accuracy_relabel_invariance_and_f1_range(pairs, perm):
    pred, truth = map(np.array, zip(*pairs))
    cm = confusion_matrix(pred, truth, 4)
    perm = np.array(perm)
    cm2 = confusion_matrix(perm[pred], perm[truth], 4)
    assert accuracy(cm) == accuracy(cm2)
    np.testing.assert_array_equal(cm2[np.ix_(perm, perm)], cm)
    f = macro_f1(cm)
    assert 0.0 <= f <= 1.0
    is_diag_full = not (cm - np.diag(np.diag(cm))).any() and (np.diag(cm) > 0).all()
    assert (f == 1.0) == is_diag_full


def test_auroc_examples():
    assert binary_auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc_pairs([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert binary_auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert binary_auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(UndefinedMetricError):
        binary_auroc([0.1, 0.2], [1, 1])


def test_auroc_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        truth = rng.integers(0, 2, n)
        truth[0], truth[1] = 0, 1
        # coarse quantization forces plenty of ties
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        assert binary_auroc(scores, truth) == auroc_pairs(scores, truth)


def test_report_canonical():
    rng = np.random.default_rng(1)
    truth = rng.integers(0, 2, 30)
    probs = rng.random((30, 2))
    probs /= probs.sum(axis=1, keepdims=True)
    pred = argmax_lowest(probs)
    bundle = classification_report(pred, truth, 2, probs)
    text = report_json(bundle)
    assert text == report_json(classification_report(pred, truth, 2, probs))
    back = json.loads(text)
    assert back["confusion_matrix"] == confusion_matrix(pred, truth, 2).tolist()
    assert back["accuracy"] == float(f"{bundle['accuracy']:.6g}")
    assert back["auroc"] == float(f"{binary_auroc(probs[:, 1], truth):.6g}")
    assert set(back["per_class"]) == {"precision", "recall", "f1"}
    assert list(back) == sorted(back)
    five = classification_report(truth, truth, 5)
    assert "auroc" not in five and len(five["confusion_matrix"]) == 5


def test_multilabel_report():
    targets = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    probs = np.array([[0.9, 0.2], [0.1, 0.7], [0.8, 0.4], [0.3, 0.1]])
    rep = multilabel_report(probs, targets)
    assert rep["label_accuracy"] == 7 / 8
    assert rep["exact_match"] == 3 / 4
    assert rep["per_label_auroc"] == [1.0, 1.0]
    rep = multilabel_report(probs, np.array([[1, 0]] * 4))
    assert rep["per_label_auroc"] == [None, None]

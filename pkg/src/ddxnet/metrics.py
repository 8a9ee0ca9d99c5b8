"""Classification metrics and the canonical JSON report."""

from __future__ import annotations

import json

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidArgumentError, UndefinedMetricError


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(scores, axis=1)


def confusion_matrix(pred, truth, num_classes: int) -> np.ndarray:
    """K x K counts; rows are true classes, columns predicted."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise InvalidArgumentError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InvalidArgumentError(f"{name} entries must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def _check_cm(cm):
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.sum() <= 0:
        raise InvalidArgumentError("confusion matrix must be square with a positive total")
    return cm


def accuracy(cm) -> float:
    cm = _check_cm(cm)
    return float(np.trace(cm) / cm.sum())


def per_class_prf(cm):
    """Precision, recall, F1 arrays; any 0/0 is defined as 0."""
    cm = _check_cm(cm).astype(np.float64)
    tp = np.diag(cm)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_pos > 0, tp / pred_pos, 0.0)
        recall = np.where(true_pos > 0, tp / true_pos, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return precision, recall, f1


def macro_f1(cm) -> float:
    return float(np.mean(per_class_prf(cm)[2]))


def binary_auroc(scores, truth) -> float:
    """Mann-Whitney AUROC with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    pos = truth == 1
    n_pos = int(pos.sum())
    n_neg = int(truth.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores)  # midranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def _round6(x):
    if isinstance(x, dict):
        return {k: _round6(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round6(v) for v in x]
    if isinstance(x, np.ndarray):
        return _round6(x.tolist())
    if isinstance(x, (bool, np.bool_)) or x is None:
        return x if x is None else bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(f"{float(x):.6g}")
    return x


def classification_report(pred, truth, num_classes: int, scores=None) -> dict:
    """Metric bundle for a multi-class evaluation.

    ``scores`` are per-class probabilities; when K == 2 the class-1 column gives AUROC.
    """
    cm = confusion_matrix(pred, truth, num_classes)
    precision, recall, f1 = per_class_prf(cm)
    bundle = {
        "num_samples": int(cm.sum()),
        "num_classes": num_classes,
        "confusion_matrix": cm,
        "accuracy": accuracy(cm),
        "macro_f1": float(np.mean(f1)),
        "per_class": {
            "precision": precision,
            "recall": recall,
            "f1": f1,
        },
    }
    if num_classes == 2 and scores is not None:
        try:
            bundle["auroc"] = binary_auroc(np.asarray(scores)[:, 1], truth)
        except UndefinedMetricError:
            bundle["auroc"] = None
    return bundle


def multilabel_report(probs, targets) -> dict:
    probs = np.asarray(probs)
    targets = np.asarray(targets)
    pred = (probs >= 0.5).astype(np.int64)
    aurocs = []
    for j in range(targets.shape[1]):
        try:
            aurocs.append(binary_auroc(probs[:, j], targets[:, j]))
        except UndefinedMetricError:
            aurocs.append(None)
    return {
        "num_samples": int(targets.shape[0]),
        "num_labels": int(targets.shape[1]),
        "label_accuracy": float(np.mean(pred == targets)),
        "exact_match": float(np.mean(np.all(pred == targets, axis=1))),
        "per_label_auroc": aurocs,
    }


def report_json(bundle: dict) -> str:
    """Canonical text: sorted keys, floats at 6 significant digits."""
    return json.dumps(_round6(bundle), sort_keys=True, indent=2) + "\n"

"""Binary classification metrics with the malignant class as positive.

Undefined ratios come back as None instead of a 0-by-convention, so callers
must decide how to present them. Curve metrics group tied scores into one
operating point, which keeps the trapezoid area equal to the pairwise
ranking statistic.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray

POSITIVE = 1  # Label.MALIGNANT.value


def confusion_matrix(y_true, y_pred) -> Array:
    """[[tn, fp], [fn, tp]] counts."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"shapes {t.shape} and {p.shape} differ")
    if t.size == 0:
        raise ValueError("empty label arrays")
    for arr in (t, p):
        bad = set(np.unique(arr)) - {0, 1}
        if bad:
            raise ValueError(f"labels must be 0 or 1, got {sorted(bad)}")
    tp = int(((t == POSITIVE) & (p == POSITIVE)).sum())
    tn = int(((t != POSITIVE) & (p != POSITIVE)).sum())
    fp = int(((t != POSITIVE) & (p == POSITIVE)).sum())
    fn = int(((t == POSITIVE) & (p != POSITIVE)).sum())
    return np.array([[tn, fp], [fn, tp]], dtype=np.int64)


def accuracy(y_true, y_pred) -> float:
    cm = confusion_matrix(y_true, y_pred)
    return float((cm[0, 0] + cm[1, 1]) / cm.sum())


def precision(y_true, y_pred) -> float | None:
    cm = confusion_matrix(y_true, y_pred)
    predicted_pos = cm[0, 1] + cm[1, 1]
    if predicted_pos == 0:
        return None
    return float(cm[1, 1] / predicted_pos)


def recall(y_true, y_pred) -> float | None:
    cm = confusion_matrix(y_true, y_pred)
    actual_pos = cm[1, 0] + cm[1, 1]
    if actual_pos == 0:
        return None
    return float(cm[1, 1] / actual_pos)


def f1_score(y_true, y_pred) -> float | None:
    p = precision(y_true, y_pred)
    r = recall(y_true, y_pred)
    if p is None or r is None or (p + r) == 0:
        return None
    return 2 * p * r / (p + r)


def binary_metrics(y_true, y_pred) -> dict:
    """All scalar metrics in one pass, Nones preserved."""
    cm = confusion_matrix(y_true, y_pred)
    return {
        "confusion": cm,
        "accuracy": accuracy(y_true, y_pred),
        "precision": precision(y_true, y_pred),
        "recall": recall(y_true, y_pred),
        "f1": f1_score(y_true, y_pred),
    }


def _ranked_counts(y_true, scores):
    """Cumulative positive/negative counts at each distinct score threshold,
    scores descending."""
    t = np.asarray(y_true, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"shapes {t.shape} and {s.shape} differ")
    order = np.argsort(-s, kind="stable")
    ss, ts = s[order], t[order]
    boundaries = np.append(np.where(np.diff(ss) != 0)[0], len(ss) - 1)
    tps = np.cumsum(ts == POSITIVE)[boundaries]
    fps = np.cumsum(ts != POSITIVE)[boundaries]
    return ss[boundaries], tps, fps


def roc_curve(y_true, scores):
    """(fpr, tpr, thresholds), starting at (0, 0) with an infinite threshold."""
    t = np.asarray(y_true, dtype=np.int64)
    n_pos = int((t == POSITIVE).sum())
    n_neg = int((t != POSITIVE).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc needs both classes present")
    thr, tps, fps = _ranked_counts(y_true, scores)
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    return fpr, tpr, np.concatenate([[np.inf], thr])


def _trapezoid(y: Array, x: Array) -> float:
    dx = np.diff(x)
    mid = (y[1:] + y[:-1]) / 2.0
    return float((dx * mid).sum())


def auc_roc(y_true, scores) -> float | None:
    """Area under the ROC curve; None when only one class is present."""
    t = np.asarray(y_true, dtype=np.int64)
    if (t == POSITIVE).all() or (t != POSITIVE).all():
        return None
    fpr, tpr, _ = roc_curve(y_true, scores)
    return _trapezoid(tpr, fpr)


def pr_curve(y_true, scores):
    """(recall, precision, thresholds) over distinct-score operating points."""
    t = np.asarray(y_true, dtype=np.int64)
    n_pos = int((t == POSITIVE).sum())
    if n_pos == 0:
        raise ValueError("pr curve needs at least one positive")
    thr, tps, fps = _ranked_counts(y_true, scores)
    rec = tps / n_pos
    prec = tps / (tps + fps)
    return rec, prec, thr

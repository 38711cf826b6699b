"""Classification metrics: accuracy, balanced accuracy, weighted F1."""

from __future__ import annotations

from .errors import DimensionError


def compute_metrics(y_true: list, y_pred: list) -> dict[str, float]:
    """Acc is plain agreement. bAcc averages per-class recall over classes
    that actually occur in y_true. wF1 weights per-class F1 by true support,
    with F1 defined as 0 where precision + recall is 0."""
    if len(y_true) != len(y_pred):
        raise DimensionError(
            f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    if not y_true:
        raise DimensionError("metrics need at least one sample")
    n = len(y_true)
    classes = sorted({str(c) for c in y_true} | {str(c) for c in y_pred})
    yt = [str(c) for c in y_true]
    yp = [str(c) for c in y_pred]

    acc = sum(t == p for t, p in zip(yt, yp)) / n

    recalls = []
    wf1 = 0.0
    for c in classes:
        tp = sum(t == c and p == c for t, p in zip(yt, yp))
        fn = sum(t == c and p != c for t, p in zip(yt, yp))
        fp = sum(t != c and p == c for t, p in zip(yt, yp))
        support = tp + fn
        if support == 0:
            continue
        recall = tp / support
        recalls.append(recall)
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        wf1 += (support / n) * f1

    return {"acc": acc, "bacc": sum(recalls) / len(recalls), "wf1": wf1}


METRIC_NAMES = ("acc", "bacc", "wf1")

"""Shallow classifiers over frozen embeddings: a multinomial logistic probe
and an exact k-nearest-neighbor voter.

Both are deliberately plain: full-batch float64 math, no stochastic parts, so
results are reproducible to the bit across machines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingSet
from .errors import ParameterError, ProtocolError
from .metrics import compute_metrics

log = logging.getLogger("smearssl.probes")


def _require_labels(emb: EmbeddingSet, role: str) -> list[str]:
    labels = []
    for i, lab in enumerate(emb.labels):
        if lab is None:
            raise ProtocolError(f"{role} row {i} has no label")
        labels.append(lab)
    return labels


def _standardize_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


@dataclass
class ProbeResult:
    predictions: list[str]
    metrics: dict[str, float]
    train_metrics: dict[str, float]
    classes: list[str]
    epochs_run: int
    converged: bool


def linear_probe(train: EmbeddingSet, test: EmbeddingSet,
                 reg_lambda: float = 1e-4, max_epochs: int = 500,
                 tol: float = 1e-6) -> ProbeResult:
    """Softmax regression with an L2 penalty on weights (never the bias),
    optimized by full-batch gradient descent with Armijo backtracking on the
    train-set standardized features."""
    if train.dim != test.dim:
        raise ProtocolError(f"dimension mismatch: train {train.dim}, test {test.dim}")
    if reg_lambda < 0:
        raise ParameterError("reg_lambda must be >= 0")
    y_train = _require_labels(train, "train")
    y_test = _require_labels(test, "test")
    classes = sorted(set(y_train))
    if len(classes) < 2:
        raise ProtocolError(f"train set has {len(classes)} class(es); need >= 2")
    unseen = sorted(set(y_test) - set(classes))
    if unseen:
        log.warning("test classes absent from training: %s (always scored wrong)",
                    unseen)
    cindex = {c: i for i, c in enumerate(classes)}
    n, d = train.vectors.shape
    k = len(classes)

    mean, std = _standardize_stats(train.vectors.astype(np.float64))
    x = (train.vectors.astype(np.float64) - mean) / std
    onehot = np.zeros((n, k))
    onehot[np.arange(n), [cindex[c] for c in y_train]] = 1.0

    w = np.zeros((d, k))
    b = np.zeros(k)

    def forward(wm, bv):
        logits = x @ wm + bv
        logits -= logits.max(axis=1, keepdims=True)
        expz = np.exp(logits)
        probs = expz / expz.sum(axis=1, keepdims=True)
        ce = -np.log(np.maximum(probs[np.arange(n), onehot.argmax(axis=1)], 1e-300)).mean()
        return probs, ce + 0.5 * reg_lambda * float((wm * wm).sum())

    step = 1.0
    epochs = 0
    converged = False
    probs, value = forward(w, b)
    for epochs in range(1, max_epochs + 1):
        g = (probs - onehot) / n
        gw = x.T @ g + reg_lambda * w
        gb = g.sum(axis=0)
        gnorm_sq = float((gw * gw).sum() + (gb * gb).sum())
        if np.sqrt(gnorm_sq) < tol:
            converged = True
            break
        step = min(step * 2.0, 1e4)
        while step > 1e-12:
            w_new = w - step * gw
            b_new = b - step * gb
            probs_new, value_new = forward(w_new, b_new)
            if value_new <= value - 1e-4 * step * gnorm_sq:
                break
            step *= 0.5
        w, b, probs, value = w_new, b_new, probs_new, value_new

    def predict(emb: EmbeddingSet) -> list[str]:
        z = (emb.vectors.astype(np.float64) - mean) / std
        return [classes[i] for i in (z @ w + b).argmax(axis=1)]

    preds = predict(test)
    return ProbeResult(
        predictions=preds,
        metrics=compute_metrics(y_test, preds),
        train_metrics=compute_metrics(y_train, predict(train)),
        classes=classes,
        epochs_run=epochs,
        converged=converged,
    )


def _l2_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


@dataclass
class KnnResult:
    predictions: list[str]
    metrics: dict[str, float]


def knn(train: EmbeddingSet, test: EmbeddingSet, k: int,
        metric: str = "cosine") -> KnnResult:
    """Exact brute-force k-NN. Cosine distance on l2-normalized rows by
    default; majority vote, ties broken by smaller summed distance among the
    tied classes, then by lexicographic class name."""
    if len(train) == 0:
        raise ProtocolError("empty train set")
    if not 1 <= k <= len(train):
        raise ParameterError(f"k must lie in [1, {len(train)}], got {k}")
    if metric not in ("cosine", "euclidean"):
        raise ParameterError(f"unknown distance metric {metric!r}")
    y_train = _require_labels(train, "train")
    y_test = _require_labels(test, "test")

    xtr = train.vectors.astype(np.float64)
    xte = test.vectors.astype(np.float64)
    if metric == "cosine":
        dist = 1.0 - _l2_rows(xte) @ _l2_rows(xtr).T
    else:
        sq = (xte * xte).sum(1)[:, None] - 2 * xte @ xtr.T + (xtr * xtr).sum(1)[None, :]
        dist = np.sqrt(np.maximum(sq, 0.0))

    preds = []
    for i in range(len(test)):
        order = np.argsort(dist[i], kind="stable")[:k]
        votes: dict[str, int] = {}
        dsum: dict[str, float] = {}
        for j in order:
            c = y_train[int(j)]
            votes[c] = votes.get(c, 0) + 1
            dsum[c] = dsum.get(c, 0.0) + float(dist[i, int(j)])
        preds.append(min(votes, key=lambda c: (-votes[c], dsum[c], c)))
    return KnnResult(predictions=preds, metrics=compute_metrics(y_test, preds))

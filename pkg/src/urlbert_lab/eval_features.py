"""Frozen-encoder feature extraction, classical classifiers, and metrics.

AUC uses the rank statistic (tie-averaged ranks), which equals all-pairs
counting with ties worth half.  Multiclass precision/recall/F1 are
micro-averaged: class decisions are pooled into one confusion matrix, so for
single-label problems micro P = R = F1 = accuracy.  Precision is defined as 0
when no positives are predicted (recorded in the output).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import ParamStore, load_arrays, save_arrays
from .encoder import Encoder
from .tokenizer import Vocab, encode_batch


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None
    averaging: str
    per_class: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "auc": self.auc,
                "averaging": self.averaging, "per_class": self.per_class}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


# ------------------------------------------------------------------ AUC / ROC


def binary_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-statistic AUC; ties count half (matches all-pairs comparison)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=float)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError(f"binary_auc: labels/scores must be matching 1-D arrays, "
                         f"got {labels.shape} vs {scores.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("binary_auc: needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(labels.size, dtype=float)
    sorted_scores = scores[order]
    i = 0
    rank = 1
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        avg = (rank + rank + (j - i)) / 2.0
        ranks[order[i:j + 1]] = avg
        rank += j - i + 1
        i = j + 1
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(labels: np.ndarray, scores: np.ndarray) -> list[tuple[float, float, float]]:
    """ROC curve as (fpr, tpr, threshold) rows, thresholds descending."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=float)
    n_pos = int((labels == 1).sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_points: needs both classes present")
    order = np.argsort(-scores, kind="stable")
    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    i = 0
    while i < labels.size:
        thr = scores[order[i]]
        while i < labels.size and scores[order[i]] == thr:
            if labels[order[i]] == 1:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append((fp / n_neg, tp / n_pos, float(thr)))
    return points


def tpr_at_fpr(points, fpr_target: float) -> float:
    """Linear interpolation of the ROC curve at a fixed false-positive rate."""
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    return float(np.interp(fpr_target, xs, ys))


def save_roc_csv(points, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("fpr,tpr,threshold\n")
        for fpr, tpr, thr in points:
            f.write(f"{fpr},{tpr},{thr}\n")


# ------------------------------------------------------------------ metrics


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if precision + recall > 0 else 0.0
    return precision, recall, f1


def compute_metrics(labels: np.ndarray, predictions: np.ndarray | None = None,
                    scores: np.ndarray | None = None,
                    averaging: str | None = None) -> Metrics:
    """Accuracy/P/R/F1 (+AUC when scores are given).

    ``scores``: (n,) positive-class scores for binary problems, or (n, C)
    per-class scores.  When ``predictions`` is omitted it is derived from the
    scores (threshold 0.5 for binary, argmax otherwise).
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    n_classes = max(int(classes.max()) + 1, 2) if classes.size else 2
    if scores is not None:
        scores = np.asarray(scores, dtype=float)
    if predictions is None:
        if scores is None:
            raise ValueError("compute_metrics: need predictions or scores")
        predictions = (scores >= 0.5).astype(int) if scores.ndim == 1 else scores.argmax(axis=1)
    predictions = np.asarray(predictions)
    if averaging is None:
        averaging = "binary" if n_classes == 2 else "micro"
    accuracy = float((predictions == labels).mean())

    per_class = {}
    for c in range(n_classes):
        tp = int(((predictions == c) & (labels == c)).sum())
        fp = int(((predictions == c) & (labels != c)).sum())
        fn = int(((predictions != c) & (labels == c)).sum())
        p, r, f1c = _prf(tp, fp, fn)
        per_class[c] = {"precision": p, "recall": r, "f1": f1c,
                        "support": int((labels == c).sum())}

    if averaging == "binary":
        if n_classes != 2:
            raise ValueError("binary averaging needs exactly two classes")
        stats = per_class[1]
        precision, recall, f1 = stats["precision"], stats["recall"], stats["f1"]
    elif averaging == "micro":
        tp = sum(int(((predictions == c) & (labels == c)).sum()) for c in range(n_classes))
        fp = sum(int(((predictions == c) & (labels != c)).sum()) for c in range(n_classes))
        fn = sum(int(((predictions != c) & (labels == c)).sum()) for c in range(n_classes))
        precision, recall, f1 = _prf(tp, fp, fn)
    else:
        raise ValueError(f"unknown averaging {averaging!r}")

    auc = None
    if scores is not None:
        if classes.size < 2:
            raise ValueError("AUC undefined: labels contain a single class")
        if scores.ndim == 1:
            auc = binary_auc((labels == 1).astype(int), scores)
        else:
            # micro one-vs-rest: flatten (sample, class) indicator vs score
            onehot = np.zeros_like(scores, dtype=int)
            onehot[np.arange(labels.size), labels] = 1
            auc = binary_auc(onehot.reshape(-1), scores.reshape(-1))
    return Metrics(accuracy=accuracy, precision=precision, recall=recall, f1=f1,
                   auc=auc, averaging=averaging, per_class=per_class)


# ------------------------------------------------------------------ features


@dataclass
class FeatureMatrix:
    rows: np.ndarray    # (n, d) float
    labels: np.ndarray  # (n,) int; -1 where unlabeled
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rows.ndim != 2 or self.labels.shape != (self.rows.shape[0],):
            raise ValueError("FeatureMatrix: rows must be (n,d) with n labels")
        if not np.isfinite(self.rows).all():
            raise ValueError("FeatureMatrix: non-finite feature entries")


def extract_features(store: ParamStore, encoder: Encoder, vocab: Vocab, records,
                     pool_spec, batch_size: int = 256) -> FeatureMatrix:
    """Pooled CLS features with frozen parameters (checksum-guarded)."""
    from .finetune import pool  # runtime import; finetune imports this module

    before = store.checksum()
    feats = []
    with ad.no_grad():
        for lo in range(0, len(records), batch_size):
            chunk = records[lo:lo + batch_size]
            batch = encode_batch(vocab, chunk, encoder.cfg.max_len)
            stack = encoder.forward(store, batch.ids, batch.attention_mask)
            feats.append(pool(stack, pool_spec, store=store).data.copy())
    rows = np.concatenate(feats, axis=0)
    labels = np.asarray([r.label if r.label is not None else -1 for r in records],
                        dtype=np.int64)
    if store.checksum() != before:
        raise RuntimeError("extract_features mutated the checkpoint")
    return FeatureMatrix(rows=rows, labels=labels,
                         source={"checkpoint_checksum": before,
                                 "pool": getattr(pool_spec, "kind", str(pool_spec)),
                                 "n": len(records)})


def save_features(fm: FeatureMatrix, out_dir: str) -> None:
    save_arrays({"rows": fm.rows.astype(np.float32),
                 "labels": fm.labels.astype(np.int64)}, out_dir,
                meta={"kind": "features", **fm.source})


def load_features(in_dir: str) -> FeatureMatrix:
    arrays, manifest = load_arrays(in_dir)
    return FeatureMatrix(rows=arrays["rows"].astype(np.float64),
                         labels=arrays["labels"].astype(np.int64),
                         source=manifest.get("meta", {}))


# ------------------------------------------------------------------ classifiers


def _check_train(train: FeatureMatrix) -> None:
    if np.unique(train.labels).size < 2:
        raise ValueError("classifier training needs at least 2 classes")


def _class_scores_to_metrics(test: FeatureMatrix, scores: np.ndarray) -> Metrics:
    n_classes = scores.shape[1]
    preds = scores.argmax(axis=1)
    if n_classes == 2:
        return compute_metrics(test.labels, predictions=preds, scores=scores[:, 1])
    return compute_metrics(test.labels, predictions=preds, scores=scores)


def classify_knn(train: FeatureMatrix, test: FeatureMatrix, k: int = 5,
                 metric: str = "cosine") -> Metrics:
    """Brute-force k-nearest-neighbour vote; vote ties -> smallest class id."""
    _check_train(train)
    if k > train.rows.shape[0]:
        raise ValueError(f"k={k} exceeds train size {train.rows.shape[0]}")
    if metric == "cosine":
        a = train.rows / np.maximum(np.linalg.norm(train.rows, axis=1, keepdims=True), 1e-12)
        b = test.rows / np.maximum(np.linalg.norm(test.rows, axis=1, keepdims=True), 1e-12)
        dist = 1.0 - b @ a.T
    elif metric == "euclidean":
        dist = np.sqrt(np.maximum(
            (test.rows ** 2).sum(1)[:, None] + (train.rows ** 2).sum(1)[None, :]
            - 2.0 * test.rows @ train.rows.T, 0.0))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    n_classes = int(train.labels.max()) + 1
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    votes = train.labels[order]
    scores = np.zeros((test.rows.shape[0], n_classes))
    for c in range(n_classes):
        scores[:, c] = (votes == c).sum(axis=1) / k
    # argmax returns the first (smallest) class on ties
    return _class_scores_to_metrics(test, scores)


def classify_lr(train: FeatureMatrix, test: FeatureMatrix, lr: float = 0.5,
                epochs: int = 300, l2: float = 0.0) -> Metrics:
    """Softmax regression by full-batch gradient descent from zero weights."""
    _check_train(train)
    x = np.concatenate([train.rows, np.ones((train.rows.shape[0], 1))], axis=1)
    n_classes = int(train.labels.max()) + 1
    w = np.zeros((x.shape[1], n_classes))
    onehot = np.zeros((x.shape[0], n_classes))
    onehot[np.arange(x.shape[0]), train.labels] = 1.0
    for _ in range(epochs):
        logits = x @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = x.T @ (p - onehot) / x.shape[0] + l2 * w
        w -= lr * grad
    xt = np.concatenate([test.rows, np.ones((test.rows.shape[0], 1))], axis=1)
    logits = xt @ w
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return _class_scores_to_metrics(test, p)


def gaussian_nb_posteriors(train_rows: np.ndarray, train_labels: np.ndarray,
                           eval_rows: np.ndarray, var_floor: float = 1e-9) -> np.ndarray:
    """Per-class posteriors under the diagonal-Gaussian naive Bayes model."""
    classes = np.unique(train_labels)
    n_classes = int(classes.max()) + 1
    log_post = np.full((eval_rows.shape[0], n_classes), -np.inf)
    for c in classes:
        rows = train_rows[train_labels == c]
        mean = rows.mean(axis=0)
        var = np.maximum(rows.var(axis=0), var_floor)
        prior = rows.shape[0] / train_rows.shape[0]
        ll = -0.5 * (np.log(2 * np.pi * var)[None, :]
                     + (eval_rows - mean) ** 2 / var[None, :]).sum(axis=1)
        log_post[:, c] = np.log(prior) + ll
    log_post -= log_post.max(axis=1, keepdims=True)
    post = np.exp(log_post)
    post /= post.sum(axis=1, keepdims=True)
    return post


def classify_gnb(train: FeatureMatrix, test: FeatureMatrix,
                 var_floor: float = 1e-9) -> Metrics:
    _check_train(train)
    post = gaussian_nb_posteriors(train.rows, train.labels, test.rows, var_floor)
    return _class_scores_to_metrics(test, post)

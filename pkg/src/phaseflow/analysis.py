"""Evaluation statistics: rank correlation, linear probes over latents,
cluster separation."""

from __future__ import annotations

import numpy as np


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Rank correlation; average ranks on ties."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two equal-length vectors")
    if x.size < 2:
        return 0.0

    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty_like(v)
        r[order] = np.arange(v.size, dtype=np.float64)
        # average tied groups
        vals, inv, counts = np.unique(v, return_inverse=True, return_counts=True)
        sums = np.zeros(vals.size)
        np.add.at(sums, inv, r)
        return sums[inv] / counts[inv]

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


def fit_linear_probe(features: np.ndarray, targets: np.ndarray,
                     ridge: float = 1e-3) -> np.ndarray:
    """Ridge regression weights (with bias) mapping features -> targets."""
    x = np.hstack([features, np.ones((features.shape[0], 1))])
    a = x.T @ x + ridge * np.eye(x.shape[1])
    return np.linalg.solve(a, x.T @ targets)


def apply_linear_probe(weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    x = np.hstack([features, np.ones((features.shape[0], 1))])
    return x @ weights


def phase_probe_score(train_traces: list[np.ndarray],
                      eval_traces: list[np.ndarray]) -> float:
    """Fit a probe from phase latents to normalized time on the training
    traces; report the mean per-trace Spearman correlation on the others."""
    xs = np.vstack(train_traces)
    ys = np.concatenate([np.linspace(0, 1, len(t)) for t in train_traces])
    w = fit_linear_probe(xs, ys)
    scores = []
    for trace in eval_traces:
        pred = apply_linear_probe(w, np.asarray(trace))
        scores.append(spearman(pred, np.arange(len(trace), dtype=np.float64)))
    return float(np.mean(scores)) if scores else float("nan")


def silhouette_score(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over samples, euclidean distance.

    s(i) = (b(i) - a(i)) / max(a(i), b(i)) with a = mean intra-cluster
    distance and b = smallest mean distance to another cluster. Singleton
    clusters score 0 by convention.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two clusters")
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    dist = np.sqrt(np.maximum(d2, 0.0))
    scores = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        same = labels == labels[i]
        n_same = same.sum()
        if n_same < 2:
            scores[i] = 0.0
            continue
        a = dist[i, same].sum() / (n_same - 1)
        b = min(dist[i, labels == other].mean() for other in uniq
                if other != labels[i])
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


def cosine_class_separation(x: np.ndarray, labels: np.ndarray):
    """(mean within-class cosine, mean cross-class cosine) over unit vectors."""
    x = np.asarray(x, dtype=np.float64)
    x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    sims = x @ x.T
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    within = sims[same & off]
    across = sims[~same]
    return float(within.mean()), float(across.mean())

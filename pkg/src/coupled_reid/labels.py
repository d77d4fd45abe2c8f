"""Pseudo-label prediction on the unlabeled target set.

Pipeline: k-reciprocal re-ranked distance -> hierarchical density clustering ->
positive pairs that share a cluster and lie within distance ``alpha``.
"""

from __future__ import annotations

import csv
import logging
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import HDBSCAN

from .errors import InvalidK

logger = logging.getLogger(__name__)


def default_k(n: int, k1: int = 20, k2: int = 6) -> tuple[int, int]:
    """Shrink the usual (20, 6) neighbourhood sizes for small sets."""
    k1 = max(1, min(k1, n // 4))
    return k1, max(1, min(k2, k1))


def _reciprocal_sets(rank: np.ndarray, k: int) -> np.ndarray:
    """Boolean matrix R with R[i, j] true iff i and j are in each other's top k+1."""
    n = len(rank)
    top = np.zeros((n, n), dtype=bool)
    top[np.arange(n)[:, None], rank[:, : k + 1]] = True
    return top & top.T


def k_reciprocal_distance(features, k1: int = 20, k2: int = 6, lambda_rr: float = 0.3):
    """Jaccard distance over k-reciprocal neighbour encodings blended with Euclidean distance.

    Returns ``(1 - lambda_rr) * jaccard + lambda_rr * euclidean`` with a zero diagonal.
    Neighbour ranks break ties by sample index.
    """
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise InvalidK("need at least two samples")
    if not (1 <= k2 <= k1 < n):
        raise InvalidK(f"require 1 <= k2 <= k1 < N, got k1={k1}, k2={k2}, N={n}")
    if not (0.0 <= lambda_rr <= 1.0):
        raise ValueError("lambda_rr must lie in [0, 1]")

    original = cdist(X, X)
    if lambda_rr == 1.0:
        return original

    rank = np.argsort(original, axis=1, kind="stable")
    recip = _reciprocal_sets(rank, k1)
    half = _reciprocal_sets(rank, int(np.around(k1 / 2.0))).astype(np.float64)
    # candidate c expands i's set when over 2/3 of its half-size set lies inside i's set
    overlap = recip.astype(np.float64) @ half.T
    accept = recip & (overlap > 2.0 / 3.0 * half.sum(axis=1)[None, :])
    expanded = recip | (accept.astype(np.float64) @ half > 0)

    V = np.where(expanded, np.exp(-original), 0.0)
    V /= V.sum(axis=1, keepdims=True)
    if k2 != 1:
        V = V[rank[:, :k2]].mean(axis=1)

    row_mass = V.sum(axis=1)
    jaccard = np.zeros((n, n))
    for i in range(n):
        nz = np.flatnonzero(V[i])
        cols = V[:, nz]
        inter = np.minimum(V[i, nz], cols).sum(axis=1)
        union = np.maximum(V[i, nz], cols).sum(axis=1) + (row_mass - cols.sum(axis=1))
        jaccard[i] = 1.0 - inter / union

    dist = (1.0 - lambda_rr) * jaccard + lambda_rr * original
    np.fill_diagonal(dist, 0.0)
    return np.maximum(dist, 0.0)


def density_cluster(dist, min_cluster_size: int = 4) -> np.ndarray:
    """Hierarchical density-based clustering on a precomputed distance matrix.

    Noise is labelled -1. A set whose points all coincide is a single cluster.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if n >= min_cluster_size and np.all(dist == 0.0):
        return np.zeros(n, dtype=np.int64)
    if n < 2:
        return np.full(n, -1, dtype=np.int64)
    sym = 0.5 * (dist + dist.T)
    labels = HDBSCAN(metric="precomputed", min_cluster_size=min_cluster_size).fit(sym).labels_
    # relabel to a contiguous range in order of first appearance
    out = np.full(n, -1, dtype=np.int64)
    mapping: dict[int, int] = {}
    for i, lab in enumerate(labels):
        if lab >= 0:
            out[i] = mapping.setdefault(int(lab), len(mapping))
    return out


def select_positive_pairs(clusters, dist, alpha: float) -> np.ndarray:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    labels = np.asarray(clusters)
    dist = np.asarray(dist)
    same = (labels[:, None] == labels[None, :]) & (labels[:, None] >= 0)
    A = same & (dist <= alpha)
    A = A & A.T
    np.fill_diagonal(A, False)
    return A


class PairMetrics(NamedTuple):
    precision: float
    recall: float
    precision_undefined: bool


def pair_metrics(A, truth_ids) -> PairMetrics:
    """Precision and recall of predicted positive pairs over unordered pairs."""
    A = np.asarray(A, dtype=bool)
    truth = np.asarray(truth_ids)
    iu = np.triu_indices(len(truth), k=1)
    pred = A[iu]
    true = (truth[:, None] == truth[None, :])[iu]
    n_pred, n_true = int(pred.sum()), int(true.sum())
    hits = int((pred & true).sum())
    undefined = n_pred == 0
    if undefined:
        logger.warning("no predicted positive pairs; precision reported as 0")
    precision = 0.0 if undefined else hits / n_pred
    recall = hits / n_true if n_true else 0.0
    return PairMetrics(precision, recall, undefined)


def write_pairs_csv(path, A) -> None:
    i, j = np.nonzero(np.triu(np.asarray(A, dtype=bool), k=1))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j"])
        w.writerows(zip(i.tolist(), j.tolist()))


class LabelPrediction(NamedTuple):
    dist: np.ndarray
    clusters: np.ndarray
    positive: np.ndarray


def predict_labels(features, alpha=0.5, k1=20, k2=6, lambda_rr=0.3, min_cluster_size=4) -> LabelPrediction:
    k1, k2 = default_k(len(features), k1, k2)
    dist = k_reciprocal_distance(features, k1, k2, lambda_rr)
    clusters = density_cluster(dist, min_cluster_size)
    return LabelPrediction(dist, clusters, select_positive_pairs(clusters, dist, alpha))

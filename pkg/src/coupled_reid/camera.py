"""Camera-gap estimation and positive-pair weights.

Gaps between cameras are squared MMD values under a Gaussian kernel, min-max
normalized to [0, 1]. The base weight ``w`` makes the average positive-pair
weight ``g + w`` equal to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import EmptySet, NoPositivePairs


@dataclass
class CameraGapTable:
    gap: np.ndarray
    base_weight: float = 1.0
    mean_gap: float = 0.0

    @property
    def n_cameras(self) -> int:
        return self.gap.shape[0]

    def pair_weights(self, cams_a, cams_b) -> np.ndarray:
        """Weight ``g + w`` for every (a, b) camera combination."""
        return self.gap[np.asarray(cams_a)[:, None], np.asarray(cams_b)[None, :]] + self.base_weight


def _gauss(X, Y, bandwidth):
    return np.exp(-cdist(X, Y, "sqeuclidean") / (2.0 * bandwidth**2))


def _within(X, bandwidth):
    K = _gauss(X, X, bandwidth)
    n = len(X)
    if n == 1:
        return K[0, 0]
    return (K.sum() - np.trace(K)) / (n * (n - 1))


def mmd_gap(feats_a, feats_b, bandwidth: float) -> float:
    """Squared MMD with kernel exp(-|x-y|^2 / (2 h^2)), clamped at zero.

    Within-set terms drop the diagonal when the set has two or more members.
    """
    A = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    B = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if A.size == 0 or B.size == 0:
        raise EmptySet("both sample sets must be nonempty")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    cross = _gauss(A, B, bandwidth).mean()
    return max(0.0, _within(A, bandwidth) + _within(B, bandwidth) - 2.0 * cross)


def median_bandwidth(features, max_points: int = 2000, seed: int = 0) -> float:
    X = np.asarray(features, dtype=np.float64)
    if len(X) > max_points:
        X = X[np.random.default_rng(seed).choice(len(X), max_points, replace=False)]
    d = pdist(X)
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


def raw_camera_gaps(features, camera_ids, bandwidth: float | None = None) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    camera_ids = np.asarray(camera_ids)
    n_cam = int(camera_ids.max()) + 1
    if bandwidth is None:
        bandwidth = median_bandwidth(features)
    groups = [features[camera_ids == c] for c in range(n_cam)]
    raw = np.zeros((n_cam, n_cam))
    for a in range(n_cam):
        for b in range(a + 1, n_cam):
            if len(groups[a]) and len(groups[b]):
                raw[a, b] = raw[b, a] = mmd_gap(groups[a], groups[b], bandwidth)
    return raw


def normalize_gaps(raw) -> np.ndarray:
    """Min-max normalize the off-diagonal gaps; all-equal gaps map to zero."""
    raw = np.asarray(raw, dtype=np.float64)
    c = raw.shape[0]
    if c < 2:
        return np.zeros_like(raw)
    off = ~np.eye(c, dtype=bool)
    lo = raw[off].min()
    span = raw[off].max() - lo
    out = np.zeros_like(raw)
    if span > 0:
        out[off] = (raw[off] - lo) / span
    return out


def positive_pair_gaps(gaps, A, camera_ids) -> np.ndarray:
    i, j = np.nonzero(np.triu(np.asarray(A, dtype=bool), k=1))
    cams = np.asarray(camera_ids)
    return np.asarray(gaps)[cams[i], cams[j]]


def base_weight(gaps, A, camera_ids) -> float:
    g = positive_pair_gaps(gaps, A, camera_ids)
    if g.size == 0:
        raise NoPositivePairs("annotation matrix has no positive pairs")
    return 1.0 - float(g.mean())


def build_gap_table(features, camera_ids, bandwidth: float | None = None) -> CameraGapTable:
    return CameraGapTable(normalize_gaps(raw_camera_gaps(features, camera_ids, bandwidth)))


def refresh_base_weight(table: CameraGapTable, A, camera_ids) -> CameraGapTable:
    """Recompute ``w`` for a new annotation matrix; uniform weight 1 without positives."""
    try:
        w = base_weight(table.gap, A, camera_ids)
    except NoPositivePairs:
        w = 1.0
    table.base_weight = w
    table.mean_gap = 1.0 - w
    return table

"""Vector primitives, the exponential similarity kernel and the feature memory bank."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EpochZero, IndexOutOfRange, ZeroVector

ZERO_NORM = 1e-12
SOURCE = "source"
TARGET = "target"


def l2_normalize(v):
    """Scale ``v`` to unit Euclidean norm.

    Accepts a single vector or a matrix (row-wise). Raises ZeroVector when any
    row has norm below 1e-12.
    """
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms < ZERO_NORM):
        raise ZeroVector("cannot normalize a zero vector")
    return v / norms


def exp_similarity(a, b, beta: float) -> float:
    """exp(a.b / beta) for unit vectors a, b."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return float(np.exp(np.dot(a, b) / beta))


def pairwise_cosine(A, B):
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"feature dims differ: {A.shape[1]} vs {B.shape[1]}")
    return A @ B.T


@dataclass
class EpochClock:
    epoch: int = 0
    iteration: int = 0

    def advance_epoch(self) -> None:
        self.epoch += 1

    def tick(self) -> None:
        self.iteration += 1


@dataclass
class FeatureBank:
    """Cached unit-norm features of every target sample.

    Mutated in place by :func:`bank_update`; the training loop is the only writer.
    """

    rows: np.ndarray
    camera_ids: np.ndarray
    domain_tags: np.ndarray
    update_counts: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.update_counts is None:
            self.update_counts = np.zeros(len(self.rows), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def copy(self) -> "FeatureBank":
        return FeatureBank(
            self.rows.copy(),
            self.camera_ids.copy(),
            self.domain_tags.copy(),
            self.update_counts.copy(),
        )


def bank_init(features, camera_ids, domain_tags=None) -> FeatureBank:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
        raise DimensionMismatch(f"need a non-empty N x d matrix, got shape {features.shape}")
    camera_ids = np.asarray(camera_ids, dtype=np.int64)
    if camera_ids.shape != (features.shape[0],):
        raise DimensionMismatch("one camera id per row is required")
    if np.any(camera_ids < 0):
        raise ValueError("camera ids must be nonnegative")
    if domain_tags is None:
        domain_tags = np.full(features.shape[0], TARGET)
    domain_tags = np.asarray(domain_tags)
    if domain_tags.shape != (features.shape[0],):
        raise DimensionMismatch("one domain tag per row is required")
    return FeatureBank(l2_normalize(features), camera_ids.copy(), domain_tags.copy())


def bank_weight(epoch: int) -> float:
    """Blend weight max(0, (100 - epoch) / epoch) for fresh features."""
    if epoch <= 0:
        raise EpochZero("bank update weight is undefined at epoch 0")
    return max(0.0, (100.0 - epoch) / epoch)


def bank_update(bank: FeatureBank, indices, fresh, clock: EpochClock) -> FeatureBank:
    """Blend fresh features into the bank rows at ``indices`` and renormalize.

    Repeated indices (augmented copies of one sample) are averaged first so each
    row receives a single update.
    """
    w = bank_weight(clock.epoch)
    indices = np.asarray(indices, dtype=np.int64)
    fresh = np.atleast_2d(np.asarray(fresh, dtype=np.float64))
    if fresh.shape != (len(indices), bank.dim):
        raise DimensionMismatch(f"fresh features shape {fresh.shape} does not match indices/bank")
    if len(indices) and (indices.min() < 0 or indices.max() >= len(bank)):
        raise IndexOutOfRange("bank index out of range")
    if len(indices) == 0:
        return bank
    uniq, inverse = np.unique(indices, return_inverse=True)
    sums = np.zeros((len(uniq), bank.dim))
    np.add.at(sums, inverse, fresh)
    means = sums / np.bincount(inverse)[:, None]
    bank.update_counts[uniq] += 1
    if w == 0.0:
        return bank
    bank.rows[uniq] = l2_normalize(bank.rows[uniq] + w * means)
    return bank


# --- serialization -------------------------------------------------------------

def write_features_bin(path, features) -> None:
    """Little-endian uint64 column count followed by row-major float64 values."""
    features = np.ascontiguousarray(np.atleast_2d(features), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", features.shape[1]))
        fh.write(features.tobytes())


def read_features_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DimensionMismatch("truncated feature file")
    (d,) = struct.unpack("<Q", raw[:8])
    body = np.frombuffer(raw[8:], dtype="<f8")
    if d == 0 or body.size % d:
        raise DimensionMismatch(f"payload of {body.size} values is not a multiple of {d} columns")
    return body.reshape(-1, d).astype(np.float64)


def write_features_csv(path, features, camera_ids, domain_tags) -> None:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["camera", "domain"] + [f"f{j}" for j in range(features.shape[1])])
        for row, cam, dom in zip(features, camera_ids, domain_tags):
            w.writerow([int(cam), str(dom)] + [repr(float(x)) for x in row])


def read_features_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:2] != ["camera", "domain"]:
            raise DimensionMismatch("CSV must start with camera,domain columns")
        cams, doms, rows = [], [], []
        for line in r:
            cams.append(int(line[0]))
            doms.append(line[1])
            rows.append([float(x) for x in line[2:]])
    return np.array(rows, dtype=np.float64), np.array(cams, dtype=np.int64), np.array(doms)

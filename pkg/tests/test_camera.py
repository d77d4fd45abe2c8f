import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coupled_reid.camera import (
    CameraGapTable,
    base_weight,
    build_gap_table,
    mmd_gap,
    normalize_gaps,
    positive_pair_gaps,
    refresh_base_weight,
)
from coupled_reid.errors import EmptySet, NoPositivePairs
from coupled_reid.synthetic import DomainSpec, generate_domain


def loop_mmd(A, B, h):
    def k(x, y):
        return math.exp(-sum((a - b) ** 2 for a, b in zip(x, y)) / (2 * h * h))

    def within(X):
        n = len(X)
        if n == 1:
            return k(X[0], X[0])
        return sum(k(X[i], X[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))

    cross = sum(k(a, b) for a in A for b in B) / (len(A) * len(B))
    return max(0.0, within(A) + within(B) - 2 * cross)


class TestMMD:
    def test_identical_sets(self, rng):
        X = rng.normal(size=(10, 3))
        assert abs(mmd_gap(X, X[::-1], 1.0)) < 1e-9

    def test_singletons(self):
        assert mmd_gap([[1.0, 0.0]], [[0.0, 1.0]], 1.0) == pytest.approx(2 - 2 * math.exp(-1), abs=1e-15)
        assert mmd_gap([[1.0, 0.0]], [[0.0, 1.0]], 1.0) == pytest.approx(1.264241, abs=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_double_loop(self, seed):
        rng = np.random.default_rng(seed)
        A, B = rng.normal(size=(10, 4)), rng.normal(0.3, 1.0, size=(10, 4))
        h = rng.uniform(0.5, 2.0)
        assert mmd_gap(A, B, h) == pytest.approx(loop_mmd(A, B, h), abs=1e-12)

    @given(st.integers(0, 10_000))
    def test_symmetric_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        A, B = rng.normal(size=(5, 2)), rng.normal(size=(7, 2))
        assert mmd_gap(A, B, 1.0) == pytest.approx(mmd_gap(B, A, 1.0), abs=1e-15)
        assert mmd_gap(A, B, 1.0) >= 0

    def test_empty(self):
        with pytest.raises(EmptySet):
            mmd_gap(np.zeros((0, 2)), [[1.0, 0.0]], 1.0)


class TestNormalize:
    def test_affine(self):
        raw = np.array([[0, 0.2, 0.5], [0.2, 0, 0.8], [0.5, 0.8, 0]])
        g = normalize_gaps(raw)
        np.testing.assert_allclose(g, [[0, 0, 0.5], [0, 0, 1], [0.5, 1, 0]], atol=1e-15)

    def test_all_equal(self):
        raw = np.full((3, 3), 0.4)
        np.fill_diagonal(raw, 0)
        assert not normalize_gaps(raw).any()

    def test_two_cameras(self):
        assert not normalize_gaps(np.array([[0, 0.37], [0.37, 0]])).any()

    @given(st.integers(0, 10_000))
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        raw = rng.random((4, 4))
        raw = raw + raw.T
        np.fill_diagonal(raw, 0)
        g = normalize_gaps(raw)
        off = ~np.eye(4, dtype=bool)
        assert g[off].min() == 0 and g[off].max() == 1 and not np.diag(g).any()
        np.testing.assert_allclose(normalize_gaps(g), g, atol=1e-15)


class TestBaseWeight:
    def _pairs(self, gaps_per_pair, n_cam=3):
        """Annotation with one positive pair per requested camera pair."""
        cams, pairs = [], []
        for a, b in gaps_per_pair:
            cams += [a, b]
            pairs.append((len(cams) - 2, len(cams) - 1))
        A = np.zeros((len(cams), len(cams)), bool)
        for i, j in pairs:
            A[i, j] = A[j, i] = True
        return A, np.array(cams)

    def test_market_analog(self):
        gaps = np.array([[0, 0.6], [0.6, 0]])
        A, cams = self._pairs([(0, 1)])
        assert base_weight(gaps, A, cams) == pytest.approx(0.4, abs=1e-15)

    def test_msmt_analog(self):
        gaps = np.array([[0, 0.74], [0.74, 0]])
        A, cams = self._pairs([(0, 1)] * 3)
        assert base_weight(gaps, A, cams) == pytest.approx(0.26, abs=1e-15)

    def test_same_camera(self):
        A, cams = self._pairs([(1, 1), (2, 2)])
        assert base_weight(np.ones((3, 3)) - np.eye(3), A, cams) == 1.0

    def test_no_pairs(self):
        with pytest.raises(NoPositivePairs):
            base_weight(np.zeros((2, 2)), np.zeros((4, 4), bool), [0, 1, 0, 1])

    @given(st.integers(0, 10_000))
    def test_mean_pair_weight_is_one(self, seed):
        rng = np.random.default_rng(seed)
        n = 30
        cams = rng.integers(0, 4, n)
        A = rng.random((n, n)) < 0.1
        A = np.triu(A, 1)
        A = A | A.T
        if not A.any():
            return
        raw = rng.random((4, 4))
        raw = raw + raw.T
        np.fill_diagonal(raw, 0)
        table = refresh_base_weight(CameraGapTable(normalize_gaps(raw)), A, cams)
        weights = positive_pair_gaps(table.gap, A, cams) + table.base_weight
        assert abs(weights.mean() - 1.0) < 1e-9
        assert table.mean_gap == pytest.approx(1 - table.base_weight)

    def test_refresh_without_pairs(self):
        table = refresh_base_weight(CameraGapTable(np.zeros((2, 2)), 0.3), np.zeros((3, 3), bool), [0, 1, 0])
        assert table.base_weight == 1.0


def test_larger_camera_scale_larger_gap():
    """Raising one camera's transform scale raises its gap to the identity camera (mean over 5 seeds)."""
    means = []
    for scale in (0.2, 0.5, 0.8):
        gaps = []
        for seed in range(5):
            spec = DomainSpec(n_ids=20, imgs_per_id=8, dim=16, n_cameras=2, camera_scales=(0.0, scale))
            data = generate_domain(spec, seed)
            a = data.observations[data.camera_ids == 0]
            b = data.observations[data.camera_ids == 1]
            gaps.append(mmd_gap(a, b, 1.0))
        means.append(np.mean(gaps))
    assert means[0] < means[1] < means[2]


def test_build_gap_table_shape(rng):
    feats = rng.normal(size=(40, 5))
    table = build_gap_table(feats, rng.integers(0, 3, 40))
    assert table.gap.shape == (3, 3) and np.array_equal(table.gap, table.gap.T)

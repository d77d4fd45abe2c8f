import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coupled_reid.errors import NoValidQueries
from coupled_reid.evaluation import average_precision, evaluate

from conftest import unit_rows


def brute_force_ap(q, qid, qcam, G, gid, gcam):
    """AP from precision at every recall step, with explicit filtering and ordering."""
    candidates = [j for j in range(len(G)) if not (gid[j] == qid and gcam[j] == qcam)]
    candidates.sort(key=lambda j: (-float(q @ G[j]), j))
    relevant = sum(gid[j] == qid for j in candidates)
    if relevant == 0:
        return None
    total, hits = 0.0, 0
    for rank, j in enumerate(candidates, start=1):
        if gid[j] == qid:
            hits += 1
            total += hits / rank
    return total / relevant


def _random_problem(seed, nq=6, ng=30, n_ids=5, d=4):
    rng = np.random.default_rng(seed)
    return (unit_rows(rng, nq, d), rng.integers(0, n_ids, nq), rng.integers(0, 3, nq),
            unit_rows(rng, ng, d), rng.integers(0, n_ids, ng), rng.integers(0, 3, ng))


class TestAveragePrecision:
    def test_example(self):
        assert average_precision(np.array([1, 0, 1], bool)) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)

    def test_perfect_and_none(self):
        assert average_precision(np.array([1, 1, 0], bool)) == 1.0
        assert average_precision(np.zeros(3, bool)) == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        q, qid, qcam, G, gid, gcam = _random_problem(seed)
        try:
            res = evaluate(q, qid, qcam, G, gid, gcam)
        except NoValidQueries:
            return
        expected = [a for a in (brute_force_ap(q[i], qid[i], qcam[i], G, gid, gcam) for i in range(len(q))) if a is not None]
        np.testing.assert_allclose(res.ap, expected, atol=1e-12)
        assert res.mAP == pytest.approx(np.mean(expected), abs=1e-12)
        assert res.n_skipped == len(q) - len(expected)


class TestEvaluate:
    def test_same_camera_match_is_filtered(self):
        q = np.array([[1.0, 0.0]])
        G = np.array([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]])
        res = evaluate(q, [0], [0], G, [0, 0, 1], [0, 1, 1])
        assert res.rank1 == 1.0 and res.ap == [1.0]

    def test_first_match_at_rank_two(self):
        q = np.array([[1.0, 0.0]])
        G = np.array([[0.9, np.sqrt(0.19)], [0.6, 0.8]])
        res = evaluate(q, [0], [0], G, [1, 0], [1, 1])
        assert (res.rank1, res.rank5) == (0.0, 1.0) and res.mAP == 0.5

    def test_ties_by_index(self):
        q = np.array([[1.0, 0.0]])
        G = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert evaluate(q, [0], [0], G, [1, 0], [1, 1]).rank1 == 0.0
        assert evaluate(q, [0], [0], G, [0, 1], [1, 1]).rank1 == 1.0

    def test_no_valid_queries(self):
        with pytest.raises(NoValidQueries):
            evaluate([[1.0, 0.0]], [0], [0], [[1.0, 0.0]], [0], [0])

    def test_skip_count(self):
        G = np.eye(2)
        res = evaluate(np.eye(2), [0, 5], [0, 0], G, [0, 1], [1, 1])
        assert res.n_skipped == 1 and len(res.ap) == 1

    @given(st.integers(0, 10_000))
    def test_cmc_monotone_and_bounded(self, seed):
        try:
            res = evaluate(*_random_problem(seed))
        except NoValidQueries:
            return
        cmc = np.array(res.cmc)
        assert np.all(np.diff(cmc) >= 0) and 0 <= cmc[0] <= cmc[-1] <= 1
        assert res.rank1 <= res.rank5 <= res.rank10
        assert 0 <= res.mAP <= 1

    @given(st.integers(0, 10_000))
    def test_rotation_invariant(self, seed):
        q, qid, qcam, G, gid, gcam = _random_problem(seed)
        Q = np.linalg.qr(np.random.default_rng(seed).normal(size=(4, 4)))[0]
        try:
            a = evaluate(q, qid, qcam, G, gid, gcam)
        except NoValidQueries:
            return
        b = evaluate(q @ Q, qid, qcam, G @ Q, gid, gcam)
        # rotation can reorder exact ties only at round-off level; random data has none
        assert a.cmc == pytest.approx(b.cmc) and a.mAP == pytest.approx(b.mAP, abs=1e-12)

    def test_gallery_duplication_keeps_rank1(self):
        for seed in range(10):
            q, qid, qcam, G, gid, gcam = _random_problem(seed)
            try:
                a = evaluate(q, qid, qcam, G, gid, gcam)
            except NoValidQueries:
                continue
            order = np.repeat(np.arange(len(G)), 2)
            assert evaluate(q, qid, qcam, G[order], gid[order], gcam[order]).rank1 == a.rank1

    def test_gallery_duplication_changes_ap(self):
        """Matches [1, 0, 1] become [1, 1, 0, 0, 1, 1]: AP 5/6 turns into 49/60."""
        q = np.array([[1.0, 0.0]])
        G = np.array([[1.0, 0.0], [0.8, 0.6], [0.6, 0.8]])
        gid, gcam = np.array([0, 1, 0]), np.array([1, 1, 1])
        assert evaluate(q, [0], [0], G, gid, gcam).mAP == pytest.approx(5 / 6)
        order = np.repeat(np.arange(3), 2)
        dup = evaluate(q, [0], [0], G[order], gid[order], gcam[order])
        assert dup.mAP == pytest.approx(49 / 60) and dup.rank1 == 1.0

    def test_to_dict(self):
        res = evaluate(np.eye(2), [0, 1], [0, 0], np.eye(2), [0, 1], [1, 1])
        d = res.to_dict(full=True)
        assert d["rank1"] == 1.0 and d["n_queries"] == 2 and d["ap"] == [1.0, 1.0]


def test_permuting_gallery_keeps_scores():
    q, qid, qcam, G, gid, gcam = _random_problem(3, ng=40)
    a = evaluate(q, qid, qcam, G, gid, gcam)
    perm = np.random.default_rng(0).permutation(40)
    b = evaluate(q, qid, qcam, G[perm], gid[perm], gcam[perm])
    assert a.cmc == b.cmc and b.mAP == pytest.approx(a.mAP, abs=1e-12)

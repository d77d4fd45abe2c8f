"""CMC and mAP under the cross-camera retrieval protocol."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoValidQueries


@dataclass
class EvalResult:
    rank1: float
    rank5: float
    rank10: float
    mAP: float
    ap: list = field(default_factory=list, repr=False)
    cmc: list = field(default_factory=list, repr=False)
    n_skipped: int = 0

    def to_dict(self, full: bool = False) -> dict:
        d = {"rank1": self.rank1, "rank5": self.rank5, "rank10": self.rank10, "mAP": self.mAP,
             "n_queries": len(self.ap), "n_skipped": self.n_skipped}
        if full:
            d["ap"] = list(self.ap)
        return d


def average_precision(matches: np.ndarray) -> float:
    """Mean of precision@k over the ranks k holding a true match."""
    hits = np.flatnonzero(matches)
    if hits.size == 0:
        return 0.0
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


def evaluate(query_feats, query_ids, query_cams, gallery_feats, gallery_ids, gallery_cams, max_rank: int = 10) -> EvalResult:
    """Rank the gallery by cosine similarity for every query.

    Gallery items sharing both identity and camera with the query are removed.
    Ties are broken by gallery index. Queries without any valid match are
    skipped and counted.
    """
    q = np.atleast_2d(np.asarray(query_feats, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery_feats, dtype=np.float64))
    qid, qcam = np.asarray(query_ids), np.asarray(query_cams)
    gid, gcam = np.asarray(gallery_ids), np.asarray(gallery_cams)
    sim = q @ g.T
    depth = max(max_rank, 10)
    cmc_sum = np.zeros(depth)
    aps = []
    skipped = 0
    for i in range(len(q)):
        order = np.argsort(-sim[i], kind="stable")
        keep = ~((gid[order] == qid[i]) & (gcam[order] == qcam[i]))
        matches = (gid[order] == qid[i])[keep]
        if not matches.any():
            skipped += 1
            continue
        first = int(np.argmax(matches))
        if first < depth:
            cmc_sum[first:] += 1
        aps.append(average_precision(matches))
    if not aps:
        raise NoValidQueries("no query has a valid gallery match")
    cmc = cmc_sum / len(aps)
    return EvalResult(float(cmc[0]), float(cmc[4]), float(cmc[9]), float(np.mean(aps)), aps, cmc.tolist(), skipped)

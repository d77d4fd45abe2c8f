"""Loss functions with closed-form gradients, plus a central-difference checker.

Every loss returns a :class:`LossResult` whose ``grads`` map a block name to an
array shaped like that input. Similarities are ``exp(a.b / beta)``; the GO and
LO terms are evaluated in log space so ``beta = 0.05`` cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .camera import CameraGapTable
from .core import FeatureBank
from .errors import BankMismatch, BetaNonPositive, EmptyDomain, LabelOutOfRange, NonDeterministicLoss


@dataclass
class LossResult:
    value: float
    grads: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict, repr=False)


def _check_beta(beta):
    if not beta > 0:
        raise BetaNonPositive(f"beta must be positive, got {beta}")


def _masked_logsumexp(U, mask):
    with np.errstate(divide="ignore"):
        return logsumexp(np.where(mask, U, -np.inf), axis=1)


def go_loss(anchors, anchor_indices, bank: FeatureBank, A, gaps: CameraGapTable, beta: float) -> LossResult:
    """Global optimization loss of live anchors against the memory bank.

    For anchor i with positives P_i (from ``A``) and negatives N_i (every other
    bank row except the anchor's own)::

        l_i = 1/|P_i| * sum_{j in P_i} (g_ij + w) * log(1 + S_n / sim(i, j))
        S_n = sum_{k in N_i} sim(i, k)

    Bank rows are constants; only the anchors receive gradients. Anchors with
    no positives contribute nothing. ``aux`` carries the per-pair gradient
    coefficients: ``pull`` (on positives, negative) and ``push`` (on negatives,
    positive), so that ``grad_i = sum_n (pull + push)[i, n] * bank[n]``.
    """
    _check_beta(beta)
    X = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    idx = np.asarray(anchor_indices, dtype=np.int64)
    A = np.asarray(A, dtype=bool)
    n = len(bank)
    if X.shape[1] != bank.dim or len(idx) != len(X):
        raise BankMismatch("anchor shape does not match bank or index list")
    if A.shape != (n, n):
        raise BankMismatch(f"annotation matrix shape {A.shape} does not match bank size {n}")
    if len(idx) and (idx.min() < 0 or idx.max() >= n):
        raise BankMismatch("anchor index outside the bank")

    U = X @ bank.rows.T / beta
    pos = A[idx]
    neg = ~pos
    neg[np.arange(len(idx)), idx] = False
    n_pos = pos.sum(axis=1)
    active = n_pos > 0
    inv_p = np.where(active, 1.0 / np.maximum(n_pos, 1), 0.0)
    c = gaps.pair_weights(bank.camera_ids[idx], bank.camera_ids)

    log_sn = _masked_logsumexp(U, neg)
    with np.errstate(invalid="ignore"):
        Z = log_sn[:, None] - U
    Z = np.where(pos, Z, -np.inf)
    value = float((np.where(pos, c * np.logaddexp(0.0, Z), 0.0).sum(axis=1) * inv_p).sum())

    sig = np.where(pos, expit(Z), 0.0)
    pull = -c * sig * inv_p[:, None] / beta
    total = (c * sig).sum(axis=1) * inv_p / beta
    finite = np.isfinite(log_sn)
    with np.errstate(invalid="ignore", over="ignore"):
        share = np.where(neg & finite[:, None], np.exp(U - np.where(finite, log_sn, 0.0)[:, None]), 0.0)
    push = share * total[:, None]
    grad = (pull + push) @ bank.rows
    return LossResult(value, {"anchors": grad}, {"pull": pull, "push": push})


def lo_loss(batch, same_instance_mask=None, beta: float = 0.05) -> LossResult:
    """Local optimization loss treating every non-sibling batch pair as negative.

    ``value = sum_i log(1 + sum_{j not sibling of i} sim(i, j))``. The gradient
    of each feature collects its role as an anchor and as other anchors'
    negative. ``aux['coef'][i, k]`` is the push coefficient of k on anchor i.
    """
    _check_beta(beta)
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    k = len(X)
    if same_instance_mask is None:
        mask = np.eye(k, dtype=bool)
    else:
        mask = np.asarray(same_instance_mask, dtype=bool) | np.eye(k, dtype=bool)
    neg = ~mask
    U = X @ X.T / beta
    log_t = _masked_logsumexp(U, neg)
    per_anchor = np.logaddexp(0.0, log_t)
    W = np.where(neg, np.exp(np.where(neg, U, 0.0) - per_anchor[:, None]), 0.0)
    grad = (W + W.T) @ X / beta
    return LossResult(float(per_anchor.sum()), {"batch": grad}, {"coef": W / beta})


def _scores(s, name):
    s = np.asarray(s, dtype=np.float64).ravel()
    if s.size == 0:
        raise EmptyDomain(f"{name} scores are empty")
    return s


def dnet_loss(scores_src, scores_tgt) -> LossResult:
    """Discriminator regression loss: source scores to 1, target scores to 0."""
    s = _scores(scores_src, "source")
    t = _scores(scores_tgt, "target")
    value = np.mean((s - 1.0) ** 2) + np.mean(t**2)
    return LossResult(float(value), {"scores_src": 2 * (s - 1.0) / s.size, "scores_tgt": 2 * t / t.size})


def dim_loss(scores_src, scores_tgt) -> LossResult:
    """Confusion loss: every score pulled to 0.5."""
    s = _scores(scores_src, "source")
    t = _scores(scores_tgt, "target")
    value = np.mean((s - 0.5) ** 2) + np.mean((t - 0.5) ** 2)
    return LossResult(float(value), {"scores_src": 2 * (s - 0.5) / s.size, "scores_tgt": 2 * (t - 0.5) / t.size})


def ce_loss(logits, labels) -> LossResult:
    """Mean softmax cross-entropy."""
    Z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    k, m = Z.shape
    if y.shape != (k,):
        raise LabelOutOfRange("one label per logit row is required")
    if np.any((y < 0) | (y >= m)):
        raise LabelOutOfRange(f"labels must lie in [0, {m})")
    log_p = Z - logsumexp(Z, axis=1, keepdims=True)
    value = -log_p[np.arange(k), y].mean()
    grad = np.exp(log_p)
    grad[np.arange(k), y] -= 1.0
    return LossResult(float(value), {"logits": grad / k})


# --- finite-difference certification -------------------------------------------

@dataclass
class GradCheckReport:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    tol: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_coords": int(self.analytic.size),
            "max_rel_error": self.max_rel_error,
            "tol": self.tol,
            "passed": self.passed,
        }


def relative_error(analytic, numeric) -> np.ndarray:
    """Per-coordinate |a - n| / max(|a|, |n|, floor).

    The floor is 1e-3 of the largest gradient magnitude (and at least 1e-10) so
    coordinates whose true derivative is ~0 are judged on the gradient's scale
    rather than on round-off.
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    floor = max(1e-3 * scale, 1e-10)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(loss_evaluator, point, h: float = 1e-6, tol: float = 1e-5, name: str = "loss") -> GradCheckReport:
    """Compare ``loss_evaluator(x) -> (value, grad)`` against central differences."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.array(point, dtype=np.float64).ravel()
    f0, analytic = loss_evaluator(x0.copy())
    f0_again, _ = loss_evaluator(x0.copy())
    if f0 != f0_again:
        raise NonDeterministicLoss(f"{name}: repeated evaluation differs ({f0!r} vs {f0_again!r})")
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.empty_like(x0)
    for i in range(x0.size):
        x = x0.copy()
        x[i] = x0[i] + h
        fp = loss_evaluator(x)[0]
        x[i] = x0[i] - h
        fm = loss_evaluator(x)[0]
        numeric[i] = (fp - fm) / (2 * h)
    err = float(np.max(relative_error(analytic, numeric), initial=0.0))
    return GradCheckReport(name, analytic, numeric, err, tol, err < tol)

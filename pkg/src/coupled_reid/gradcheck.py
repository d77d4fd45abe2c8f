"""Finite-difference certification of every hand-written gradient.

Each check draws a small random instance, wraps it as ``x -> (value, grad)``
over a flat vector and hands it to :func:`finite_diff_check`.
"""

from __future__ import annotations

import time

import numpy as np

from . import models
from .camera import CameraGapTable
from .core import bank_init, l2_normalize
from .objectives import (
    GradCheckReport,
    ce_loss,
    dim_loss,
    dnet_loss,
    finite_diff_check,
    go_loss,
    lo_loss,
    relative_error,
)


def _unit(rng, n, d):
    return l2_normalize(rng.normal(size=(n, d)))


def _sphere_eval(loss_grad, shape):
    """Evaluate a loss of unit rows through normalization, so perturbations stay valid."""
    def f(x):
        Z = x.reshape(shape)
        norm = np.linalg.norm(Z, axis=1, keepdims=True)
        value, g = loss_grad(Z / norm)
        return value, models.normalize_backward(Z, norm, g).ravel()
    return f


def _go_instance(rng, beta=None):
    K, N, d = 4, 30, 8
    beta = beta if beta is not None else rng.uniform(0.2, 1.0)
    cams = rng.integers(0, 3, N)
    bank = bank_init(_unit(rng, N, d), cams)
    A = rng.random((N, N)) < 0.2
    A = A | A.T
    np.fill_diagonal(A, False)
    raw = rng.random((3, 3))
    gaps = CameraGapTable((raw + raw.T) / 2, base_weight=rng.uniform(0.5, 1.0))
    idx = rng.choice(N, K, replace=False)
    A[idx, (idx + 1) % N] = A[(idx + 1) % N, idx] = True  # every anchor has a positive
    return _unit(rng, K, d), idx, bank, A, gaps, beta


def check_go(rng, tol, h=1e-6):
    X, idx, bank, A, gaps, beta = _go_instance(rng)
    f = _sphere_eval(lambda Z: (lambda r: (r.value, r.grads["anchors"]))(go_loss(Z, idx, bank, A, gaps, beta)), X.shape)
    return finite_diff_check(f, X.ravel(), h, tol, "go_loss")


def check_lo(rng, tol, h=1e-6):
    K, d = 6, 8
    beta = rng.uniform(0.2, 1.0)
    owner = np.array([0, 0, 1, 1, 2, 3])
    mask = owner[:, None] == owner[None, :]
    X = _unit(rng, K, d)
    f = _sphere_eval(lambda Z: (lambda r: (r.value, r.grads["batch"]))(lo_loss(Z, mask, beta)), X.shape)
    return finite_diff_check(f, X.ravel(), h, tol, "lo_loss")


def _score_pair(rng):
    return rng.normal(0.5, 0.5, rng.integers(2, 7)), rng.normal(0.5, 0.5, rng.integers(2, 7))


def _check_scores(loss, name, rng, tol, h):
    s, t = _score_pair(rng)

    def f(x):
        r = loss(x[:len(s)], x[len(s):])
        return r.value, np.concatenate([r.grads["scores_src"], r.grads["scores_tgt"]])
    return finite_diff_check(f, np.concatenate([s, t]), h, tol, name)


def check_dnet(rng, tol, h=1e-6):
    return _check_scores(dnet_loss, "dnet_loss", rng, tol, h)


def check_dim(rng, tol, h=1e-6):
    return _check_scores(dim_loss, "dim_loss", rng, tol, h)


def check_ce(rng, tol, h=1e-6):
    K, M = 5, 7
    y = rng.integers(0, M, K)
    logits = rng.normal(size=(K, M))

    def f(x):
        r = ce_loss(x.reshape(K, M), y)
        return r.value, r.grads["logits"].ravel()
    return finite_diff_check(f, logits.ravel(), h, tol, "ce_loss")


def _flat_params(model):
    keys = list(model.params)
    return keys, np.concatenate([model.params[k].ravel() for k in keys])


def _set_flat(model, keys, x):
    pos = 0
    for k in keys:
        p = model.params[k]
        p[...] = x[pos:pos + p.size].reshape(p.shape)
        pos += p.size


def check_encoder(rng, tol, h=1e-6):
    """Parameters and inputs of a small encoder under a random linear readout."""
    n, d_in = 4, 5
    enc = models.EncoderModel(d_in, (6,), 4, rng=rng)
    X = rng.normal(size=(n, d_in))
    G = rng.normal(size=(n, 4))
    keys, p0 = _flat_params(enc)

    def f(x):
        _set_flat(enc, keys, x[:p0.size])
        inp = x[p0.size:].reshape(n, d_in)
        feats, cache = models.encoder_forward(enc, inp)
        grads, g_in = models.encoder_backward(enc, cache, G, return_input_grad=True)
        return float(np.sum(G * feats)), np.concatenate([grads[k].ravel() for k in keys] + [g_in.ravel()])
    return finite_diff_check(f, np.concatenate([p0, X.ravel()]), h, tol, "encoder_backward")


def check_dnet_backward(rng, tol, h=1e-6):
    n, d = 5, 4
    net = models.DiscriminatorModel(d, 6, rng=rng)
    F = rng.normal(size=(n, d))
    g = rng.normal(size=n)
    keys, p0 = _flat_params(net)

    def f(x):
        _set_flat(net, keys, x[:p0.size])
        scores, cache = models.dnet_forward(net, x[p0.size:].reshape(n, d))
        grads, g_in = models.dnet_backward(net, cache, g)
        return float(g @ scores), np.concatenate([grads[k].ravel() for k in keys] + [g_in.ravel()])
    return finite_diff_check(f, np.concatenate([p0, F.ravel()]), h, tol, "dnet_backward")


CHECKS = {
    "go_loss": check_go,
    "lo_loss": check_lo,
    "dnet_loss": check_dnet,
    "dim_loss": check_dim,
    "ce_loss": check_ce,
    "encoder_backward": check_encoder,
    "dnet_backward": check_dnet_backward,
}


def go_push_numerator_note(seed: int = 0) -> dict:
    """Relative error of the alternative push coefficient that carries an extra sim(i, j).

    The alternative weighs negative k by ``sim(i,k) * sum_j c_j sim(i,j) / (sim(i,j) + S_n)``
    instead of ``sim(i,k) * sum_j c_j / (sim(i,j) + S_n)``. A moderate beta keeps
    the raw similarities finite.
    """
    rng = np.random.default_rng(seed)
    X, idx, bank, A, gaps, beta = _go_instance(rng, beta=1.0)
    res = go_loss(X, idx, bank, A, gaps, beta)
    U = X @ bank.rows.T / beta
    pos = A[idx]
    neg = ~pos
    neg[np.arange(len(idx)), idx] = False
    s = np.exp(U)
    sn = np.where(neg, s, 0.0).sum(axis=1)
    c = gaps.pair_weights(bank.camera_ids[idx], bank.camera_ids)
    inv_p = 1.0 / pos.sum(axis=1)
    alt_total = np.where(pos, c * s / (s + sn[:, None]), 0.0).sum(axis=1) * inv_p / beta
    alt_push = np.where(neg, s, 0.0) * alt_total[:, None]
    alt_grad = (res.aux["pull"] + alt_push) @ bank.rows

    def f(x):
        r = go_loss(x.reshape(X.shape), idx, bank, A, gaps, beta)
        return r.value, r.grads["anchors"].ravel()
    derived = finite_diff_check(f, X.ravel(), name="go_loss")
    return {
        "derived_max_rel_error": derived.max_rel_error,
        "alternative_max_rel_error": float(relative_error(alt_grad.ravel(), derived.numeric).max()),
    }


def run_suite(n_instances: int = 100, tol: float = 1e-5, seed: int = 0, checks=None) -> dict:
    """Run every check on ``n_instances`` seeded instances; returns a JSON-ready summary."""
    checks = CHECKS if checks is None else checks
    t0 = time.perf_counter()
    ss = np.random.SeedSequence(seed)
    out = {"tolerance": tol, "n_instances": n_instances, "checks": {}}
    for (name, fn), child in zip(checks.items(), ss.spawn(len(checks))):
        rng = np.random.default_rng(child)
        reports: list[GradCheckReport] = [fn(rng, tol) for _ in range(n_instances)]
        errs = [r.max_rel_error for r in reports]
        out["checks"][name] = {
            "passed": all(r.passed for r in reports),
            "n_failed": sum(not r.passed for r in reports),
            "max_rel_error": max(errs),
            "median_rel_error": float(np.median(errs)),
        }
    out["notes"] = {"go_push_numerator": go_push_numerator_note(seed)}
    out["passed"] = all(c["passed"] for c in out["checks"].values())
    out["seconds"] = time.perf_counter() - t0
    return out

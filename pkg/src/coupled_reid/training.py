"""The coupled training loop.

Each epoch starts with pseudo-label prediction on the memory bank. Each
iteration takes one Adam step on the discriminator (encoder frozen) and then one
Adam step on encoder + classifier for

    CE + lambda_dim * DIM + lambda_go * GO * [epoch >= go_start] + lambda_lo * LO

before the batch's target features are blended into the bank.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import camera, labels
from .core import EpochClock, FeatureBank, bank_init, bank_update
from .errors import BatchLargerThanSet, ConfigError, StaleAnnotation
from .evaluation import EvalResult, evaluate
from .models import (
    AdamState,
    ClassifierHead,
    DiscriminatorModel,
    EncoderModel,
    adam_step,
    classifier_backward,
    classifier_forward,
    dnet_backward,
    dnet_forward,
    encoder_backward,
    encoder_forward,
)
from .objectives import ce_loss, dim_loss, dnet_loss, go_loss, lo_loss
from .synthetic import Benchmark, LabeledDataset

logger = logging.getLogger(__name__)

MODES = ("adaptive", "unsupervised", "direct-transfer")


@dataclass
class TrainConfig:
    mode: str = "adaptive"
    alpha: float = 0.5
    beta: float = 0.05
    lambda_go: float = 0.1
    lambda_lo: float = 1.0
    lambda_dim: float = 0.05
    lambda_ce: float = 1.0
    source_batch: int = 32
    target_batch: int = 16
    augment_copies: int = 3
    augment_sigma: float = 0.05
    epochs: int = 60
    passes_per_epoch: int = 1
    anchor_mean: bool = True
    lo_mask_siblings: bool = True
    lr: float = 3.5e-4
    lr_decay: float = 0.1
    decay_every: int = 20
    go_start: int = 6
    k1: int = 20
    k2: int = 6
    lambda_rr: float = 0.3
    min_cluster_size: int = 4
    input_dim: int = 64
    hidden_dims: tuple = (128,)
    feature_dim: int = 32
    dnet_hidden: int = 64
    eval_every: int = 1
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("lambda_go", "lambda_lo", "lambda_dim", "lambda_ce"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")
        if self.source_batch < 1 or self.target_batch < 1 or self.augment_copies < 0:
            raise ConfigError("batch sizes must be >= 1 and augment copies >= 0")
        if self.epochs < 1 or self.decay_every < 1 or self.passes_per_epoch < 1:
            raise ConfigError("epochs and decay_every must be >= 1")
        return self

    def effective(self) -> "TrainConfig":
        """Apply the mode's loss switches."""
        self.validate()
        if self.mode == "unsupervised":
            return replace(self, lambda_dim=0.0, lambda_ce=0.0)
        if self.mode == "direct-transfer":
            return replace(self, lambda_go=0.0, lambda_lo=0.0, lambda_dim=0.0)
        return self

    @property
    def uses_source(self) -> bool:
        return self.mode != "unsupervised"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        d = dict(d)
        if "hidden_dims" in d:
            d["hidden_dims"] = tuple(d["hidden_dims"])
        return cls(**d).validate()


def desk_config(**overrides) -> TrainConfig:
    """Defaults shortened for the synthetic benchmark: 30 epochs at a 10x learning rate."""
    return replace(TrainConfig(epochs=30, lr=3.5e-3), **overrides).validate()


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step decay on the zero-based epoch index."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.lr_decay ** (epoch // config.decay_every)


@dataclass
class Batch:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    instance_ids: np.ndarray
    camera_ids: np.ndarray
    bank_indices: np.ndarray
    source_indices: np.ndarray = None

    @property
    def same_instance(self) -> np.ndarray:
        return self.instance_ids[:, None] == self.instance_ids[None, :]


def augment(x, copies: int, sigma: float, rng) -> np.ndarray:
    """Gaussian jitter, rescaled to each original row's norm."""
    if copies == 0:
        return np.empty((0, x.shape[1]))
    rep = np.repeat(x, copies, axis=0)
    noisy = rep + sigma * rng.normal(size=rep.shape)
    scale = np.linalg.norm(rep, axis=1, keepdims=True) / np.maximum(np.linalg.norm(noisy, axis=1, keepdims=True), 1e-12)
    return noisy * scale


def sample_batch(source: LabeledDataset | None, target: LabeledDataset, config: TrainConfig, rng,
                 source_idx=None, target_idx=None) -> Batch:
    """Build a batch; indices are drawn without replacement unless given."""
    if len(target) == 0 or (source is not None and len(source) == 0):
        raise BatchLargerThanSet("empty dataset")
    if target_idx is None:
        if config.target_batch > len(target):
            raise BatchLargerThanSet(f"target batch {config.target_batch} > {len(target)} samples")
        target_idx = rng.choice(len(target), config.target_batch, replace=False)
    target_idx = np.asarray(target_idx, dtype=np.int64)
    if source is not None and source_idx is None:
        if config.source_batch > len(source):
            raise BatchLargerThanSet(f"source batch {config.source_batch} > {len(source)} samples")
        source_idx = rng.choice(len(source), config.source_batch, replace=False)

    base = target.observations[target_idx]
    copies = config.augment_copies
    extra = augment(base, copies, config.augment_sigma, rng)
    # rows: originals first, then copies grouped by original
    tx = np.concatenate([base, extra])
    owner = np.concatenate([np.arange(len(target_idx)), np.repeat(np.arange(len(target_idx)), copies)])
    if source is None:
        sx, sy, source_idx = np.empty((0, target.observations.shape[1])), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    else:
        source_idx = np.asarray(source_idx, dtype=np.int64)
        sx, sy = source.observations[source_idx], source.labels[source_idx]
    return Batch(sx, sy, tx, target_idx[owner], target.camera_ids[target_idx][owner], target_idx[owner], source_idx)


@dataclass
class TrainState:
    encoder: EncoderModel
    dnet: DiscriminatorModel
    classifier: ClassifierHead | None
    adam_encoder: AdamState
    adam_dnet: AdamState
    adam_classifier: AdamState
    bank: FeatureBank
    annotation: np.ndarray
    gaps: camera.CameraGapTable
    clock: EpochClock
    rng: np.random.Generator
    label_map: dict = field(default_factory=dict)
    annotation_epoch: int = 0
    source_order: np.ndarray = None
    source_cursor: int = 0
    history: list = field(default_factory=list)
    last_losses: dict = field(default_factory=dict)
    last_grads: dict = field(default_factory=dict, repr=False)


def extract(encoder: EncoderModel, x, chunk: int = 4096) -> np.ndarray:
    return np.concatenate([encoder_forward(encoder, x[i:i + chunk])[0] for i in range(0, len(x), chunk)])


def init_state(bench: Benchmark, config: TrainConfig) -> TrainState:
    config = config.effective()
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    enc = EncoderModel(config.input_dim, config.hidden_dims, config.feature_dim, rng=np.random.default_rng(seeds[0]))
    dnet = DiscriminatorModel(config.feature_dim, config.dnet_hidden, rng=np.random.default_rng(seeds[1]))
    clf, label_map = None, {}
    if config.uses_source:
        ids = np.unique(bench.source.labels)
        label_map = {int(v): i for i, v in enumerate(ids)}
        clf = ClassifierHead(config.feature_dim, len(ids), rng=np.random.default_rng(seeds[2]))
    tgt = bench.target_train
    feats = extract(enc, tgt.observations)
    bank = bank_init(feats, tgt.camera_ids, tgt.domain_tags)
    gaps = camera.build_gap_table(bank.rows, bank.camera_ids)
    n = len(bank)
    return TrainState(
        encoder=enc, dnet=dnet, classifier=clf,
        adam_encoder=AdamState(lr=config.lr), adam_dnet=AdamState(lr=config.lr), adam_classifier=AdamState(lr=config.lr),
        bank=bank, annotation=np.zeros((n, n), dtype=bool), gaps=gaps, clock=EpochClock(),
        rng=np.random.default_rng(seeds[3]), label_map=label_map,
    )


def go_active(epoch: int, config: TrainConfig) -> bool:
    return config.lambda_go > 0 and epoch >= config.go_start


def train_iteration(state: TrainState, batch: Batch, config: TrainConfig) -> TrainState:
    config = config.effective()
    epoch = state.clock.epoch
    use_go = go_active(epoch, config)
    if use_go and state.annotation_epoch != epoch:
        raise StaleAnnotation(f"annotation from epoch {state.annotation_epoch}, current epoch {epoch}")
    lr = lr_schedule(max(epoch - 1, 0), config)
    for st in (state.adam_encoder, state.adam_dnet, state.adam_classifier):
        st.lr = lr

    n_src = len(batch.source_x)
    x = np.concatenate([batch.source_x, batch.target_x])
    feats, cache = encoder_forward(state.encoder, x)
    f_src, f_tgt = feats[:n_src], feats[n_src:]
    losses = {}
    grad = np.zeros_like(feats)

    use_dim = config.lambda_dim > 0 and n_src > 0
    if use_dim:
        scores, dcache = dnet_forward(state.dnet, feats)
        d = dnet_loss(scores[:n_src], scores[n_src:])
        dgrads, _ = dnet_backward(state.dnet, dcache, np.concatenate([d.grads["scores_src"], d.grads["scores_tgt"]]))
        adam_step(state.dnet.params, dgrads, state.adam_dnet)
        losses["dnet"] = d.value

        scores, dcache = dnet_forward(state.dnet, feats)
        dm = dim_loss(scores[:n_src], scores[n_src:])
        _, g_in = dnet_backward(state.dnet, dcache, np.concatenate([dm.grads["scores_src"], dm.grads["scores_tgt"]]))
        grad += config.lambda_dim * g_in
        losses["dim"] = dm.value

    clf_grads = None
    if config.lambda_ce > 0 and n_src > 0 and state.classifier is not None:
        logits, ccache = classifier_forward(state.classifier, f_src)
        y = np.array([state.label_map[int(v)] for v in batch.source_y])
        ce = ce_loss(logits, y)
        clf_grads, g_f = classifier_backward(state.classifier, ccache, ce.grads["logits"])
        clf_grads = {k: config.lambda_ce * v for k, v in clf_grads.items()}
        grad[:n_src] += config.lambda_ce * g_f
        losses["ce"] = ce.value

    # GO and LO are sums over anchors; CE, DNet and DIM are batch means
    anchor_scale = len(f_tgt) if config.anchor_mean else 1
    go_grad = np.zeros_like(f_tgt)
    if use_go and state.annotation.any():
        go = go_loss(f_tgt, batch.bank_indices, state.bank, state.annotation, state.gaps, config.beta)
        go_grad = config.lambda_go * go.grads["anchors"] / anchor_scale
        losses["go"] = go.value
    grad[n_src:] += go_grad

    if config.lambda_lo > 0:
        lo = lo_loss(f_tgt, batch.same_instance if config.lo_mask_siblings else None, config.beta)
        grad[n_src:] += config.lambda_lo * lo.grads["batch"] / anchor_scale
        losses["lo"] = lo.value

    enc_grads = encoder_backward(state.encoder, cache, grad)
    adam_step(state.encoder.params, enc_grads, state.adam_encoder)
    if clf_grads is not None:
        adam_step(state.classifier.params, clf_grads, state.adam_classifier)

    bank_update(state.bank, batch.bank_indices, f_tgt, state.clock)
    state.clock.tick()
    state.last_losses = losses
    state.last_grads = {"go": go_grad}
    return state


def predict_annotation(state: TrainState, config: TrainConfig, truth=None) -> dict:
    pred = labels.predict_labels(state.bank.rows, config.alpha, config.k1, config.k2, config.lambda_rr, config.min_cluster_size)
    state.annotation = pred.positive
    camera.refresh_base_weight(state.gaps, pred.positive, state.bank.camera_ids)
    info = {
        "n_clusters": int(pred.clusters.max() + 1) if pred.clusters.size else 0,
        "n_pos_pairs": int(np.triu(pred.positive, 1).sum()),
        "base_weight": state.gaps.base_weight,
    }
    if truth is not None:
        pm = labels.pair_metrics(pred.positive, truth)
        info.update(pair_precision=pm.precision, pair_recall=pm.recall)
    return info


def _next_source(state: TrainState, n_source: int, k: int) -> np.ndarray:
    if k > n_source:
        raise BatchLargerThanSet(f"source batch {k} > {n_source} samples")
    if state.source_order is None or state.source_cursor + k > len(state.source_order):
        state.source_order = state.rng.permutation(n_source)
        state.source_cursor = 0
    out = state.source_order[state.source_cursor:state.source_cursor + k]
    state.source_cursor += k
    return out


def evaluate_model(encoder: EncoderModel, bench: Benchmark) -> EvalResult:
    q, g = bench.query, bench.gallery
    return evaluate(extract(encoder, q.observations), q.labels, q.camera_ids,
                    extract(encoder, g.observations), g.labels, g.camera_ids)


def train_epoch(state: TrainState, bench: Benchmark, config: TrainConfig) -> dict:
    config = config.effective()
    state.clock.advance_epoch()
    epoch = state.clock.epoch
    metrics = {"epoch": epoch, "lr": lr_schedule(epoch - 1, config)}
    if go_active(epoch, config):
        metrics.update(predict_annotation(state, config, bench.target_train.labels))
        state.annotation_epoch = epoch

    target = bench.target_train
    source = bench.source if config.uses_source else None
    if config.target_batch > len(target):
        raise BatchLargerThanSet(f"target batch {config.target_batch} > {len(target)} samples")
    per_pass = len(target) // config.target_batch
    orders = [state.rng.permutation(len(target)) for _ in range(config.passes_per_epoch)]
    n_iter = per_pass * config.passes_per_epoch
    sums: dict = {}
    for it in range(n_iter):
        order = orders[it // per_pass]
        start = (it % per_pass) * config.target_batch
        t_idx = order[start:start + config.target_batch]
        s_idx = _next_source(state, len(source), config.source_batch) if source is not None else None
        batch = sample_batch(source, target, config, state.rng, source_idx=s_idx, target_idx=t_idx)
        train_iteration(state, batch, config)
        for k, v in state.last_losses.items():
            sums[k] = sums.get(k, 0.0) + v
    for k in ("ce", "dnet", "dim", "go", "lo"):
        metrics[f"loss_{k}"] = sums[k] / n_iter if k in sums else float("nan")

    if config.eval_every and (epoch % config.eval_every == 0 or epoch == config.epochs):
        metrics.update(evaluate_model(state.encoder, bench).to_dict())
    state.history.append(metrics)
    return metrics


def fit(bench: Benchmark, config: TrainConfig, callback=None) -> TrainState:
    config = config.effective()
    state = init_state(bench, config)
    for _ in range(config.epochs):
        m = train_epoch(state, bench, config)
        logger.info("epoch %d %s", m["epoch"], {k: round(v, 4) for k, v in m.items() if isinstance(v, float)})
        if callback is not None:
            callback(state, m)
    return state


def probe_domain_accuracy(features_train_src, features_train_tgt, features_test_src, features_test_tgt,
                          steps: int = 300, lr: float = 1e-2, seed: int = 0) -> float:
    """Train a fresh discriminator on one split and report held-out domain accuracy."""
    probe = DiscriminatorModel(features_train_src.shape[1], 64, rng=np.random.default_rng(seed))
    st = AdamState(lr=lr)
    x = np.concatenate([features_train_src, features_train_tgt])
    n_src = len(features_train_src)
    for _ in range(steps):
        scores, cache = dnet_forward(probe, x)
        res = dnet_loss(scores[:n_src], scores[n_src:])
        grads, _ = dnet_backward(probe, cache, np.concatenate([res.grads["scores_src"], res.grads["scores_tgt"]]))
        adam_step(probe.params, grads, st)
    s_src = dnet_forward(probe, features_test_src)[0]
    s_tgt = dnet_forward(probe, features_test_tgt)[0]
    correct = np.sum(s_src > 0.5) + np.sum(s_tgt <= 0.5)
    return float(correct / (len(s_src) + len(s_tgt)))

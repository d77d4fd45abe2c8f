"""Seeded two-domain re-identification benchmarks in input space.

An observation of identity ``k`` seen by camera ``c`` is::

    x = Q_c (R (p_k + eps) + o) + b_c

with ``p_k`` a prototype on the unit sphere, ``eps ~ N(0, sigma^2 I)`` plus an
optional low-rank nuisance term whose subspace is fixed by ``basis_seed``
(so source and target can share it before the shift), ``(R, o)``
the domain shift (identity for an unshifted domain) and ``(Q_c, b_c)`` a
near-identity orthogonal camera map whose deviation grows with the camera's scale.
With ``identity_rank`` set, prototypes live in a subspace orthogonal to the
nuisance one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import SOURCE, TARGET
from .errors import InvalidSpec


@dataclass
class DomainSpec:
    n_ids: int = 40
    imgs_per_id: int = 20
    n_cameras: int = 4
    dim: int = 32
    camera_scales: tuple = (0.0, 0.3, 0.6, 0.9)
    camera_bias: float = 0.5
    noise_sigma: float = 0.1
    nuisance_rank: int = 0
    nuisance_scale: float = 0.0
    identity_rank: int = 0
    basis_seed: int = 0
    shift_strength: float = 0.0
    shift_offset: float = 0.0
    id_offset: int = 0
    domain: str = SOURCE

    def validate(self) -> None:
        if self.n_ids < 2:
            raise InvalidSpec("need at least two identities")
        if self.n_cameras < 2:
            raise InvalidSpec("need at least two cameras")
        if self.imgs_per_id < 2:
            raise InvalidSpec("need at least two images per identity")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise sigma must be nonnegative")
        if len(self.camera_scales) != self.n_cameras:
            raise InvalidSpec("one camera scale per camera is required")
        if self.nuisance_rank < 0 or self.identity_rank < 0 or self.nuisance_scale < 0:
            raise InvalidSpec("subspace ranks and nuisance scale must be nonnegative")
        if self.nuisance_rank + self.identity_rank > self.dim:
            raise InvalidSpec("nuisance and identity subspaces do not fit in dim")
        if self.dim < 2:
            raise InvalidSpec("dim must be at least 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["camera_scales"] = list(self.camera_scales)
        return d


@dataclass
class LabeledDataset:
    observations: np.ndarray
    labels: np.ndarray
    camera_ids: np.ndarray
    domain: str

    def __len__(self) -> int:
        return len(self.observations)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.observations[idx], self.labels[idx], self.camera_ids[idx], self.domain)

    @property
    def domain_tags(self) -> np.ndarray:
        return np.full(len(self), self.domain)


@dataclass
class Benchmark:
    source: LabeledDataset
    source_heldout: LabeledDataset
    target_train: LabeledDataset
    query: LabeledDataset
    gallery: LabeledDataset
    meta: dict = field(default_factory=dict)


def _cayley(skew: np.ndarray) -> np.ndarray:
    eye = np.eye(len(skew))
    return np.linalg.solve(eye - skew, eye + skew)


def _random_skew(rng, dim) -> np.ndarray:
    g = rng.normal(size=(dim, dim))
    s = (g - g.T) / 2.0
    return s / np.linalg.norm(s, 2)


def _unit_rows(rng, n, dim) -> np.ndarray:
    g = rng.normal(size=(n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def camera_transforms(spec: DomainSpec, rng):
    """Orthogonal Cayley perturbations and biases, both scaled per camera."""
    mats, biases = [], []
    for scale in spec.camera_scales:
        skew = _random_skew(rng, spec.dim)
        direction = _unit_rows(rng, 1, spec.dim)[0]
        mats.append(_cayley(0.5 * scale * skew))
        biases.append(spec.camera_bias * scale * direction)
    return np.stack(mats), np.stack(biases)


def domain_shift(spec: DomainSpec, rng):
    skew = _random_skew(rng, spec.dim)
    direction = _unit_rows(rng, 1, spec.dim)[0]
    return _cayley(0.5 * spec.shift_strength * skew), spec.shift_offset * direction


def generate_domain(spec: DomainSpec, rng) -> LabeledDataset:
    spec.validate()
    rng = np.random.default_rng(rng)
    r_proto, r_cam, r_shift, r_assign, r_noise, r_nuis = rng.spawn(6)
    # subspaces come from their own seed so two domains can share them
    basis = np.linalg.qr(np.random.default_rng(spec.basis_seed).normal(size=(spec.dim, spec.dim)))[0]
    nuisance = basis[:, :spec.nuisance_rank]
    if spec.identity_rank:
        ident = basis[:, spec.nuisance_rank:spec.nuisance_rank + spec.identity_rank]
        protos = _unit_rows(r_proto, spec.n_ids, spec.identity_rank) @ ident.T
    else:
        protos = _unit_rows(r_proto, spec.n_ids, spec.dim)
    cam_mats, cam_bias = camera_transforms(spec, r_cam)
    R, offset = domain_shift(spec, r_shift)

    labels = np.repeat(np.arange(spec.n_ids), spec.imgs_per_id)
    cams = np.empty_like(labels)
    for k in range(spec.n_ids):
        perm = r_assign.permutation(spec.n_cameras)
        cams[k * spec.imgs_per_id:(k + 1) * spec.imgs_per_id] = perm[np.arange(spec.imgs_per_id) % spec.n_cameras]
    latent = protos[labels] + spec.noise_sigma * r_noise.normal(size=(len(labels), spec.dim))
    if spec.nuisance_rank:
        latent += spec.nuisance_scale * r_nuis.normal(size=(len(labels), spec.nuisance_rank)) @ nuisance.T
    shifted = latent @ R.T + offset
    obs = np.einsum("nij,nj->ni", cam_mats[cams], shifted) + cam_bias[cams]
    return LabeledDataset(obs, labels + spec.id_offset, cams, spec.domain)


def split_query_gallery(data: LabeledDataset, rng):
    """One query per (identity, camera); everything else goes to the gallery."""
    rng = np.random.default_rng(rng)
    query = []
    for ident in np.unique(data.labels):
        for cam in np.unique(data.camera_ids[data.labels == ident]):
            members = np.flatnonzero((data.labels == ident) & (data.camera_ids == cam))
            query.append(int(rng.choice(members)))
    query = np.array(sorted(query))
    gallery = np.setdiff1d(np.arange(len(data)), query)
    return data.subset(query), data.subset(gallery)


def make_benchmark(source_spec: DomainSpec, target_spec: DomainSpec, rng, eval_fraction: float = 0.5,
                   source_heldout_per_id: int = 4) -> Benchmark:
    """Source train/held-out sets, target train set and target query/gallery.

    Target identities are split: the first part is the unlabeled training set,
    the rest is the evaluation set. Source held-out images come from extra
    draws of the source identities.
    """
    s_lo, s_hi = source_spec.id_offset, source_spec.id_offset + source_spec.n_ids
    t_lo, t_hi = target_spec.id_offset, target_spec.id_offset + target_spec.n_ids
    if s_lo < t_hi and t_lo < s_hi:
        raise InvalidSpec("source and target identity ranges must be disjoint")
    rng = np.random.default_rng(rng)
    r_src, r_tgt, r_split = rng.spawn(3)

    src_spec = DomainSpec(**{**source_spec.to_dict(), "camera_scales": tuple(source_spec.camera_scales),
                             "imgs_per_id": source_spec.imgs_per_id + source_heldout_per_id})
    src_all = generate_domain(src_spec, r_src)
    per_id = src_spec.imgs_per_id
    pos = np.arange(len(src_all)) % per_id
    source = src_all.subset(np.flatnonzero(pos < source_spec.imgs_per_id))
    source_heldout = src_all.subset(np.flatnonzero(pos >= source_spec.imgs_per_id))

    tgt = generate_domain(target_spec, r_tgt)
    n_eval = max(1, int(round(eval_fraction * target_spec.n_ids)))
    n_train = target_spec.n_ids - n_eval
    if n_train < 1:
        raise InvalidSpec("eval_fraction leaves no target training identities")
    train_mask = tgt.labels < t_lo + n_train
    target_train = tgt.subset(np.flatnonzero(train_mask))
    query, gallery = split_query_gallery(tgt.subset(np.flatnonzero(~train_mask)), r_split)
    meta = {"source_spec": source_spec.to_dict(), "target_spec": target_spec.to_dict(),
            "eval_fraction": eval_fraction, "n_target_train_ids": n_train}
    return Benchmark(source, source_heldout, target_train, query, gallery, meta)


def default_specs() -> tuple[DomainSpec, DomainSpec]:
    """The default two-domain benchmark.

    Source identities live in a 32-d subspace next to a strong 32-d nuisance
    subspace, so a source-trained encoder learns to suppress the latter. The
    target has no nuisance but a large rotation that moves part of its identity
    signal into the suppressed directions.
    """
    common = dict(dim=64, identity_rank=32, nuisance_rank=32, noise_sigma=0.1)
    source = DomainSpec(n_ids=100, imgs_per_id=8, nuisance_scale=1.0, domain=SOURCE, **common)
    target = DomainSpec(n_ids=200, imgs_per_id=6, nuisance_scale=0.0, camera_scales=(0.0, 0.1, 0.2, 0.3),
                        shift_strength=2.0, shift_offset=0.5, id_offset=10000, domain=TARGET, **common)
    return source, target


def default_benchmark(seed: int = 0) -> Benchmark:
    return make_benchmark(*default_specs(), seed)

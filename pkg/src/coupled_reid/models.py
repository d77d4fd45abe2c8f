"""Small numpy networks with hand-written backward passes, and Adam.

Layers compute ``x @ W + b`` on row batches. Parameters live in plain dicts of
float64 arrays so the optimizer and checkpoint code can treat every model alike.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheMismatch, NonFiniteInput, ShapeMismatch

NORM_EPS = 1e-12


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def relu(x):
    return np.maximum(x, 0.0)


class Model:
    params: dict

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


class EncoderModel(Model):
    """MLP input_dim -> hidden_dims (ReLU) -> feature_dim, L2-normalized output."""

    def __init__(self, input_dim=32, hidden_dims=(64,), feature_dim=64, rng=None):
        rng = np.random.default_rng(rng)
        self.dims = [int(input_dim), *map(int, hidden_dims), int(feature_dim)]
        self.params = {}
        for layer, (a, b) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            self.params[f"W{layer}"] = _uniform(rng, a, (a, b))
            self.params[f"b{layer}"] = _uniform(rng, a, (b,))

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def feature_dim(self) -> int:
        return self.dims[-1]


def encoder_forward(model: EncoderModel, inputs):
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("encoder input contains NaN or inf")
    if x.shape[1] != model.dims[0]:
        raise ShapeMismatch(f"expected input dim {model.dims[0]}, got {x.shape[1]}")
    acts = [x]
    pre = []
    h = x
    for layer in range(model.n_layers):
        z = h @ model.params[f"W{layer}"] + model.params[f"b{layer}"]
        pre.append(z)
        h = relu(z) if layer < model.n_layers - 1 else z
        acts.append(h)
    norm = np.linalg.norm(h, axis=1, keepdims=True)
    feats = h / (norm + NORM_EPS)
    cache = {"acts": acts, "pre": pre, "norm": norm, "model_id": id(model), "n": len(x)}
    return feats, cache


def normalize_backward(z, norm, grad_out):
    """Gradient through z / (|z| + eps)."""
    denom = norm + NORM_EPS
    dot = np.sum(z * grad_out, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return grad_out / denom - z * dot / (denom**2 * safe) * (norm > 0)


def encoder_backward(model: EncoderModel, cache, grad_features, return_input_grad=False):
    g = np.atleast_2d(np.asarray(grad_features, dtype=np.float64))
    if cache.get("model_id") != id(model) or g.shape != (cache["n"], model.feature_dim):
        raise CacheMismatch("cache does not belong to this model/batch")
    acts, pre = cache["acts"], cache["pre"]
    g = normalize_backward(acts[-1], cache["norm"], g)
    grads = {}
    for layer in reversed(range(model.n_layers)):
        if layer < model.n_layers - 1:
            g = g * (pre[layer] > 0)
        grads[f"W{layer}"] = acts[layer].T @ g
        grads[f"b{layer}"] = g.sum(axis=0)
        g = g @ model.params[f"W{layer}"].T
    if return_input_grad:
        return grads, g
    return grads


class DiscriminatorModel(Model):
    """feature_dim -> hidden (ReLU) -> 1, linear score."""

    def __init__(self, feature_dim=64, hidden=64, rng=None):
        rng = np.random.default_rng(rng)
        self.feature_dim = int(feature_dim)
        self.hidden = int(hidden)
        self.params = {
            "W1": _uniform(rng, feature_dim, (feature_dim, hidden)),
            "b1": _uniform(rng, feature_dim, (hidden,)),
            "W2": _uniform(rng, hidden, (hidden, 1)),
            "b2": _uniform(rng, hidden, (1,)),
        }


def dnet_forward(model: DiscriminatorModel, features):
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    z = f @ model.params["W1"] + model.params["b1"]
    h = relu(z)
    scores = (h @ model.params["W2"] + model.params["b2"]).ravel()
    return scores, {"f": f, "z": z, "h": h, "model_id": id(model)}


def dnet_backward(model: DiscriminatorModel, cache, grad_scores):
    """Returns (parameter gradients, input-feature gradients)."""
    g = np.asarray(grad_scores, dtype=np.float64).reshape(-1, 1)
    if cache.get("model_id") != id(model) or len(g) != len(cache["f"]):
        raise CacheMismatch("cache does not belong to this model/batch")
    grads = {"W2": cache["h"].T @ g, "b2": g.sum(axis=0)}
    gz = (g @ model.params["W2"].T) * (cache["z"] > 0)
    grads["W1"] = cache["f"].T @ gz
    grads["b1"] = gz.sum(axis=0)
    return grads, gz @ model.params["W1"].T


class ClassifierHead(Model):
    def __init__(self, feature_dim=64, n_classes=2, rng=None):
        rng = np.random.default_rng(rng)
        self.feature_dim = int(feature_dim)
        self.n_classes = int(n_classes)
        self.params = {
            "W": _uniform(rng, feature_dim, (feature_dim, n_classes)),
            "b": np.zeros(n_classes),
        }


def classifier_forward(model: ClassifierHead, features):
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return f @ model.params["W"] + model.params["b"], {"f": f, "model_id": id(model)}


def classifier_backward(model: ClassifierHead, cache, grad_logits):
    g = np.atleast_2d(np.asarray(grad_logits, dtype=np.float64))
    if cache.get("model_id") != id(model) or len(g) != len(cache["f"]):
        raise CacheMismatch("cache does not belong to this model/batch")
    return {"W": cache["f"].T @ g, "b": g.sum(axis=0)}, g @ model.params["W"].T


# --- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 3.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """Bias-corrected Adam update applied in place to ``params``."""
    for k, g in grads.items():
        if k not in params or params[k].shape != np.shape(g):
            raise ShapeMismatch(f"gradient block {k!r} does not match its parameter")
    state.step += 1
    t = state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * np.square(g)
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# --- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"CRID"
CKPT_VERSION = 1


def save_checkpoint(path, models: dict) -> None:
    """Write named parameter blocks: magic, version, then per block a name, shape header and float64 data."""
    with open(path, "wb") as fh:
        blocks = [(f"{m}.{k}", np.ascontiguousarray(v, dtype="<f8")) for m, model in models.items() for k, v in model.params.items()]
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blocks)))
        for name, arr in blocks:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    """Return {model_name: {block: array}}."""
    out: dict = {}
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
            model, block = name.split(".", 1)
            out.setdefault(model, {})[block] = arr
    return out

"""Category-proxy refinement of pseudo-labels.

A small conv embedder maps 32x32 object crops to unit vectors.  It is
trained once on labeled ground-truth crops with a one-vs-all classification
head, then frozen.  Per-category proxies are the mean embedding of that
category's labeled crops.  During semi-supervised training, each foreground
pseudo-label's crop is embedded and compared to its category proxy by cosine
similarity; below the gate the instance is demoted to ignorable (never
deleted, never re-scored), which keeps a confidently-wrong box out of the
loss while leaving detection targets otherwise untouched.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import tensor as T
from . import tensorio
from .data import CATEGORY_NAMES, NUM_CATEGORIES, bilinear_resize
from .model import FOREGROUND_REGION, IGNORABLE_REGION

CROP_SIZE = 32
EMBED_DIM = 32
GATE_DEFAULT = 0.6


class MissingCategoryError(ValueError):
    """Raised when proxies are requested for categories with no labeled crops."""


def _he(rng, shape, dtype=np.float32):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)


def init_embedder(seed, dim=EMBED_DIM, num_classes=NUM_CATEGORIES):
    rng = np.random.default_rng(seed)
    p = {}

    def conv(name, oc, ic, k):
        p[name + ".w"] = T.parameter(_he(rng, (oc, ic, k, k)))
        p[name + ".b"] = T.parameter(np.zeros(oc, dtype=np.float32))

    conv("emb.c1", 16, 3, 3)
    conv("emb.c2", 32, 16, 3)
    conv("emb.c3", 32, 32, 3)
    conv("emb.proj", dim, 32, 1)
    conv("emb.fc", num_classes, dim, 1)
    return p


def _features(x, params, groups=8):
    """Crop batch -> unnormalized embedding Tensor [n, dim, 1, 1]."""
    t = x if isinstance(x, T.Tensor) else T.Tensor(np.ascontiguousarray(x, dtype=np.float32))
    if t.ndim != 4 or t.shape[1:] != (3, CROP_SIZE, CROP_SIZE):
        raise ValueError(f"embedder wants [n,3,{CROP_SIZE},{CROP_SIZE}] crops, got {t.shape}")
    for name in ("emb.c1", "emb.c2", "emb.c3"):
        t = T.conv2d(t, params[name + ".w"], params[name + ".b"], stride=2, padding=1)
        t = T.relu(T.group_norm(t, groups))
    t = T.reduce_mean(t, axis=(2, 3), keepdims=True)
    return T.conv2d(t, params["emb.proj.w"], params["emb.proj.b"])


def class_logits(x, params):
    emb = _features(x, params)
    logits = T.conv2d(emb, params["emb.fc.w"], params["emb.fc.b"])
    return T.reshape(logits, (logits.shape[0], logits.shape[1]))


def embed(crops, params):
    """Unit-norm embeddings as a plain [n, dim] array (no graph)."""
    with T.no_grad():
        f = _features(crops, params).data.reshape(len(crops), -1)
    norm = np.sqrt((f * f).sum(axis=1, keepdims=True))
    return f / np.maximum(norm, 1e-8)


def crop_box(image, box, out=CROP_SIZE):
    """Cut an axis-aligned box out of a CHW image and resize to out x out."""
    _, ih, iw = image.shape
    x1 = int(np.clip(np.floor(box[0]), 0, iw - 1))
    y1 = int(np.clip(np.floor(box[1]), 0, ih - 1))
    x2 = int(np.clip(np.ceil(box[2]), 0, iw))
    y2 = int(np.clip(np.ceil(box[3]), 0, ih))
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"degenerate crop {box} inside {iw}x{ih} image")
    return bilinear_resize(np.ascontiguousarray(image[:, y1:y2, x1:x2]), out, out)


def train_embedder(crops, labels, seed, steps=300, lr=0.01, momentum=0.9, batch=32):
    """Fit the embedder on labeled crops with one-vs-all BCE; returns params."""
    crops = np.asarray(crops, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(crops) == 0:
        raise ValueError("cannot train the embedder with zero crops")
    params = init_embedder(seed)
    onehot = np.eye(NUM_CATEGORIES, dtype=np.float32)[labels]
    velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
    seed_key = [int(s) for s in np.atleast_1d(seed)]
    for step in range(steps):
        rng = np.random.default_rng(seed_key + [step])
        take = rng.integers(0, len(crops), size=min(batch, len(crops)))
        z = class_logits(crops[take], params)
        # bce from logits: softplus(z) - z*y, softplus via relu + log1p(exp(-|z|))
        az = T.maximum(z, T.mul(z, -1.0))
        sp = T.add(T.relu(z), T.log(T.add(T.exp(T.mul(az, -1.0)), 1.0)))
        loss = T.reduce_mean(T.sub(sp, T.mul(z, onehot[take])))
        T.zero_grads(params.values())
        loss.backward()
        for k, p in params.items():
            g = p.grad if p.grad is not None else 0.0
            velocity[k] = momentum * velocity[k] + g
            p.data -= lr * velocity[k]
    return params


@dataclasses.dataclass
class ProxyTable:
    """Per-category mean embeddings plus how many crops built each."""

    vectors: np.ndarray  # [num_classes, dim]
    counts: np.ndarray   # [num_classes]

    def save(self, dirpath):
        tensorio.save_bundle(dirpath, {"vectors": self.vectors, "counts": self.counts},
                             extra={"kind": "proxy-table"})

    @classmethod
    def load(cls, dirpath):
        arrays, extra = tensorio.load_bundle(dirpath)
        if extra.get("kind") != "proxy-table":
            raise tensorio.TensorFormatError(f"{dirpath}: bundle is not a proxy table")
        return cls(vectors=arrays["vectors"], counts=arrays["counts"].astype(np.int64))


def compute_proxies(crops, labels, params, num_classes=NUM_CATEGORIES):
    """Mean unit embedding per category over labeled crops."""
    labels = np.asarray(labels, dtype=np.int64)
    feats = embed(np.asarray(crops, dtype=np.float32), params)
    vectors = np.zeros((num_classes, feats.shape[1]), dtype=np.float32)
    counts = np.zeros(num_classes, dtype=np.int64)
    for k in range(num_classes):
        sel = labels == k
        counts[k] = int(sel.sum())
        if counts[k]:
            vectors[k] = feats[sel].mean(axis=0)
    missing = [CATEGORY_NAMES[k] for k in range(num_classes) if counts[k] == 0]
    if missing:
        raise MissingCategoryError(
            f"no labeled crops for: {', '.join(missing)}; proxies would be undefined"
        )
    return ProxyTable(vectors=vectors, counts=counts)


def similarity(embeddings, proxies: ProxyTable, categories):
    """Cosine similarity of each embedding to its own category proxy."""
    vecs = proxies.vectors[np.asarray(categories, dtype=np.int64)]
    norm = np.sqrt((vecs * vecs).sum(axis=1))
    dots = (embeddings * vecs).sum(axis=1)
    return dots / np.maximum(norm, 1e-8)


def refine(instances, image, proxies: ProxyTable, params, gate=GATE_DEFAULT):
    """Demote foreground pseudo-labels whose crop drifts from the proxy.

    Returns a new instance list; boxes, categories and scores are never
    modified, only the region kind may change (foreground -> ignorable).
    """
    if not (0.0 <= gate <= 1.0):
        raise ValueError(f"similarity gate must lie in [0, 1], got {gate}")
    fg_idx = [i for i, inst in enumerate(instances) if inst.region == FOREGROUND_REGION]
    if not fg_idx:
        return list(instances)
    crops = np.stack([crop_box(image, instances[i].box) for i in fg_idx])
    sims = similarity(embed(crops, params), proxies,
                      [instances[i].category for i in fg_idx])
    out = list(instances)
    for j, i in enumerate(fg_idx):
        if sims[j] < gate:
            out[i] = dataclasses.replace(out[i], region=IGNORABLE_REGION)
    return out

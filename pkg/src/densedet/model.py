"""Anchor-free pyramid detector over the autodiff tensor core.

Architecture, bottom to top:

* stem: 3x3 stride-2 conv;
* three stages, each a 3x3 stride-2 downsampling conv followed by
  pre-activation residual blocks that carry a recurrent hidden state
  alongside the feature path (``rla_block``); the two hidden-path convs of a
  stage are shared by all its blocks and start at zero, so an untrained or
  disabled hidden path leaves the network exactly a plain residual net;
* a small top-down neck (1x1 laterals, nearest x2 upsampling, 3x3 smoothing)
  emitting one map per stride;
* one shared head: two conv+norm+relu layers per branch, then per-pixel class
  logits, a centerness logit, and four log-distance channels decoded as
  ``exp(raw) * stride`` pixels to the box edges.

Per-pixel supervision follows the usual anchor-free recipe: a pixel at center
``((x + 0.5) * stride, (y + 0.5) * stride)`` is positive for the smallest
ground-truth box containing it whose largest edge distance falls in the
level's range; everything else is background.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import tensor as T
from .augment import AugmentRecord, apply_record_to_grid, permute_grid_array
from .data import NUM_CATEGORIES, Annotation

BACKGROUND = NUM_CATEGORIES   # category id used for background pixels
IGNORE = -1                   # category id for pixels excluded from the loss

FOREGROUND_REGION = "foreground"
IGNORABLE_REGION = "ignorable"
BACKGROUND_REGION = "background"


@dataclasses.dataclass
class Instance:
    """One detected or pseudo-labeled object."""

    category: int
    box: tuple          # (x1, y1, x2, y2) pixels
    score: float
    region: str = FOREGROUND_REGION


@dataclasses.dataclass(frozen=True)
class ArchConfig:
    widths: tuple = (16, 32, 64)
    neck_width: int = 32
    num_classes: int = NUM_CATEGORIES
    blocks_per_stage: int = 2
    groups: int = 8
    head_convs: int = 2
    strides: tuple = (4, 8, 16)
    prior: float = 0.01


DEFAULT_ARCH = ArchConfig()


@dataclasses.dataclass(frozen=True)
class PyramidGeometry:
    """Strides, map shapes and regression ranges for one image size."""

    image_size: int
    strides: tuple
    shapes: tuple        # ((h, w), ...) per level
    ranges: tuple        # ((lo, hi), ...) pixels; hi may be inf

    @classmethod
    def build(cls, image_size, strides=(4, 8, 16), base_ranges=((0, 32), (32, 64), (64, math.inf)), base_size=128):
        if image_size % max(strides):
            raise ValueError(f"image size {image_size} not divisible by stride {max(strides)}")
        scale = image_size / base_size
        ranges = tuple((lo * scale, hi * scale if math.isfinite(hi) else math.inf)
                       for lo, hi in base_ranges)
        shapes = tuple((image_size // s, image_size // s) for s in strides)
        return cls(image_size=image_size, strides=tuple(strides), shapes=shapes, ranges=ranges)

    @property
    def num_levels(self):
        return len(self.strides)

    def levels(self):
        """[(stride, h, w), ...] convenience view."""
        return [(s, h, w) for s, (h, w) in zip(self.strides, self.shapes)]

    def centers(self, level):
        """Pixel-center coordinate grids (cx [w], cy [h]) for one level."""
        s = self.strides[level]
        h, w = self.shapes[level]
        cx = (np.arange(w, dtype=np.float64) + 0.5) * s
        cy = (np.arange(h, dtype=np.float64) + 0.5) * s
        return cx, cy


@dataclasses.dataclass
class DenseTargets:
    """Per-level training targets on the prediction grids.

    ``cat`` holds the category id, BACKGROUND for negatives and IGNORE for
    pixels excluded from every loss term.  ``dist`` (stride-normalized edge
    distances) and ``ctr`` are meaningful only where ``cat`` is a real
    category; elsewhere they hold neutral fill values.
    """

    cat: list    # per level: int32 [..., h, w]
    dist: list   # per level: float32 [..., 4, h, w]
    ctr: list    # per level: float32 [..., h, w]

    def num_positive(self):
        return int(sum(((c >= 0) & (c < BACKGROUND)).sum() for c in self.cat))


def stack_targets(items):
    """Stack per-image targets into one batched DenseTargets."""
    levels = len(items[0].cat)
    return DenseTargets(
        cat=[np.stack([t.cat[l] for t in items]) for l in range(levels)],
        dist=[np.stack([t.dist[l] for t in items]) for l in range(levels)],
        ctr=[np.stack([t.ctr[l] for t in items]) for l in range(levels)],
    )


@dataclasses.dataclass
class HeadOutput:
    """Raw per-level predictions; dist is in pixels and strictly positive."""

    cls: list    # Tensor [b, C, h, w]
    ctr: list    # Tensor [b, 1, h, w]
    dist: list   # Tensor [b, 4, h, w]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _he(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)


def init_params(seed, arch: ArchConfig = DEFAULT_ARCH, dtype=np.float32):
    """Fresh parameter set as a flat name -> Tensor dict."""
    rng = np.random.default_rng(seed)
    p: dict[str, T.Tensor] = {}

    def conv(name, oc, ic, k, zero=False, bias=0.0):
        w = np.zeros((oc, ic, k, k), dtype=dtype) if zero else _he(rng, (oc, ic, k, k), dtype)
        p[name + ".w"] = T.parameter(w, dtype)
        p[name + ".b"] = T.parameter(np.full(oc, bias, dtype=dtype), dtype)

    w0, w1, w2 = arch.widths
    conv("stem", w0, 3, 3)
    prev = w0
    for i, width in enumerate(arch.widths, start=1):
        conv(f"s{i}.down", width, prev, 3)
        for j in range(1, arch.blocks_per_stage + 1):
            conv(f"s{i}.b{j}.theta", width, width, 3)
        conv(f"s{i}.g1", width, width, 1)
        conv(f"s{i}.g2", width, width, 3, zero=True)  # hidden path starts inert
        prev = width
    for i, width in enumerate(arch.widths, start=1):
        conv(f"neck.lat{i}", arch.neck_width, width, 1)
        conv(f"neck.smooth{i}", arch.neck_width, arch.neck_width, 3)
    for k in range(1, arch.head_convs + 1):
        conv(f"head.cls{k}", arch.neck_width, arch.neck_width, 3)
        conv(f"head.reg{k}", arch.neck_width, arch.neck_width, 3)
    conv("head.cls_pred", arch.num_classes, arch.neck_width, 3,
         bias=-math.log((1.0 - arch.prior) / arch.prior))
    conv("head.ctr_pred", 1, arch.neck_width, 3)
    conv("head.reg_pred", 4, arch.neck_width, 3)
    return p


def copy_param_data(params):
    """Detached numpy copies of every parameter (teacher/checkpoint use)."""
    return {k: v.data.copy() for k, v in params.items()}


def params_from_arrays(arrays, dtype=None):
    return {k: T.parameter(v if dtype is None else v.astype(dtype)) for k, v in arrays.items()}


def num_params(params):
    return int(sum(v.data.size for v in params.values()))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _gn_relu(x, groups):
    return T.relu(T.group_norm(x, groups))


def rla_block(x, h, theta, hidden=None):
    """One feature/hidden update: x' = theta(x + h) + x.

    ``theta`` maps the combined state to a residual update.  ``hidden``, when
    given, is a pair of callables (g1, g2) advancing the recurrent path:
    h' = g2(g1(theta_out) + h).  With ``hidden`` None (or h None) the block
    is a plain residual unit.
    """
    z = x if h is None else x + h
    u = theta(z)
    x_new = u + x
    if hidden is None or h is None:
        return x_new, h
    g1, g2 = hidden
    h_new = g2(g1(u) + h)
    return x_new, h_new


def forward(images, params, arch: ArchConfig = DEFAULT_ARCH, use_rla=True):
    """Run the detector; returns HeadOutput with one entry per pyramid level."""
    x = images if isinstance(images, T.Tensor) else T.Tensor(np.ascontiguousarray(images))
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected [b,3,h,w] images, got {x.shape}")
    g = arch.groups

    def conv(t, name, stride=1, pad=1):
        return T.conv2d(t, params[name + ".w"], params[name + ".b"], stride=stride, padding=pad)

    t = conv(x, "stem", stride=2)
    feats = []
    for i in range(1, len(arch.widths) + 1):
        t = conv(_gn_relu(t, g), f"s{i}.down", stride=2)
        h = T.Tensor(np.zeros_like(t.data)) if use_rla else None
        hidden = None
        if use_rla:
            hidden = (
                lambda u, i=i: conv(u, f"s{i}.g1", pad=0),
                lambda u, i=i: conv(u, f"s{i}.g2"),
            )
        for j in range(1, arch.blocks_per_stage + 1):
            theta = lambda z, i=i, j=j: conv(_gn_relu(z, g), f"s{i}.b{j}.theta")
            t, h = rla_block(t, h, theta, hidden)
        feats.append(t)

    laterals = [conv(_gn_relu(f, g), f"neck.lat{i}", pad=0)
                for i, f in enumerate(feats, start=1)]
    tops = [None] * len(laterals)
    tops[-1] = laterals[-1]
    for i in range(len(laterals) - 2, -1, -1):
        tops[i] = laterals[i] + T.upsample_nearest(tops[i + 1], 2)
    pyramid = [conv(p, f"neck.smooth{i}") for i, p in enumerate(tops, start=1)]

    out = HeadOutput(cls=[], ctr=[], dist=[])
    for level, feat in enumerate(pyramid):
        c = feat
        r = feat
        for k in range(1, arch.head_convs + 1):
            c = _gn_relu(conv(c, f"head.cls{k}"), g)
            r = _gn_relu(conv(r, f"head.reg{k}"), g)
        out.cls.append(conv(c, "head.cls_pred"))
        out.ctr.append(conv(r, "head.ctr_pred"))
        raw = conv(r, "head.reg_pred")
        out.dist.append(T.mul(T.exp(raw), float(arch.strides[level])))
    return out


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------

def centerness_of(l, t, r, b):
    """sqrt(min/max ratio product); inputs broadcastable positive distances."""
    lr = np.minimum(l, r) / np.maximum(l, r)
    tb = np.minimum(t, b) / np.maximum(t, b)
    return np.sqrt(lr * tb)


def assign_targets(annotations, geometry: PyramidGeometry):
    """Dense per-pixel targets for one image (unbatched)."""
    cats, dists, ctrs = [], [], []
    boxes = np.asarray([a.box for a in annotations], dtype=np.float64).reshape(-1, 4)
    labels = np.asarray([a.category for a in annotations], dtype=np.int64)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    for level in range(geometry.num_levels):
        s = geometry.strides[level]
        h, w = geometry.shapes[level]
        lo, hi = geometry.ranges[level]
        cat = np.full((h, w), BACKGROUND, dtype=np.int32)
        dist = np.ones((4, h, w), dtype=np.float32)
        ctr = np.full((h, w), 0.5, dtype=np.float32)
        if len(boxes):
            cx, cy = geometry.centers(level)
            l = cx[None, None, :] - boxes[:, 0, None, None]
            t = cy[None, :, None] - boxes[:, 1, None, None]
            r = boxes[:, 2, None, None] - cx[None, None, :]
            b = boxes[:, 3, None, None] - cy[None, :, None]
            edges = np.stack(np.broadcast_arrays(l, t, r, b))  # [4, n, h, w]
            inside = edges.min(axis=0) > 0
            maxdist = edges.max(axis=0)
            ok = inside & (maxdist > lo) & (maxdist <= hi)  # [n, h, w]
            cost = np.where(ok, areas[:, None, None], np.inf)
            pick = cost.argmin(axis=0)                      # first smallest area wins
            any_ok = ok.any(axis=0)
            yy, xx = np.nonzero(any_ok)
            nn = pick[yy, xx]
            cat[yy, xx] = labels[nn]
            chosen = edges[:, nn, yy, xx]                   # [4, npix]
            dist[:, yy, xx] = (chosen / s).astype(np.float32)
            ctr[yy, xx] = centerness_of(*chosen).astype(np.float32)
        cats.append(cat)
        dists.append(dist)
        ctrs.append(ctr)
    return DenseTargets(cat=cats, dist=dists, ctr=ctrs)


def permute_dense_targets(targets: DenseTargets, record: AugmentRecord, geometry: PyramidGeometry):
    """Replay a recorded geometric augmentation on already-assigned targets.

    Equivalent to augmenting the image and boxes first and assigning after,
    for flips and stride-aligned cuts.  A horizontal flip swaps the left and
    right distance channels.
    """
    perms = apply_record_to_grid(record, geometry.levels())
    cats, dists, ctrs = [], [], []
    for cat, dist, ctr, idx in zip(targets.cat, targets.dist, targets.ctr, perms):
        cat2 = permute_grid_array(cat, idx)
        dist2 = permute_grid_array(dist, idx)
        ctr2 = permute_grid_array(ctr, idx)
        if record.flip:
            dist2 = dist2[..., [2, 1, 0, 3], :, :]
        cats.append(np.ascontiguousarray(cat2))
        dists.append(np.ascontiguousarray(dist2))
        ctrs.append(np.ascontiguousarray(ctr2))
    return DenseTargets(cat=cats, dist=dists, ctr=ctrs)


# ---------------------------------------------------------------------------
# decode + nms
# ---------------------------------------------------------------------------

def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def box_iou_single(a, b):
    ix1 = max(a[0], b[0])
    iy1 = max(a[1], b[1])
    ix2 = min(a[2], b[2])
    iy2 = min(a[3], b[3])
    iw = max(ix2 - ix1, 0.0)
    ih = max(iy2 - iy1, 0.0)
    inter = iw * ih
    if inter <= 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def nms(boxes, scores, iou_thresh):
    """Greedy suppression; returns kept indices in descending-score order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    for oi, i in enumerate(order):
        if suppressed[oi]:
            continue
        keep.append(int(i))
        for oj in range(oi + 1, len(order)):
            if suppressed[oj]:
                continue
            if box_iou_single(boxes[i], boxes[order[oj]]) > iou_thresh:
                suppressed[oj] = True
    return keep


def decode(output: HeadOutput, geometry: PyramidGeometry, score_thresh=0.05,
           nms_iou=0.5, max_dets=50):
    """Turn head outputs into per-image instance lists.

    Per-pixel score is sigmoid(class logit) * sigmoid(centerness logit);
    candidates above ``score_thresh`` go through class-wise greedy NMS.
    Candidate order (level, row-major pixel, class, stable score sort) is
    deterministic, so results are reproducible bit-for-bit.
    """
    batch = output.cls[0].shape[0]
    size = float(geometry.image_size)
    results = []
    for bi in range(batch):
        cand_boxes, cand_scores, cand_cats = [], [], []
        for level in range(geometry.num_levels):
            cls = output.cls[level].data[bi]
            ctr = output.ctr[level].data[bi]
            dist = output.dist[level].data[bi]
            score = _sigmoid_np(cls) * _sigmoid_np(ctr)     # [C, h, w]
            kk, yy, xx = np.nonzero(score > score_thresh)
            if kk.size == 0:
                continue
            cx, cy = geometry.centers(level)
            px, py = cx[xx], cy[yy]
            x1 = np.clip(px - dist[0, yy, xx], 0.0, size)
            y1 = np.clip(py - dist[1, yy, xx], 0.0, size)
            x2 = np.clip(px + dist[2, yy, xx], 0.0, size)
            y2 = np.clip(py + dist[3, yy, xx], 0.0, size)
            cand_boxes.append(np.stack([x1, y1, x2, y2], axis=1))
            cand_scores.append(score[kk, yy, xx])
            cand_cats.append(kk)
        if not cand_boxes:
            results.append([])
            continue
        boxes = np.concatenate(cand_boxes)
        scores = np.concatenate(cand_scores)
        cats = np.concatenate(cand_cats)
        picked = []
        for c in range(output.cls[0].shape[1]):
            sel = np.nonzero(cats == c)[0]
            if sel.size == 0:
                continue
            for i in nms(boxes[sel], scores[sel], nms_iou):
                gi = sel[i]
                picked.append(Instance(category=int(c),
                                       box=tuple(float(v) for v in boxes[gi]),
                                       score=float(scores[gi])))
        picked.sort(key=lambda inst: (-inst.score, inst.category, inst.box))
        results.append(picked[:max_dets])
    return results

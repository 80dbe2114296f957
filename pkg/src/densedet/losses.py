"""Training losses over dense per-pixel targets.

Three terms per view, all normalized by the number of positive pixels in the
mini-batch (clamped to 1):

* focal sigmoid classification on every non-ignored pixel;
* -log(IoU) box regression on positive pixels, in stride-normalized units;
* binary cross-entropy on the centerness logit, positive pixels only.

Ignored pixels (category -1) contribute exactly nothing: every term is
multiplied by a {0,1} mask before reduction, so both the value and the
gradient at those pixels are identically zero.

Classification log-probabilities are built from softplus identities rather
than clamped sigmoids, so no probability is ever materialized near 0 or 1.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import BACKGROUND, IGNORE, DenseTargets, HeadOutput

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
_IOU_FLOOR = 1e-12  # keeps log finite if a box degenerates numerically


def softplus(x):
    """log(1 + exp(x)), overflow-safe: relu(x) + log(1 + exp(-|x|))."""
    ax = T.maximum(x, T.mul(x, -1.0))
    return T.add(T.relu(x), T.log(T.add(T.exp(T.mul(ax, -1.0)), 1.0)))


def binary_ce_logits(z, target):
    """Elementwise BCE from logits: softplus(z) - z * target."""
    return T.sub(softplus(z), T.mul(z, target))


def _focal_sum(logits, cat_map, valid, num_classes):
    """Masked focal-loss sum over one level.  cat_map/valid are numpy."""
    onehot = np.stack([(cat_map == k) for k in range(num_classes)], axis=1)
    onehot = onehot.astype(logits.dtype)
    mask = valid[:, None].astype(logits.dtype)
    p = T.sigmoid(logits)
    one_m_p = T.sub(1.0, p)
    # -log p = softplus(-z); -log(1-p) = softplus(z)
    nlog_p = softplus(T.mul(logits, -1.0))
    nlog_1mp = softplus(logits)
    pos = T.mul(T.mul(T.mul(one_m_p, one_m_p), nlog_p), FOCAL_ALPHA * onehot)
    neg = T.mul(T.mul(T.mul(p, p), nlog_1mp), (1.0 - FOCAL_ALPHA) * (1.0 - onehot))
    return T.reduce_sum(T.mul(T.add(pos, neg), mask))


def _iou_loss_sum(dist_pred, dist_target, pos_mask, stride):
    """Masked -log(IoU) sum; predictions in pixels, targets stride-normalized."""
    pred = T.mul(dist_pred, 1.0 / stride)
    tgt = np.asarray(dist_target)
    pl, pt = T.narrow(pred, 1, 0, 1), T.narrow(pred, 1, 1, 1)
    pr, pb = T.narrow(pred, 1, 2, 1), T.narrow(pred, 1, 3, 1)
    tl, tt = tgt[:, 0:1], tgt[:, 1:2]
    tr, tb = tgt[:, 2:3], tgt[:, 3:4]
    inter_w = T.add(T.minimum(pl, tl), T.minimum(pr, tr))
    inter_h = T.add(T.minimum(pt, tt), T.minimum(pb, tb))
    inter = T.mul(inter_w, inter_h)
    area_p = T.mul(T.add(pl, pr), T.add(pt, pb))
    area_t = (tl + tr) * (tt + tb)
    union = T.sub(T.add(area_p, area_t), inter)
    iou = T.mul(inter, T.reciprocal(union))
    nll = T.mul(T.log(T.maximum(iou, _IOU_FLOOR)), -1.0)
    mask = pos_mask[:, None].astype(dist_pred.dtype)
    return T.reduce_sum(T.mul(nll, mask))


def _detection_loss(output: HeadOutput, targets: DenseTargets, strides, num_classes):
    """Shared focal + IoU + centerness core; returns (loss sum Tensor, n_pos)."""
    if len(output.cls) != len(targets.cat):
        raise ValueError(f"{len(output.cls)} predicted levels vs {len(targets.cat)} target levels")
    total = None
    n_pos = 0
    for level, stride in enumerate(strides):
        cls, ctr, dist = output.cls[level], output.ctr[level], output.dist[level]
        cat = targets.cat[level]
        if cls.shape[0] != cat.shape[0] or cls.shape[2:] != cat.shape[1:]:
            raise ValueError(
                f"level {level}: prediction grid {tuple(cls.shape)} vs target grid {cat.shape}"
            )
        valid = cat != IGNORE
        positive = (cat >= 0) & (cat < BACKGROUND)
        n_pos += int(positive.sum())
        term = _focal_sum(cls, cat, valid, num_classes)
        if positive.any():
            term = T.add(term, _iou_loss_sum(dist, targets.dist[level], positive, float(stride)))
            ctr_map = binary_ce_logits(ctr, targets.ctr[level][:, None])
            term = T.add(term, T.reduce_sum(T.mul(ctr_map, positive[:, None].astype(ctr.dtype))))
        total = term if total is None else T.add(total, term)
    return total, n_pos


def supervised_loss(output: HeadOutput, targets: DenseTargets, strides=(4, 8, 16), num_classes=3):
    """Ground-truth branch loss, normalized by its positive-pixel count."""
    total, n_pos = _detection_loss(output, targets, strides, num_classes)
    return T.mul(total, 1.0 / max(n_pos, 1))


def unsupervised_loss(output: HeadOutput, targets: DenseTargets, strides=(4, 8, 16), num_classes=3):
    """Pseudo-label branch loss; identical form, ignore mask does the gating."""
    total, n_pos = _detection_loss(output, targets, strides, num_classes)
    return T.mul(total, 1.0 / max(n_pos, 1))


def joint_score_map(cls, ctr):
    """Per-pixel detection confidence: sigmoid(cls) * sigmoid(ctr)."""
    return T.mul(T.sigmoid(cls), T.sigmoid(ctr))


def scale_consistency_loss(output_small: HeadOutput, output_full: HeadOutput):
    """Cross-scale dense agreement.

    Level v of the downsampled view shares its grid with level v+1 of the
    full view (strides double); the loss is the mean squared difference of
    the joint score maps on each shared grid, summed over the shared levels.
    """
    levels = min(len(output_small.cls), len(output_full.cls))
    if levels < 2:
        raise ValueError("scale consistency needs at least two pyramid levels")
    total = None
    for v in range(levels - 1):
        a = joint_score_map(output_small.cls[v], output_small.ctr[v])
        b = joint_score_map(output_full.cls[v + 1], output_full.ctr[v + 1])
        if a.shape != b.shape:
            raise ValueError(
                f"scale pair level {v}: grid {tuple(a.shape)} vs {tuple(b.shape)}; "
                "views are not a stride-2 pair"
            )
        d = T.sub(a, b)
        term = T.reduce_mean(T.mul(d, d))
        total = term if total is None else T.add(total, term)
    return total


def total_loss(l_sup, l_unsup=None, l_scale=None, alpha=3.0, scale_weight=1.0):
    """L = L_s + alpha * L_u + scale_weight * L_scale (missing terms skipped)."""
    if alpha < 0 or scale_weight < 0:
        raise ValueError(f"loss weights must be non-negative (alpha={alpha}, scale={scale_weight})")
    out = l_sup
    if l_unsup is not None:
        out = T.add(out, T.mul(l_unsup, float(alpha)))
    if l_scale is not None:
        out = T.add(out, T.mul(l_scale, float(scale_weight)))
    return out

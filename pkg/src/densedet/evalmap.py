"""Detection metrics: IoU, per-category average precision, mAP.

Matching follows the usual greedy protocol: within one category and IoU
threshold, detections are visited in descending score order and each grabs
the highest-IoU still-unmatched ground truth; a grab below the threshold is
a false positive.  AP is the 101-point interpolated area under the
precision-recall curve; mAP averages AP over categories and over IoU
thresholds 0.50:0.05:0.95.  AP at a (category, threshold) cell with no
ground truth anywhere is undefined and excluded from the mean.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .data import NUM_CATEGORIES

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))


def box_iou_matrix(a, b):
    """Pairwise IoU of [n,4] and [m,4] xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


@dataclasses.dataclass
class EvalResult:
    map: float                     # mean over categories and IoU thresholds
    ap50: float                    # mean over categories at IoU 0.5
    per_category: dict             # name -> AP averaged over thresholds
    pr_curves: dict                # (category, threshold) -> (recall, precision)
    num_images: int = 0

    def summary(self):
        cats = "  ".join(f"{k}={v:.3f}" for k, v in self.per_category.items())
        return f"mAP={self.map:.4f}  AP50={self.ap50:.4f}  [{cats}]  images={self.num_images}"


def _interp_ap(recall, precision):
    """101-point interpolated AP; arrays must be in sweep order."""
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def _match_category(dets, gts, thresh):
    """Greedy matching for one category across the dataset.

    ``dets``: list of (image_idx, score, box); ``gts``: dict image -> [box].
    Returns (tp flags, fp flags, scores, num_gt) in descending-score order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], dets[i][0], i))
    num_gt = sum(len(v) for v in gts.values())
    matched = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in gts.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        img, _, box = dets[i]
        boxes = gts.get(img)
        if boxes is None or not len(boxes):
            continue
        ious = box_iou_matrix([box], boxes)[0]
        ious[matched[img]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= thresh:
            matched[img][j] = True
            tp[rank] = True
    scores = np.asarray([dets[i][1] for i in order])
    return tp, ~tp, scores, num_gt


def compute_map(detections, ground_truth, num_classes=NUM_CATEGORIES,
                thresholds=IOU_THRESHOLDS, category_names=None):
    """Dataset mAP.

    ``detections``: per image, a list of objects with .category/.box/.score
    (decoded instances).  ``ground_truth``: per image, a list with
    .category/.box (annotations).  The two lists are index-aligned.
    """
    if len(detections) != len(ground_truth):
        raise ValueError(
            f"{len(detections)} detection lists vs {len(ground_truth)} ground-truth lists"
        )
    if category_names is None:
        category_names = [str(k) for k in range(num_classes)]
    ap = np.full((num_classes, len(thresholds)), np.nan)
    pr_curves = {}
    for k in range(num_classes):
        dets = [(img, d.score, d.box)
                for img, dd in enumerate(detections) for d in dd if d.category == k]
        gts = {img: np.asarray([g.box for g in gg if g.category == k], dtype=np.float64)
               for img, gg in enumerate(ground_truth)}
        gts = {img: v for img, v in gts.items() if len(v)}
        num_gt = sum(len(v) for v in gts.values())
        if num_gt == 0:
            continue
        for ti, thresh in enumerate(thresholds):
            tp, fp, _, _ = _match_category(dets, gts, thresh)
            ctp = np.cumsum(tp)
            cfp = np.cumsum(fp)
            recall = ctp / num_gt
            precision = ctp / np.maximum(ctp + cfp, 1)
            ap[k, ti] = _interp_ap(recall, precision) if len(tp) else 0.0
            pr_curves[(k, float(thresh))] = (recall, precision)
    have = ~np.isnan(ap)
    counts = have.sum(axis=1)
    sums = np.where(have, ap, 0.0).sum(axis=1)
    per_cat = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    defined = counts > 0
    map_all = float(per_cat[defined].mean()) if defined.any() else 0.0
    col50 = ap[:, 0]
    ok50 = ~np.isnan(col50)
    ap50 = float(col50[ok50].mean()) if ok50.any() else 0.0
    per_category = {category_names[k]: (float(per_cat[k]) if defined[k] else float("nan"))
                    for k in range(num_classes)}
    return EvalResult(map=map_all, ap50=ap50, per_category=per_category,
                      pr_curves=pr_curves, num_images=len(detections))

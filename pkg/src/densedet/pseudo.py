"""Pseudo-label filtering: adaptive per-category thresholds and rendering.

Teacher detections are split three ways by confidence ``p``:

* ``p >= tau2[k]``            foreground, trains all three loss terms;
* ``tau1 < p < tau2[k]``      ignorable, excluded from every loss term;
* ``p <= tau1``               background (the dense default).

The upper threshold adapts per category to the teacher's recent foreground
mass: ``tau2[k] = clamp((mass_k) ** beta * tau)``, where ``mass_k`` is an
exponential moving average of category k's share of foreground confidence.
Rare categories therefore get a lower bar, common ones a higher bar, inside
a fixed clamp window.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .data import NUM_CATEGORIES
from .model import (
    BACKGROUND,
    BACKGROUND_REGION,
    FOREGROUND_REGION,
    IGNORABLE_REGION,
    IGNORE,
    DenseTargets,
    Instance,
    PyramidGeometry,
    assign_targets,
)
from .data import Annotation

TAU1_DEFAULT = 0.1
TAU_DEFAULT = 0.35
BETA_DEFAULT = 0.7
CLAMP_DEFAULT = (0.25, 0.35)
STATS_MOMENTUM = 0.99


@dataclasses.dataclass
class CategoryStats:
    """Running per-category foreground-confidence mass."""

    mass: np.ndarray
    updates: int = 0

    @classmethod
    def fresh(cls, num_classes=NUM_CATEGORIES):
        return cls(mass=np.ones(num_classes, dtype=np.float64), updates=0)

    def copy(self):
        return CategoryStats(mass=self.mass.copy(), updates=self.updates)


def adaptive_thresholds(stats: CategoryStats, tau=TAU_DEFAULT, beta=BETA_DEFAULT,
                        clamp=CLAMP_DEFAULT):
    """Per-category upper thresholds tau2[k] = clip(mass_k**beta * tau)."""
    lo, hi = clamp
    if not (0 < lo <= hi):
        raise ValueError(f"bad clamp window {clamp}")
    mass = np.maximum(stats.mass, 0.0)
    return np.clip(np.power(mass, beta) * tau, lo, hi)


def update_stats(stats: CategoryStats, instances, momentum=STATS_MOMENTUM,
                 num_classes=NUM_CATEGORIES):
    """Fold one batch of partitioned detections into the running mass.

    Batch mass of category k is the summed confidence of its foreground
    instances divided by the total foreground count; batches with no
    foreground leave the stats untouched.
    """
    fg = [i for i in instances if i.region == FOREGROUND_REGION]
    out = stats.copy()
    if not fg:
        return out
    batch = np.zeros(num_classes, dtype=np.float64)
    for inst in fg:
        batch[inst.category] += inst.score
    batch /= len(fg)
    out.mass = momentum * out.mass + (1.0 - momentum) * batch
    out.updates += 1
    return out


def partition_instances(instances, tau1, tau2):
    """Label each instance foreground / ignorable / background by confidence.

    ``tau2`` is a per-category array.  ``tau1`` above any tau2 would invert
    the band and is rejected; equality (a collapsed middle band) is allowed
    and reduces to single-threshold filtering.
    """
    tau2 = np.asarray(tau2, dtype=np.float64)
    if np.any(tau2 <= 0) or not (0 <= tau1 <= 1):
        raise ValueError(f"thresholds out of range: tau1={tau1} tau2={tau2}")
    if tau1 > float(tau2.min()):
        raise ValueError(
            f"tau1={tau1} exceeds the smallest tau2={float(tau2.min()):.4f}; "
            "the ignorable band would be inverted"
        )
    out = []
    for inst in instances:
        hi = float(tau2[inst.category])
        if inst.score >= hi:
            region = FOREGROUND_REGION
        elif inst.score > tau1:
            region = IGNORABLE_REGION
        else:
            region = BACKGROUND_REGION
        out.append(dataclasses.replace(inst, region=region))
    return out


def render_pseudo_targets(instances, geometry: PyramidGeometry):
    """Dense targets from partitioned detections.

    Foreground instances are assigned exactly like ground truth.  Ignorable
    instances then stamp category -1 on the pixels they cover (at every
    level in range) that are still background, removing them from the loss.
    Background instances are dropped: background is the dense default.
    """
    fg = [Annotation(category=i.category, box=i.box)
          for i in instances if i.region == FOREGROUND_REGION]
    targets = assign_targets(fg, geometry)

    ign = [i for i in instances if i.region == IGNORABLE_REGION]
    if ign:
        boxes = np.asarray([i.box for i in ign], dtype=np.float64)
        for level in range(geometry.num_levels):
            lo, hi = geometry.ranges[level]
            cat = targets.cat[level]
            cx, cy = geometry.centers(level)
            for box in boxes:
                l = cx[None, :] - box[0]
                t = cy[:, None] - box[1]
                r = box[2] - cx[None, :]
                b = box[3] - cy[:, None]
                edges = np.stack(np.broadcast_arrays(l, t, r, b))
                inside = edges.min(axis=0) > 0
                maxdist = edges.max(axis=0)
                covered = inside & (maxdist > lo) & (maxdist <= hi)
                cat[covered & (cat == BACKGROUND)] = IGNORE
    return targets

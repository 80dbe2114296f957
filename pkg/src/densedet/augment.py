"""Image augmentation with replayable records.

Every stochastic transform returns the transformed image plus an
:class:`AugmentRecord` describing exactly what happened, so the geometric
part (flip, patch cuts, paired downsample) can later be replayed on dense
prediction grids at any pyramid stride.  Geometric order is always: flip
first, then patch cuts.  Photometric pieces (jitter, cutout) never move
pixels and need no replay.

Patch shuffling cuts the image in two along a random axis and swaps the
parts, which is a cyclic roll of the pixel grid.  Cut positions are snapped
to a multiple of the coarsest feature stride so the roll stays aligned on
every level of the pyramid.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .data import Annotation


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclasses.dataclass
class AugmentRecord:
    """Replayable description of one augmented view."""

    flip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    cutouts: list = dataclasses.field(default_factory=list)  # (x1, y1, x2, y2)
    cuts: list = dataclasses.field(default_factory=list)     # (mode, position px)
    downsample: int = 1

    def to_json(self):
        return json.dumps(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        raw["cutouts"] = [tuple(c) for c in raw.get("cutouts", [])]
        raw["cuts"] = [(m, int(p)) for m, p in raw.get("cuts", [])]
        return cls(**raw)


def flip_image(img):
    return np.ascontiguousarray(img[:, :, ::-1])


def flip_annotations(annotations, width):
    out = []
    for a in annotations:
        x1, y1, x2, y2 = a.box
        out.append(Annotation(category=a.category, box=(width - x2, y1, width - x1, y2)))
    return out


def weak_augment(image, annotations, seed):
    """Random horizontal flip (p = 0.5).  Boxes follow the pixels."""
    rng = _rng(seed)
    rec = AugmentRecord()
    if rng.random() < 0.5:
        rec.flip = True
        image = flip_image(image)
        annotations = flip_annotations(annotations, image.shape[2])
    return image, annotations, rec


def strong_augment(image, seed, jitter=0.25, max_cutouts=2, cutout_fill=0.5):
    """Flip + photometric jitter + cutout.  jitter=0 leaves pixel values alone."""
    rng = _rng(seed)
    rec = AugmentRecord()
    if rng.random() < 0.5:
        rec.flip = True
        image = flip_image(image)
    else:
        image = image.copy()

    if jitter > 0:
        rec.brightness = float(rng.uniform(1.0 - jitter, 1.0 + jitter))
        rec.contrast = float(rng.uniform(1.0 - jitter, 1.0 + jitter))
        mean = image.mean()
        image = (image - mean) * rec.contrast + mean
        image = np.clip(image * rec.brightness, 0.0, 1.0, out=image)

    side = image.shape[1]
    if max_cutouts > 0:
        for _ in range(int(rng.integers(0, max_cutouts + 1))):
            w = int(rng.integers(side // 16 + 1, side // 4 + 1))
            h = int(rng.integers(side // 16 + 1, side // 4 + 1))
            x1 = int(rng.integers(0, image.shape[2] - w + 1))
            y1 = int(rng.integers(0, image.shape[1] - h + 1))
            image[:, y1 : y1 + h, x1 : x1 + w] = cutout_fill
            rec.cutouts.append((x1, y1, x1 + w, y1 + h))
    return np.ascontiguousarray(image), rec


def patch_shuffle(image, seed, iters=2, snap=16):
    """Repeatedly cut the image in two and swap the parts (cyclic roll).

    Each iteration draws a cut axis (horizontal cut line = top/bottom split,
    vertical = left/right) and a relative position, snapped to a multiple of
    ``snap``.  Degenerate positions (0 or the full side) leave the image
    unchanged but are still recorded.  Returns (image, cuts).
    """
    rng = _rng(seed)
    if iters < 0:
        raise ValueError(f"iters must be >= 0, got {iters}")
    cuts = []
    for _ in range(int(iters)):
        mode = "horizontal" if rng.random() < 0.5 else "vertical"
        extent = image.shape[1] if mode == "horizontal" else image.shape[2]
        pos = int(round(rng.random() * extent / snap)) * snap
        pos = min(max(pos, 0), extent)
        cuts.append((mode, pos))
        if 0 < pos < extent:
            axis = 1 if mode == "horizontal" else 2
            image = np.roll(image, -pos, axis=axis)
    return np.ascontiguousarray(image), cuts


def make_scale_pair(image, factor=2):
    """Paired views for scale consistency: identity plus a box-downsampled copy.

    Returns (full view, small view, factor).  The small view has each spatial
    dim divided by ``factor`` (box averaging), so predictions on the small
    view at pyramid level v align with full-view predictions at level v+1
    when strides double.
    """
    f = int(factor)
    c, h, w = image.shape
    if f < 2 or h % f or w % f:
        raise ValueError(f"downsample factor {factor} does not divide image {h}x{w}")
    small = image.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))
    return image, small.astype(image.dtype, copy=False), f


def grid_permutation(record: AugmentRecord, stride, h, w):
    """Source-index map for replaying flip + cuts on an [h, w] grid.

    Returns an int array ``idx`` of shape [h, w] such that for any map ``m``
    laid out on that grid, the augmented map is ``m.flat[idx]`` (applied to
    the trailing two axes).  Cut positions must be multiples of the stride;
    the snap in :func:`patch_shuffle` guarantees that for pyramid strides
    that divide the snap.
    """
    idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    if record.flip:
        idx = idx[:, ::-1]
    for mode, pos in record.cuts:
        if pos % stride:
            raise ValueError(f"cut at {pos}px is not aligned to stride {stride}")
        cells = pos // stride
        extent = h if mode == "horizontal" else w
        if 0 < cells < extent:
            idx = np.roll(idx, -cells, axis=0 if mode == "horizontal" else 1)
    return np.ascontiguousarray(idx)


def apply_record_to_grid(record: AugmentRecord, levels):
    """Per-level grid permutations for ``levels`` = [(stride, h, w), ...]."""
    return [grid_permutation(record, s, h, w) for s, h, w in levels]


def permute_grid_array(arr, idx):
    """Apply a grid permutation to the trailing two axes of ``arr``."""
    h, w = idx.shape
    lead = arr.shape[:-2]
    flat = arr.reshape(*lead, h * w)
    return flat[..., idx.ravel()].reshape(*lead, h, w)

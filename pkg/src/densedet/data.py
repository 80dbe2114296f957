"""Synthetic scene generation and dataset storage.

Scenes are float images in [0, 1], CHW layout, with axis-aligned discs,
squares and triangles over a low-frequency textured background.  Shapes are
drawn inscribed in integer pixel boxes and the stored annotation box is
recomputed from the rendered mask, so every box is tight by construction.

On disk a dataset is a directory of image files plus ``annotations.json``::

    {"images":      [{"id", "width", "height", "file"}, ...],
     "annotations": [{"image_id", "category_id", "bbox": [x, y, w, h]}, ...],
     "categories":  [{"id", "name"}, ...]}

``bbox`` is [x, y, width, height] in pixels.  Images are stored as ``.dslt``
tensors by default (exact float round-trip); ``.ppm`` (binary P6) is also
understood for interop with image viewers.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import tensorio

CATEGORY_NAMES = ("disc", "square", "triangle")
NUM_CATEGORIES = len(CATEGORY_NAMES)


class DataFormatError(ValueError):
    """Raised for malformed annotation files or image payloads."""


@dataclasses.dataclass(frozen=True)
class Annotation:
    """One ground-truth object: category index and tight [x1, y1, x2, y2) box."""

    category: int
    box: tuple  # (x1, y1, x2, y2) pixels, x2 > x1, y2 > y1

    def area(self):
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


@dataclasses.dataclass
class SceneConfig:
    image_size: int = 128
    min_objects: int = 0
    max_objects: int = 6
    min_size: int = 12          # object box side, pixels
    max_size: int = 48
    category_weights: tuple = (0.45, 0.35, 0.20)
    background_level: float = 0.35
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.image_size < 16 or self.image_size % 16:
            raise ValueError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if not (0 <= self.min_objects <= self.max_objects):
            raise ValueError(f"bad object count range [{self.min_objects}, {self.max_objects}]")
        if not (2 <= self.min_size <= self.max_size < self.image_size):
            raise ValueError(f"bad size range [{self.min_size}, {self.max_size}] for image {self.image_size}")
        w = np.asarray(self.category_weights, dtype=np.float64)
        if len(w) != NUM_CATEGORIES or np.any(w < 0) or w.sum() <= 0:
            raise ValueError(f"category_weights must be {NUM_CATEGORIES} non-negative values with positive sum")


def bilinear_resize(img, out_h, out_w):
    """Resize CHW float image with bilinear sampling at pixel centers."""
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    a = img[:, y0][:, :, x0]
    b = img[:, y0][:, :, x1]
    cc = img[:, y1][:, :, x0]
    d = img[:, y1][:, :, x1]
    top = a * (1 - fx) + b * fx
    bot = cc * (1 - fx) + d * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype, copy=False)


def _shape_mask(kind, x1, y1, size):
    """Boolean [size, size] mask of the shape inscribed in its box.

    Pixel (i, j) of the patch is the image pixel (y1 + i, x1 + j); membership
    is tested at the pixel center.  All three kinds touch all four box edges
    for size >= 2, so the enclosing box recomputed from the mask equals the
    requested one.
    """
    s = size
    jj, ii = np.meshgrid(np.arange(s) + 0.5, np.arange(s) + 0.5)
    if kind == 0:  # disc
        r = s / 2.0
        return (ii - r) ** 2 + (jj - r) ** 2 <= r * r
    if kind == 1:  # square
        return np.ones((s, s), dtype=bool)
    if kind == 2:  # triangle, apex up; +0.5 widens rows so the apex row renders
        half = ii / s * (s / 2.0) + 0.5
        return np.abs(jj - s / 2.0) <= half
    raise ValueError(f"unknown shape kind {kind}")


def generate_scene(seed, cfg: SceneConfig | None = None):
    """Render one scene; returns (image [3,H,W] float32 in [0,1], annotations).

    Deterministic in (seed, cfg): the same pair always yields the same bytes.
    """
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    side = cfg.image_size

    cells = max(side // 16, 2)
    base = rng.uniform(0.0, cfg.background_level, size=(3, cells, cells))
    img = bilinear_resize(base.astype(np.float32), side, side)

    weights = np.asarray(cfg.category_weights, dtype=np.float64)
    weights = weights / weights.sum()
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    annotations = []
    for _ in range(n_obj):
        kind = int(rng.choice(NUM_CATEGORIES, p=weights))
        size = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        x1 = int(rng.integers(0, side - size + 1))
        y1 = int(rng.integers(0, side - size + 1))
        mask = _shape_mask(kind, x1, y1, size)
        color = rng.uniform(0.45, 1.0, size=3).astype(np.float32)
        patch = img[:, y1 : y1 + size, x1 : x1 + size]
        patch[:, mask] = color[:, None]

        ys, xs = np.nonzero(mask)
        box = (x1 + int(xs.min()), y1 + int(ys.min()),
               x1 + int(xs.max()) + 1, y1 + int(ys.max()) + 1)
        annotations.append(Annotation(category=kind, box=box))

    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0, out=img), annotations


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ImageRecord:
    id: int
    width: int
    height: int
    file: str


class Dataset:
    """A directory of images plus per-image annotation lists."""

    def __init__(self, root, images, annotations):
        self.root = Path(root)
        self.images: list[ImageRecord] = images
        self.annotations: dict[int, list[Annotation]] = annotations

    def __len__(self):
        return len(self.images)

    def annos(self, image_id):
        return self.annotations.get(image_id, [])

    def load_image(self, rec_or_id):
        rec = rec_or_id if isinstance(rec_or_id, ImageRecord) else self._by_id(rec_or_id)
        return load_image_file(self.root / rec.file)

    def _by_id(self, image_id):
        for rec in self.images:
            if rec.id == image_id:
                return rec
        raise KeyError(f"no image with id {image_id}")


def save_image_file(path, img):
    path = Path(path)
    if path.suffix == ".dslt":
        tensorio.save_tensor(path, img.astype(np.float32))
    elif path.suffix == ".ppm":
        _save_ppm(path, img)
    else:
        raise DataFormatError(f"{path}: unknown image extension (use .dslt or .ppm)")


def load_image_file(path):
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: image file missing")
    if path.suffix == ".dslt":
        arr = tensorio.load_tensor(path)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise DataFormatError(f"{path}: expected a [3,H,W] image tensor, got {arr.shape}")
        return arr.astype(np.float32, copy=False)
    if path.suffix == ".ppm":
        return _load_ppm(path)
    raise DataFormatError(f"{path}: unknown image extension (use .dslt or .ppm)")


def _save_ppm(path, img):
    arr = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    c, h, w = arr.shape
    header = f"P6\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + arr.transpose(1, 2, 0).tobytes())


def _load_ppm(path):
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise DataFormatError(f"{path}: not a binary P6 ppm")
    try:
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError:
        raise DataFormatError(f"{path}: malformed ppm header") from None
    if maxval != 255:
        raise DataFormatError(f"{path}: only maxval 255 ppm supported")
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise DataFormatError(f"{path}: ppm payload truncated")
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_annotations(path, images, annotations):
    """Write the COCO-style annotations json for the given records."""
    cats = [{"id": i, "name": n} for i, n in enumerate(CATEGORY_NAMES)]
    img_entries = [dataclasses.asdict(r) for r in images]
    anno_entries = []
    for image_id, annos in sorted(annotations.items()):
        for a in annos:
            x1, y1, x2, y2 = a.box
            anno_entries.append(
                {"image_id": image_id, "category_id": a.category,
                 "bbox": [x1, y1, x2 - x1, y2 - y1]}
            )
    doc = {"images": img_entries, "annotations": anno_entries, "categories": cats}
    Path(path).write_text(json.dumps(doc))


def load_annotations(path):
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: annotations file missing")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON ({e})") from None
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise DataFormatError(f"{path}: missing top-level '{key}' list")
    cats = {c["id"] for c in doc["categories"]}
    images = []
    seen_ids = set()
    for i, e in enumerate(doc["images"]):
        try:
            rec = ImageRecord(id=int(e["id"]), width=int(e["width"]),
                              height=int(e["height"]), file=str(e["file"]))
        except (KeyError, TypeError, ValueError) as err:
            raise DataFormatError(f"{path}: images[{i}] malformed ({err})") from None
        if rec.id in seen_ids:
            raise DataFormatError(f"{path}: images[{i}] duplicate id {rec.id}")
        seen_ids.add(rec.id)
        images.append(rec)
    dims = {r.id: (r.width, r.height) for r in images}
    annotations: dict[int, list[Annotation]] = {r.id: [] for r in images}
    for i, e in enumerate(doc["annotations"]):
        try:
            image_id = int(e["image_id"])
            category = int(e["category_id"])
            x, y, w, h = (float(v) for v in e["bbox"])
        except (KeyError, TypeError, ValueError) as err:
            raise DataFormatError(f"{path}: annotations[{i}] malformed ({err})") from None
        if image_id not in annotations:
            raise DataFormatError(f"{path}: annotations[{i}] references unknown image {image_id}")
        if category not in cats:
            raise DataFormatError(f"{path}: annotations[{i}] references unknown category {category}")
        if w <= 0 or h <= 0:
            raise DataFormatError(f"{path}: annotations[{i}] has non-positive extent {w}x{h}")
        iw, ih = dims[image_id]
        if x < 0 or y < 0 or x + w > iw or y + h > ih:
            raise DataFormatError(f"{path}: annotations[{i}] box leaves the {iw}x{ih} image")
        annotations[image_id].append(
            Annotation(category=category, box=(x, y, x + w, y + h))
        )
    return Dataset(path.parent, images, annotations)


def generate_dataset(out_dir, count, seed, cfg: SceneConfig | None = None, fmt="dslt"):
    """Render ``count`` scenes into ``out_dir`` and write annotations.json."""
    cfg = cfg or SceneConfig()
    if fmt not in ("dslt", "ppm"):
        raise ValueError(f"unknown image format {fmt!r}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], {}
    for i in range(count):
        img, annos = generate_scene((int(seed) << 24) + i, cfg)
        fname = f"images/scene_{i:06d}.{fmt}"
        save_image_file(out_dir / fname, img)
        images.append(ImageRecord(id=i, width=cfg.image_size, height=cfg.image_size, file=fname))
        annotations[i] = annos
    save_annotations(out_dir / "annotations.json", images, annotations)
    meta = {"count": count, "seed": int(seed), "scene": dataclasses.asdict(cfg), "format": fmt}
    (out_dir / "dataset.json").write_text(json.dumps(meta, indent=1))
    return Dataset(out_dir, images, annotations)


def load_dataset(root):
    return load_annotations(Path(root) / "annotations.json")


def split_dataset(count, labeled_fraction, seed):
    """Deterministic labeled/unlabeled split; returns two sorted id lists."""
    if not (0.0 < labeled_fraction <= 1.0):
        raise ValueError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    if count <= 0:
        raise ValueError("cannot split an empty dataset")
    k = max(1, int(round(count * labeled_fraction)))
    perm = np.random.default_rng(int(seed)).permutation(count)
    labeled = sorted(int(i) for i in perm[:k])
    unlabeled = sorted(int(i) for i in perm[k:])
    return labeled, unlabeled

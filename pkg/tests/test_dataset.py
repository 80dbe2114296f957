"""Storage formats and synthetic scene generation."""

import json
import struct

import numpy as np
import pytest

from densedet import data as D
from densedet import tensorio
from densedet.data import (Annotation, DataFormatError, ImageRecord, SceneConfig,
                           generate_scene, split_dataset)


def rng_for(tag):
    return np.random.default_rng([99, tag])


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int64])
@pytest.mark.parametrize("shape", [(), (5,), (2, 3), (2, 3, 4), (1, 2, 3, 4)])
def test_tensor_roundtrip_exact(tmp_path, dtype, shape):
    r = rng_for(1)
    arr = (r.standard_normal(shape) * 100).astype(dtype)
    p = tmp_path / "t.dslt"
    tensorio.save_tensor(p, arr)
    back = tensorio.load_tensor(p)
    assert back.dtype == np.dtype(dtype)
    assert back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_tensor_file_layout_matches_contract(tmp_path):
    # independently assemble the expected bytes for a 2x3 float64 tensor
    arr = np.arange(6, dtype=np.float64).reshape(2, 3)
    p = tmp_path / "t.dslt"
    tensorio.save_tensor(p, arr)
    expect = (b"DSLT" + struct.pack("<HBB", 1, 1, 2)
              + struct.pack("<QQ", 2, 3) + arr.astype("<f8").tobytes())
    assert p.read_bytes() == expect


def test_tensor_file_errors(tmp_path):
    p = tmp_path / "t.dslt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(tensorio.TensorFormatError, match="magic"):
        tensorio.load_tensor(p)

    tensorio.save_tensor(p, np.ones((4, 4), dtype=np.float32))
    blob = p.read_bytes()
    p.write_bytes(blob[:-8])  # drop two float32 elements
    with pytest.raises(tensorio.TensorFormatError, match="payload"):
        tensorio.load_tensor(p)

    p.write_bytes(b"DSLT" + struct.pack("<HBB", 9, 0, 0))
    with pytest.raises(tensorio.TensorFormatError, match="version"):
        tensorio.load_tensor(p)

    p.write_bytes(b"DSLT" + struct.pack("<HBB", 1, 7, 0) + b"\x00" * 8)
    with pytest.raises(tensorio.TensorFormatError, match="dtype"):
        tensorio.load_tensor(p)

    with pytest.raises(tensorio.TensorFormatError, match="unsupported dtype"):
        tensorio.save_tensor(p, np.ones(3, dtype=np.int32))


def test_bundle_roundtrip_and_validation(tmp_path):
    r = rng_for(2)
    arrays = {"stem.w": r.standard_normal((4, 3, 3, 3)).astype(np.float32),
              "head/bias": np.arange(5, dtype=np.float64)}
    tensorio.save_bundle(tmp_path / "ck", arrays, extra={"step": 17})
    back, extra = tensorio.load_bundle(tmp_path / "ck")
    assert extra["step"] == 17
    assert set(back) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])

    # tamper with one tensor so its shape disagrees with the manifest
    tensorio.save_tensor(tmp_path / "ck" / "head_bias.dslt", np.zeros(6))
    with pytest.raises(tensorio.TensorFormatError, match="disagrees"):
        tensorio.load_bundle(tmp_path / "ck")

    with pytest.raises(tensorio.TensorFormatError, match="manifest"):
        tensorio.load_bundle(tmp_path / "nothere")


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

def test_scene_is_deterministic():
    cfg = SceneConfig(image_size=64, min_size=8, max_size=24)
    img1, ann1 = generate_scene(123, cfg)
    img2, ann2 = generate_scene(123, cfg)
    np.testing.assert_array_equal(img1, img2)
    assert ann1 == ann2
    img3, _ = generate_scene(124, cfg)
    assert not np.array_equal(img1, img3)


def test_scene_shape_and_range():
    img, annos = generate_scene(5, SceneConfig(image_size=64, min_size=8, max_size=24))
    assert img.shape == (3, 64, 64)
    assert img.dtype == np.float32
    assert img.min() >= 0.0 and img.max() <= 1.0
    for a in annos:
        x1, y1, x2, y2 = a.box
        assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64
        assert all(isinstance(v, int) for v in a.box)
        assert 0 <= a.category < D.NUM_CATEGORIES


def test_single_object_box_is_tight():
    """Recover the object mask by thresholding the image and compare boxes.

    With noise off, background stays below background_level while object
    colours are at least 0.45 in every channel, so a fixed threshold on the
    channel-wise minimum separates them exactly.
    """
    cfg = SceneConfig(image_size=64, min_objects=1, max_objects=1,
                      min_size=8, max_size=28, noise_sigma=0.0,
                      background_level=0.3)
    seen = set()
    for seed in range(40):
        img, annos = generate_scene(seed, cfg)
        (a,) = annos
        seen.add(a.category)
        mask = img.min(axis=0) > 0.4
        ys, xs = np.nonzero(mask)
        recovered = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        assert recovered == a.box, f"seed {seed}: {recovered} != {a.box}"
    assert seen == {0, 1, 2}  # all three kinds exercised


def test_shape_masks_touch_all_box_edges():
    for kind in range(3):
        for size in (6, 11, 20):
            m = D._shape_mask(kind, 0, 0, size)
            assert m.shape == (size, size)
            assert m[0].any() and m[-1].any(), (kind, size)
            assert m[:, 0].any() and m[:, -1].any(), (kind, size)


def test_disc_mask_symmetry_and_area():
    m = D._shape_mask(0, 0, 0, 21)
    np.testing.assert_array_equal(m, m[::-1])          # vertical mirror
    np.testing.assert_array_equal(m, m[:, ::-1])       # horizontal mirror
    np.testing.assert_array_equal(m, m.T)              # diagonal
    r = 21 / 2.0
    assert np.pi * (r - 1) ** 2 < m.sum() < np.pi * (r + 1) ** 2


def test_square_mask_is_full():
    np.testing.assert_array_equal(D._shape_mask(1, 3, 4, 9), np.ones((9, 9), bool))


def test_triangle_mask_narrows_upward():
    m = D._shape_mask(2, 0, 0, 16)
    widths = m.sum(axis=1)
    assert (np.diff(widths) >= 0).all()   # monotone row widths, apex up
    assert widths[-1] == 16               # base spans the box
    assert 0 < widths[0] <= 3


def test_scene_config_validation():
    with pytest.raises(ValueError, match="multiple of 16"):
        SceneConfig(image_size=50)
    with pytest.raises(ValueError, match="object count"):
        SceneConfig(min_objects=4, max_objects=2)
    with pytest.raises(ValueError, match="size range"):
        SceneConfig(min_size=40, max_size=140, image_size=128)
    with pytest.raises(ValueError, match="category_weights"):
        SceneConfig(category_weights=(1.0, 1.0))


# ---------------------------------------------------------------------------
# resize
# ---------------------------------------------------------------------------

def _sample_bilinear(img, y, x):
    # scalar reference sampler with edge clamping
    c, h, w = img.shape
    y0 = min(max(int(np.floor(y)), 0), h - 1)
    x0 = min(max(int(np.floor(x)), 0), w - 1)
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy = min(max(y - y0, 0.0), 1.0)
    fx = min(max(x - x0, 0.0), 1.0)
    out = np.empty(c)
    for ch in range(c):
        top = img[ch, y0, x0] * (1 - fx) + img[ch, y0, x1] * fx
        bot = img[ch, y1, x0] * (1 - fx) + img[ch, y1, x1] * fx
        out[ch] = top * (1 - fy) + bot * fy
    return out


def test_bilinear_resize_matches_reference_sampler():
    r = rng_for(3)
    img = r.random((3, 5, 7))
    for oh, ow in [(5, 7), (10, 14), (3, 4), (8, 5)]:
        out = D.bilinear_resize(img, oh, ow)
        for i in range(oh):
            for j in range(ow):
                y = (i + 0.5) * (5 / oh) - 0.5
                x = (j + 0.5) * (7 / ow) - 0.5
                np.testing.assert_allclose(out[:, i, j], _sample_bilinear(img, y, x),
                                           rtol=0, atol=1e-12)


def test_bilinear_resize_preserves_constant():
    img = np.full((3, 6, 6), 0.37)
    np.testing.assert_allclose(D.bilinear_resize(img, 11, 4), 0.37, atol=1e-12)


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------

def test_dslt_image_roundtrip(tmp_path):
    img, _ = generate_scene(7, SceneConfig(image_size=64, min_size=8, max_size=24))
    p = tmp_path / "img.dslt"
    D.save_image_file(p, img)
    np.testing.assert_array_equal(D.load_image_file(p), img)


def test_ppm_roundtrip_quantises(tmp_path):
    img, _ = generate_scene(8, SceneConfig(image_size=64, min_size=8, max_size=24))
    p = tmp_path / "img.ppm"
    D.save_image_file(p, img)
    back = D.load_image_file(p)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6
    # values already on the 8-bit grid survive exactly
    grid = (np.round(img * 255) / 255).astype(np.float32)
    D.save_image_file(p, grid)
    np.testing.assert_allclose(D.load_image_file(p), grid, atol=1e-7)


def test_image_file_errors(tmp_path):
    with pytest.raises(DataFormatError, match="missing"):
        D.load_image_file(tmp_path / "gone.dslt")
    with pytest.raises(DataFormatError, match="extension"):
        D.save_image_file(tmp_path / "img.png", np.zeros((3, 4, 4)))
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P3\n2 2\n255\nxxxx")
    with pytest.raises(DataFormatError, match="P6"):
        D.load_image_file(p)
    p.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
    with pytest.raises(DataFormatError, match="truncated"):
        D.load_image_file(p)
    q = tmp_path / "vec.dslt"
    tensorio.save_tensor(q, np.zeros(5, dtype=np.float32))
    with pytest.raises(DataFormatError, match=r"\[3,H,W\]"):
        D.load_image_file(q)


# ---------------------------------------------------------------------------
# annotation json
# ---------------------------------------------------------------------------

def _tiny_doc():
    return {"images": [{"id": 0, "width": 32, "height": 32, "file": "images/a.dslt"},
                       {"id": 1, "width": 32, "height": 32, "file": "images/b.dslt"}],
            "annotations": [{"image_id": 0, "category_id": 1, "bbox": [2, 3, 10, 8]},
                            {"image_id": 1, "category_id": 0, "bbox": [0, 0, 5, 5]}],
            "categories": [{"id": i, "name": n} for i, n in enumerate(D.CATEGORY_NAMES)]}


def test_annotations_roundtrip(tmp_path):
    images = [ImageRecord(id=3, width=32, height=32, file="images/x.dslt")]
    annos = {3: [Annotation(category=2, box=(4, 5, 14, 19)),
                 Annotation(category=0, box=(0, 0, 8, 8))]}
    p = tmp_path / "annotations.json"
    D.save_annotations(p, images, annos)
    ds = D.load_annotations(p)
    assert len(ds) == 1 and ds.images[0].id == 3
    got = ds.annos(3)
    assert [a.category for a in got] == [2, 0]
    assert [tuple(map(float, a.box)) for a in got] == [(4, 5, 14, 19), (0, 0, 8, 8)]
    assert ds.annos(99) == []


@pytest.mark.parametrize("mutate,phrase", [
    (lambda d: d.pop("categories"), "categories"),
    (lambda d: d["images"].__setitem__(1, {"id": 0, "width": 32, "height": 32,
                                           "file": "f"}), "duplicate id"),
    (lambda d: d["images"][0].pop("width"), "malformed"),
    (lambda d: d["annotations"][0].__setitem__("image_id", 42), "unknown image"),
    (lambda d: d["annotations"][0].__setitem__("category_id", 9), "unknown category"),
    (lambda d: d["annotations"][0].__setitem__("bbox", [2, 3, 0, 8]), "non-positive"),
    (lambda d: d["annotations"][0].__setitem__("bbox", [28, 3, 10, 8]), "leaves"),
])
def test_annotations_malformed(tmp_path, mutate, phrase):
    doc = _tiny_doc()
    mutate(doc)
    p = tmp_path / "annotations.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(DataFormatError, match=phrase):
        D.load_annotations(p)


def test_annotations_invalid_json(tmp_path):
    p = tmp_path / "annotations.json"
    p.write_text("{not json")
    with pytest.raises(DataFormatError, match="JSON"):
        D.load_annotations(p)
    with pytest.raises(DataFormatError, match="missing"):
        D.load_annotations(tmp_path / "other.json")


# ---------------------------------------------------------------------------
# dataset directories and splits
# ---------------------------------------------------------------------------

def test_generate_and_load_dataset(tmp_path):
    cfg = SceneConfig(image_size=32, min_size=6, max_size=14)
    ds = D.generate_dataset(tmp_path / "d", count=5, seed=11, cfg=cfg)
    assert len(ds) == 5
    meta = json.loads((tmp_path / "d" / "dataset.json").read_text())
    assert meta["count"] == 5 and meta["seed"] == 11

    back = D.load_dataset(tmp_path / "d")
    assert len(back) == 5
    for rec in back.images:
        img = back.load_image(rec)
        assert img.shape == (3, 32, 32)
        want = ds.annos(rec.id)
        got = back.annos(rec.id)
        assert [a.category for a in got] == [a.category for a in want]
        for ga, wa in zip(got, want):
            assert tuple(map(float, ga.box)) == tuple(map(float, wa.box))

    # regenerating with the same seed reproduces the image bytes
    D.generate_dataset(tmp_path / "d2", count=5, seed=11, cfg=cfg)
    for i in range(5):
        a = (tmp_path / "d" / "images" / f"scene_{i:06d}.dslt").read_bytes()
        b = (tmp_path / "d2" / "images" / f"scene_{i:06d}.dslt").read_bytes()
        assert a == b


def test_split_properties():
    for count, frac, seed in [(40, 0.05, 0), (40, 0.05, 5), (100, 0.1, 1),
                              (7, 0.5, 2), (3, 1.0, 3)]:
        lab, unlab = split_dataset(count, frac, seed)
        assert sorted(lab + unlab) == list(range(count))
        assert not set(lab) & set(unlab)
        assert len(lab) == max(1, int(round(count * frac)))
        assert split_dataset(count, frac, seed) == (lab, unlab)
    # tiny fraction still yields one labeled image
    lab, _ = split_dataset(50, 0.001, 0)
    assert len(lab) == 1


def test_split_validation():
    with pytest.raises(ValueError, match="labeled_fraction"):
        split_dataset(10, 0.0, 0)
    with pytest.raises(ValueError, match="labeled_fraction"):
        split_dataset(10, 1.5, 0)
    with pytest.raises(ValueError, match="empty"):
        split_dataset(0, 0.5, 0)


def test_dataset_unknown_id(tmp_path):
    ds = D.generate_dataset(tmp_path / "d", count=2, seed=1,
                            cfg=SceneConfig(image_size=32, min_size=6, max_size=14))
    with pytest.raises(KeyError):
        ds.load_image(17)

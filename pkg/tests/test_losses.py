"""Loss terms: scalar oracles, masking guarantees, gradient checks."""

import math

import numpy as np
import pytest

from densedet import losses as L
from densedet import model as M
from densedet import tensor as T
from densedet.data import Annotation
from helpers import gradcheck


def rng_for(tag):
    return np.random.default_rng([404, tag])


def geom32():
    return M.PyramidGeometry.build(32)


def random_output(tag, batch=1, geom=None, dtype=np.float64, grad=False):
    geom = geom or geom32()
    r = rng_for(tag)
    cls, ctr, dist = [], [], []
    for h, w in geom.shapes:
        cls.append(T.Tensor(r.standard_normal((batch, 3, h, w)), dtype=dtype,
                            requires_grad=grad))
        ctr.append(T.Tensor(r.standard_normal((batch, 1, h, w)), dtype=dtype,
                            requires_grad=grad))
        dist.append(T.Tensor(r.uniform(0.5, 20.0, (batch, 4, h, w)), dtype=dtype,
                             requires_grad=grad))
    return M.HeadOutput(cls=cls, ctr=ctr, dist=dist)


def random_targets(tag, batch=1, geom=None):
    geom = geom or geom32()
    r = rng_for(1000 + tag)
    per_image = []
    for _ in range(batch):
        annos = []
        for _ in range(int(r.integers(1, 4))):
            w = int(r.integers(4, 26))
            h = int(r.integers(4, 26))
            x1 = int(r.integers(0, 32 - w))
            y1 = int(r.integers(0, 32 - h))
            annos.append(Annotation(int(r.integers(0, 3)), (x1, y1, x1 + w, y1 + h)))
        per_image.append(M.assign_targets(annos, geom))
    return M.stack_targets(per_image)


# ---------------------------------------------------------------------------
# elementwise building blocks
# ---------------------------------------------------------------------------

def test_softplus_matches_reference_and_saturates():
    z = np.array([-1000.0, -50.0, -2.0, 0.0, 2.0, 50.0, 1000.0])
    out = L.softplus(T.Tensor(z)).data
    ref = np.logaddexp(0.0, z)
    # atol floor: log(1 + x) underflows for x below float64 eps, log1p does not
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-15)
    assert np.isfinite(out).all()
    assert out[0] == 0.0 and out[-1] == 1000.0


def test_binary_ce_scalar_oracle():
    for z in (-3.0, -0.5, 0.0, 1.7):
        for c in (0.0, 0.3, 1.0):
            got = float(L.binary_ce_logits(T.Tensor(np.float64(z)),
                                           T.Tensor(np.float64(c))).data)
            p = 1.0 / (1.0 + math.exp(-z))
            want = -c * math.log(p) - (1 - c) * math.log(1 - p)
            np.testing.assert_allclose(got, want, rtol=1e-12)


def test_focal_sum_scalar_oracle():
    # one pixel, class 1 positive
    logits = T.Tensor(np.array([0.5, -0.3, 0.2]).reshape(1, 3, 1, 1))
    cat = np.full((1, 1, 1), 1, dtype=np.int32)
    valid = np.ones((1, 1, 1), dtype=bool)
    got = float(L._focal_sum(logits, cat, valid, 3).data)

    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    want = 0.0
    for k, z in enumerate([0.5, -0.3, 0.2]):
        p = sig(z)
        if k == 1:
            want += 0.25 * (1 - p) ** 2 * (-math.log(p))
        else:
            want += 0.75 * p ** 2 * (-math.log(1 - p))
    np.testing.assert_allclose(got, want, rtol=1e-12)

    # background pixel: every class takes the negative branch
    cat_bg = np.full((1, 1, 1), M.BACKGROUND, dtype=np.int32)
    got_bg = float(L._focal_sum(logits, cat_bg, valid, 3).data)
    want_bg = sum(0.75 * sig(z) ** 2 * (-math.log(1 - sig(z)))
                  for z in [0.5, -0.3, 0.2])
    np.testing.assert_allclose(got_bg, want_bg, rtol=1e-12)


def test_iou_loss_scalar_oracle():
    # prediction (8,4,4,4) px vs target (1,1,1,1) at stride 4:
    # normalized pred (2,1,1,1); inter 2*2=4, union 6+4-4=6, iou 2/3
    pred = T.Tensor(np.array([8.0, 4.0, 4.0, 4.0]).reshape(1, 4, 1, 1))
    tgt = np.ones((1, 4, 1, 1))
    pos = np.ones((1, 1, 1), dtype=bool)
    got = float(L._iou_loss_sum(pred, tgt, pos, 4.0).data)
    np.testing.assert_allclose(got, -math.log(2.0 / 3.0), rtol=1e-12)

    perfect = T.Tensor(np.full((1, 4, 1, 1), 4.0))
    assert float(L._iou_loss_sum(perfect, tgt, pos, 4.0).data) == 0.0

    masked = float(L._iou_loss_sum(pred, tgt, np.zeros((1, 1, 1), bool), 4.0).data)
    assert masked == 0.0


# ---------------------------------------------------------------------------
# detection losses
# ---------------------------------------------------------------------------

def test_supervised_loss_normalizes_by_positive_count():
    geom = geom32()
    out1 = random_output(1)
    tgt1 = random_targets(1)
    v1 = float(L.supervised_loss(out1, tgt1).data)
    assert np.isfinite(v1) and v1 > 0

    # duplicating the image doubles both the sum and n_pos
    out2 = M.HeadOutput(
        cls=[T.Tensor(np.concatenate([t.data, t.data])) for t in out1.cls],
        ctr=[T.Tensor(np.concatenate([t.data, t.data])) for t in out1.ctr],
        dist=[T.Tensor(np.concatenate([t.data, t.data])) for t in out1.dist],
    )
    tgt2 = M.DenseTargets(cat=[np.concatenate([c, c]) for c in tgt1.cat],
                          dist=[np.concatenate([d, d]) for d in tgt1.dist],
                          ctr=[np.concatenate([c, c]) for c in tgt1.ctr])
    v2 = float(L.supervised_loss(out2, tgt2).data)
    np.testing.assert_allclose(v2, v1, rtol=1e-12)


def test_loss_without_positives_is_finite_focal_only():
    geom = geom32()
    out = random_output(2)
    empty = M.stack_targets([M.assign_targets([], geom)])
    v = float(L.supervised_loss(out, empty).data)
    assert np.isfinite(v) and v > 0
    # equals the bare focal sum over all levels (divided by max(0,1) = 1)
    want = sum(float(L._focal_sum(out.cls[l], empty.cat[l],
                                  empty.cat[l] != M.IGNORE, 3).data)
               for l in range(3))
    np.testing.assert_allclose(v, want, rtol=1e-12)


def test_loss_shape_validation():
    out = random_output(3)
    tgt = random_targets(3)
    with pytest.raises(ValueError, match="levels"):
        L.supervised_loss(M.HeadOutput(cls=out.cls[:2], ctr=out.ctr[:2],
                                       dist=out.dist[:2]), tgt)
    bad = M.DenseTargets(cat=[np.zeros((1, 5, 5), np.int32) for _ in range(3)],
                         dist=tgt.dist, ctr=tgt.ctr)
    with pytest.raises(ValueError, match="grid"):
        L.supervised_loss(out, bad)


# ---------------------------------------------------------------------------
# ignore gating
# ---------------------------------------------------------------------------

def test_ignored_pixels_contribute_no_loss_and_no_gradient():
    """Marking a pixel IGNORE must zero its influence exactly, not merely
    shrink it: the loss value is bit-identical under any logit change there
    and the gradient at the pixel is exactly 0.0."""
    out = random_output(4, grad=True)
    tgt = random_targets(4)
    tgt.cat[0][0, 2, 3] = M.IGNORE
    tgt.cat[1][0, 1, 1] = M.IGNORE

    loss = L.unsupervised_loss(out, tgt)
    loss.backward()
    for level, (y, x) in ((0, (2, 3)), (1, (1, 1))):
        g = out.cls[level].grad
        assert g is not None
        assert (g[0, :, y, x] == 0.0).all()

    base = float(loss.data)
    out.cls[0].data[0, :, 2, 3] = 123.0   # wild value at the ignored pixel
    out.cls[1].data[0, :, 1, 1] = -77.0
    again = float(L.unsupervised_loss(out, tgt).data)
    assert again == base  # bitwise equality, not approximate


def test_non_positive_pixels_get_no_box_or_centerness_gradient():
    out = random_output(5, grad=True)
    tgt = random_targets(5)
    L.supervised_loss(out, tgt).backward()
    for level in range(3):
        pos = (tgt.cat[level] >= 0) & (tgt.cat[level] < M.BACKGROUND)
        gd = out.dist[level].grad
        gc = out.ctr[level].grad
        if gd is None:
            assert not pos.any()
            continue
        assert (gd[~pos[:, None].repeat(4, 1)] == 0.0).all()
        assert (gc[~pos[:, None]] == 0.0).all()
        if pos.any():
            assert np.abs(gd[pos[:, None].repeat(4, 1)]).max() > 0


# ---------------------------------------------------------------------------
# gradient checks through the full losses
# ---------------------------------------------------------------------------

def _loss_gradcheck(tag, loss_fn, with_ignore=False):
    geom = geom32()
    tgt = random_targets(tag)
    if with_ignore:
        tgt.cat[0][0, 1, 1] = M.IGNORE
    base = random_output(tag)
    arrays = ([t.data.copy() for t in base.cls]
              + [t.data.copy() for t in base.ctr]
              + [t.data.copy() for t in base.dist])

    def build(*ts):
        out = M.HeadOutput(cls=list(ts[0:3]), ctr=list(ts[3:6]), dist=list(ts[6:9]))
        return loss_fn(out, tgt)

    gradcheck(build, arrays, rtol=2e-4, atol=1e-7)


def test_gradcheck_supervised_loss():
    _loss_gradcheck(10, L.supervised_loss)


def test_gradcheck_unsupervised_loss_with_ignores():
    _loss_gradcheck(11, L.unsupervised_loss, with_ignore=True)


def test_gradcheck_scale_consistency():
    r = rng_for(12)
    shapes = [(1, 3, 4, 4), (1, 3, 2, 2)]
    ctr_shapes = [(1, 1, 4, 4), (1, 1, 2, 2)]
    arrays = [r.standard_normal(s) for s in shapes + ctr_shapes] * 2

    def build(sc0, sc1, sctr0, sctr1, fc0, fc1, fctr0, fctr1):
        small = M.HeadOutput(cls=[sc0, sc1], ctr=[sctr0, sctr1],
                             dist=[None, None])
        full = M.HeadOutput(cls=[T.Tensor(np.zeros((1, 3, 8, 8))), fc0, fc1],
                            ctr=[T.Tensor(np.zeros((1, 1, 8, 8))), fctr0, fctr1],
                            dist=[None, None, None])
        return L.scale_consistency_loss(small, full)

    gradcheck(build, arrays, rtol=2e-4)


# ---------------------------------------------------------------------------
# scale consistency
# ---------------------------------------------------------------------------

def test_scale_loss_zero_for_identical_score_maps():
    r = rng_for(13)
    maps = [r.standard_normal((2, 3, 8, 8)), r.standard_normal((2, 3, 4, 4))]
    ctrs = [r.standard_normal((2, 1, 8, 8)), r.standard_normal((2, 1, 4, 4))]
    small = M.HeadOutput(cls=[T.Tensor(m) for m in maps],
                         ctr=[T.Tensor(c) for c in ctrs], dist=[None, None])
    full = M.HeadOutput(
        cls=[T.Tensor(np.zeros((2, 3, 16, 16)))] + [T.Tensor(m) for m in maps],
        ctr=[T.Tensor(np.zeros((2, 1, 16, 16)))] + [T.Tensor(c) for c in ctrs],
        dist=[None] * 3)
    assert float(L.scale_consistency_loss(small, full).data) == 0.0


def test_scale_loss_hand_value():
    # all logits zero except one pixel of the full view's level-1 class map
    small = M.HeadOutput(cls=[T.Tensor(np.zeros((1, 3, 4, 4))),
                              T.Tensor(np.zeros((1, 3, 2, 2)))],
                         ctr=[T.Tensor(np.zeros((1, 1, 4, 4))),
                              T.Tensor(np.zeros((1, 1, 2, 2)))],
                         dist=[None, None])
    f1 = np.zeros((1, 3, 4, 4))
    f1[0, 0, 1, 2] = 3.0
    full = M.HeadOutput(cls=[T.Tensor(np.zeros((1, 3, 8, 8))), T.Tensor(f1),
                             T.Tensor(np.zeros((1, 3, 2, 2)))],
                        ctr=[T.Tensor(np.zeros((1, 1, 8, 8))),
                             T.Tensor(np.zeros((1, 1, 4, 4))),
                             T.Tensor(np.zeros((1, 1, 2, 2)))],
                        dist=[None] * 3)
    got = float(L.scale_consistency_loss(small, full).data)
    p = 1.0 / (1.0 + math.exp(-3.0))
    want = ((p * 0.5 - 0.25) ** 2) / (3 * 4 * 4)  # one cell of the level-0 mean
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_scale_loss_rejects_mismatched_grids():
    out = random_output(14)
    with pytest.raises(ValueError, match="stride-2 pair"):
        L.scale_consistency_loss(out, out)
    single = M.HeadOutput(cls=out.cls[:1], ctr=out.ctr[:1], dist=out.dist[:1])
    with pytest.raises(ValueError, match="two pyramid levels"):
        L.scale_consistency_loss(single, single)


# ---------------------------------------------------------------------------
# combination
# ---------------------------------------------------------------------------

def test_total_loss_combines_weighted_terms():
    ls = T.Tensor(np.float64(1.5))
    lu = T.Tensor(np.float64(0.25))
    lsc = T.Tensor(np.float64(0.1))
    assert float(L.total_loss(ls).data) == 1.5
    np.testing.assert_allclose(float(L.total_loss(ls, lu, alpha=3.0).data), 2.25)
    np.testing.assert_allclose(
        float(L.total_loss(ls, lu, lsc, alpha=2.0, scale_weight=0.5).data),
        1.5 + 0.5 + 0.05)
    with pytest.raises(ValueError, match="non-negative"):
        L.total_loss(ls, lu, alpha=-1.0)


def test_joint_score_map_is_sigmoid_product():
    r = rng_for(15)
    cls = r.standard_normal((1, 3, 4, 4))
    ctr = r.standard_normal((1, 1, 4, 4))
    got = L.joint_score_map(T.Tensor(cls), T.Tensor(ctr)).data
    want = (1 / (1 + np.exp(-cls))) * (1 / (1 + np.exp(-ctr)))
    np.testing.assert_allclose(got, want, rtol=1e-12)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmda import diffcore as dc
from cmda.adapt import Discriminator
from cmda.detect import (BoxCoder, Detection, DetectionHead, HeadOutput, assign_region, assign_targets, decode,
                         make_pseudo_labels, nms, read_detections, write_detections)
from cmda.diffcore import ContractError, Tensor, check_gradients
from cmda.geometry import Box7, iou_bev
from cmda.lidarbev import VoxelGridSpec
from cmda.losses import domain_loss

from helpers import random_box
from oracles import brute_nms

GRID = VoxelGridSpec((-6.4, -6.4, -2.0, 6.4, 6.4, 4.0), (1.6, 1.6, 0.75))  # 8 x 8 x 8


def det(box, score, cell=0):
    return Detection(box, score, np.zeros(2), cell)


def head_output(scores, box=None, feats=None):
    X, Y = scores.shape
    box = np.zeros((X, Y, 8)) if box is None else box
    box = box.copy()
    box[..., 7] = np.where(box[..., 6:8].any(axis=-1), box[..., 7], 1.0)  # yaw 0 by default
    feats = np.zeros((X, Y, 3)) if feats is None else feats
    logits = np.log(scores) - np.log1p(-scores)
    return HeadOutput(Tensor(logits), Tensor(scores), Tensor(box), Tensor(feats))


# ----------------------------------------------------------------------- head


def test_head_shapes_and_zero_weights():
    head = DetectionHead(12, feat_channels=5, seed=0)
    bev = np.random.default_rng(0).normal(size=(4, 3, 12))
    out = head(bev)
    assert out.objectness.shape == (4, 3) and out.box_params.shape == (4, 3, 8)
    assert out.cell_features.shape == (4, 3, 5)
    assert ((out.objectness.data > 0) & (out.objectness.data < 1)).all()
    assert np.array_equal(head(bev).objectness.data, out.objectness.data)
    head.zero_weights()
    assert np.array_equal(head(bev).objectness.data, np.full((4, 3), 0.5))
    with pytest.raises(ContractError):
        head(np.zeros((4, 3, 11)))


def test_head_gradient():
    head = DetectionHead(6, feat_channels=4, seed=1)
    rng = np.random.default_rng(1)
    bev = Tensor(rng.normal(size=(3, 3, 6)), requires_grad=True)
    wo, wb = rng.normal(size=(3, 3)), rng.normal(size=(3, 3, 8))

    def loss():
        out = head(bev)
        return dc.add(dc.sum(dc.mul(out.objectness, wo)), dc.sum(dc.mul(out.box_params, wb)))

    rep = check_gradients(loss, list(head.params.values()) + [bev])
    assert rep["ok"], rep


def test_head_and_discriminator_through_reversal():
    head = DetectionHead(6, feat_channels=4, seed=2)
    disc = Discriminator(4, hidden=5, seed=3)
    rng = np.random.default_rng(2)
    bev = rng.normal(size=(3, 3, 6))
    cells, labels = [0, 4, 7], [0, 1, 1]

    def loss(scale=1.0):
        feats = dc.reshape(head(bev).cell_features, (9, 4))
        logits = disc(dc.grad_reverse(dc.take_rows(feats, cells), scale))
        return domain_loss(logits, labels)[0]

    trunk = [head.params["trunk.w"], head.params["trunk.b"]]
    params = trunk + list(disc.params.values())
    rep = check_gradients(loss, list(disc.params.values()))
    assert rep["ok"], rep
    # head gradients are exactly the negation of the unreversed ones (FD sees the plain loss)
    for p in params:
        p.grad = None
    loss(1.0).backward()
    rev = {id(p): p.grad.copy() for p in trunk}
    d_rev = {id(p): p.grad.copy() for p in disc.params.values()}
    for p in params:
        p.grad = None
    loss(-1.0).backward()
    for p in trunk:
        assert np.array_equal(rev[id(p)], -p.grad)
    for p in disc.params.values():
        assert np.array_equal(d_rev[id(p)], p.grad)
    rep = check_gradients(lambda: loss(-1.0), trunk)
    assert rep["ok"], rep


# --------------------------------------------------------------------- decode


def test_zero_residual_decodes_to_cell_centre():
    coder = BoxCoder(GRID)
    scores = np.full((8, 8), 0.05)
    scores[2, 5] = 0.9
    out = head_output(scores)
    out.box_params.data[..., 6:8] = [0.0, 1.0]
    dets = decode(out, coder, 0.3)
    assert len(dets) == 1
    b = dets[0].box
    assert (b.x, b.y) == GRID.cell_center(2, 5)
    assert b.z == coder.z_ref and (b.l, b.w, b.h) == coder.size_ref and b.yaw == 0.0
    assert dets[0].score == 0.9 and dets[0].cell == 2 * 8 + 5
    assert decode(out, coder, 1.0) == []


def test_decode_orders_by_score_and_copies_features():
    coder = BoxCoder(GRID)
    rng = np.random.default_rng(3)
    scores = rng.uniform(0.01, 0.99, size=(8, 8))
    feats = rng.normal(size=(8, 8, 3))
    out = head_output(scores, feats=feats)
    dets = decode(out, coder, 0.5)
    assert len(dets) == int((scores >= 0.5).sum())
    assert all(a.score >= b.score for a, b in zip(dets, dets[1:]))
    for d in dets:
        i, j = divmod(d.cell, 8)
        assert d.score == scores[i, j] and np.array_equal(d.instance_feature, feats[i, j])
    assert len(decode(out, coder, 0.5, max_dets=3)) == 3


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_encode_decode_round_trip(seed):
    rng = np.random.default_rng(seed)
    coder = BoxCoder(GRID)
    b = Box7(rng.uniform(-6.3, 6.3), rng.uniform(-6.3, 6.3), rng.uniform(-1.5, 0.0), rng.uniform(3, 5),
             rng.uniform(1.5, 2.2), rng.uniform(1.3, 1.8), rng.uniform(-math.pi, math.pi))
    i, j = coder.cell_of(b.x, b.y)
    r = coder.encode(b, i, j)
    assert -0.5 <= r[0] <= 0.5 and -0.5 <= r[1] <= 0.5
    back = coder.decode(r, i, j)
    assert np.allclose(back.as_array(), b.as_array(), atol=1e-9)
    t = assign_targets([b], coder)
    assert t.objectness.sum() == 1 and t.pos_index[0] == i * 8 + j


def test_assign_targets_first_box_wins_shared_cell():
    coder = BoxCoder(GRID)
    a = Box7(0.1, 0.1, -0.8, 4, 2, 1.5, 0.0)
    b = Box7(0.3, 0.2, -0.8, 4, 2, 1.5, 0.5)
    far = Box7(30.0, 0.0, -0.8, 4, 2, 1.5, 0.0)
    t = assign_targets([a, b, far], coder)
    assert t.objectness.sum() == 1 and len(t.residuals) == 1
    assert np.allclose(t.residuals[0], coder.encode(a, *coder.cell_of(a.x, a.y)))


# ------------------------------------------------------------------------ nms


def test_nms_examples():
    b = Box7(0, 0, 0, 4, 2, 1.5, 0)
    kept = nms([det(b, 0.8, 1), det(b, 0.9, 2)])
    assert [d.score for d in kept] == [0.9]
    far = [det(Box7(10.0 * k, 0, 0, 4, 2, 1.5, 0), 0.5 + 0.01 * k, k) for k in range(4)]
    assert len(nms(far)) == 4
    tie = nms([det(b, 0.7, 5), det(b, 0.7, 3)])
    assert [d.cell for d in tie] == [3]
    assert nms([]) == []


@pytest.mark.parametrize("seed", range(10))
def test_nms_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    boxes = [random_box(rng, 6.0) for _ in range(20)]
    scores = rng.uniform(0, 1, 20).round(2)  # rounding forces some ties
    dets = [det(b, float(s), k) for k, (b, s) in enumerate(zip(boxes, scores))]
    for thresh in (0.1, 0.3, 0.5):
        kept = nms(dets, thresh)
        assert [d.cell for d in kept] == brute_nms(boxes, scores, thresh, iou_bev)
        assert all(a.score >= b.score for a, b in zip(kept, kept[1:]))
        for x in range(len(kept)):
            for y in range(x + 1, len(kept)):
                assert iou_bev(kept[x].box, kept[y].box) < thresh


# --------------------------------------------------------------------- region


def _at(deg, r=10.0):
    a = math.radians(deg)
    return det(Box7(r * math.cos(a), r * math.sin(a), 0, 4, 2, 1.5, 0), 0.5)


def test_assign_region_examples():
    dets = [_at(d) for d in (10, 100, 200, 300)]
    assert all(d.region == "source" for d in assign_region(dets, 1.0, 2 * math.pi))
    assert all(d.region == "target" for d in assign_region(dets, 1.0, 0.0))
    d = assign_region([_at(45)], 0.0, math.pi)[0]
    assert d.region == "source"
    assert assign_region([_at(225)], 0.0, math.pi)[0].region == "target"
    assert assign_region([], 0.0, 1.0) == []


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-10, 10))
def test_assign_region_rotation_invariant(seed, angle):
    rng = np.random.default_rng(seed)
    degs = rng.uniform(0, 360, 8)
    start, theta = float(rng.uniform(0, 2 * math.pi)), float(rng.uniform(0.5, 5.5))
    dets = [_at(d) for d in degs]
    rot = [det(d.box.rotated_about_origin(angle), d.score) for d in dets]
    a = [d.region for d in assign_region(dets, start, theta)]
    b = [d.region for d in assign_region(rot, start + angle, theta)]
    # skip centres within float noise of a cut line
    rel = [((math.radians(d) - start) % (2 * math.pi)) for d in degs]
    keep = [min(r, abs(r - theta), 2 * math.pi - r) > 1e-9 for r in rel]
    assert [x for x, k in zip(a, keep) if k] == [x for x, k in zip(b, keep) if k]


# --------------------------------------------------------------- pseudo-labels


def test_pseudo_label_examples():
    b1, b2 = Box7(0, 0, 0, 4, 2, 1.5, 0), Box7(9, 0, 0, 4, 2, 1.5, 0)
    assert make_pseudo_labels([det(b1, 0.5)], 0.6).boxes == []
    both = make_pseudo_labels([det(b1, 0.9), det(b2, 0.7)], 0.6)
    assert both.boxes == [b1, b2] and both.scores == [0.9, 0.7]
    one = make_pseudo_labels([det(b1, 0.9), det(b2, 0.5)], 0.6)
    assert one.boxes == [b1] and one.threshold == 0.6
    assert all(s >= one.threshold for s in one.scores)
    assert make_pseudo_labels([det(b1, 0.6)], 0.6).boxes == [b1]


def test_detection_text_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    rows = [(f"f{k % 3}", det(random_box(rng), float(rng.uniform()))) for k in range(7)]
    p = tmp_path / "dets.txt"
    write_detections(p, rows)
    back = read_detections(p)
    assert sorted(back) == ["f0", "f1", "f2"]
    flat = [(fid, b, s) for fid in sorted(back) for b, s in back[fid]]
    ref = sorted(((fid, d.box, d.score) for fid, d in rows), key=lambda t: t[0])
    assert flat == ref
    p.write_text("f0 1 2 3\n")
    with pytest.raises(ValueError, match="dets.txt:1"):
        read_detections(p)

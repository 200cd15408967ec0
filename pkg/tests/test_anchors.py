import numpy as np
import pytest

import oracles
from mmcdet.anchors import (AnchorSet, decode_boxes, decode_detections, encode_boxes, iou_matrix,
                            nms, to_center, to_corners)
from mmcdet.losses import match_anchors


@pytest.fixture(scope="module")
def anchors():
    return AnchorSet()


def test_golden_anchor_layout(anchors):
    assert len(anchors) == 252
    b = anchors.boxes
    # interior cell (row 3, col 3) of the 8x8 scale, all three ratios
    k = (3 * 8 + 3) * 3
    np.testing.assert_allclose(b[k], [3.5 / 8, 3.5 / 8, 0.16, 0.16])
    np.testing.assert_allclose(b[k + 1, 2:], [0.16 * np.sqrt(0.5), 0.16 / np.sqrt(0.5)])
    np.testing.assert_allclose(b[k + 2, 2:], [0.16 * np.sqrt(2), 0.16 / np.sqrt(2)])
    # a corner anchor is clipped to the image
    np.testing.assert_allclose(to_corners(b[0]), [0, 0, 1 / 16 + 0.08, 1 / 16 + 0.08])
    # every anchor lies inside the image
    c = to_corners(b)
    assert c.min() >= 0 and c.max() <= 1


def test_corner_center_roundtrip():
    rng = np.random.default_rng(1)
    b = np.column_stack([rng.random((20, 2)), 0.05 + rng.random((20, 2)) * 0.3])
    np.testing.assert_allclose(to_center(to_corners(b)), b, atol=1e-12)


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(2)
    a = np.column_stack([rng.random((7, 2)), 0.05 + 0.4 * rng.random((7, 2))])
    b = np.column_stack([rng.random((5, 2)), 0.05 + 0.4 * rng.random((5, 2))])
    m = iou_matrix(a, b)
    for i in range(7):
        for j in range(5):
            assert m[i, j] == pytest.approx(oracles.box_iou(a[i], b[j]), abs=1e-12)


def test_zero_deltas_decode_to_anchors(anchors):
    logits = np.zeros((252, 4))
    logits[:, 1] = 10.0
    dets = decode_detections(logits, np.zeros((252, 4)), anchors, score_threshold=0.5, nms_iou=1.0,
                             max_detections=1000)
    assert len(dets) == 252
    for d in dets:
        np.testing.assert_array_equal(d.box, anchors.boxes[d.anchor])


def test_exp_width_decoding():
    anchor = np.array([0.5, 0.5, 0.2, 0.2])
    out = decode_boxes(np.array([0, 0, np.log(2) / 0.2, 0]), anchor)
    assert out[2] == pytest.approx(0.4, abs=1e-5)


def test_encode_decode_roundtrip(anchors):
    rng = np.random.default_rng(3)
    boxes = np.column_stack([0.2 + 0.6 * rng.random((252, 2)), 0.05 + 0.3 * rng.random((252, 2))])
    np.testing.assert_allclose(decode_boxes(encode_boxes(boxes, anchors.boxes), anchors.boxes), boxes,
                               atol=1e-10)


def test_nms_suppresses_duplicate():
    boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]])
    keep = nms(boxes, np.array([0.8, 0.9]), 0.5)
    assert keep.tolist() == [1]


def test_nms_order_invariant():
    rng = np.random.default_rng(4)
    boxes = np.column_stack([rng.random((30, 2)), 0.1 + 0.2 * rng.random((30, 2))])
    scores = np.round(rng.random(30), 1)  # plenty of ties
    keep = set(nms(boxes, scores, 0.3).tolist())
    perm = rng.permutation(30)
    keep_p = nms(boxes[perm], scores[perm], 0.3, order_key=perm)
    assert {int(perm[k]) for k in keep_p} == keep


def test_decode_is_idempotent(anchors):
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((252, 4)) * 3
    deltas = rng.standard_normal((252, 4)) * 0.5
    dets = decode_detections(logits, deltas, anchors)
    re = deltas.copy()
    for d in dets:
        re[d.anchor] = encode_boxes(np.array(d.box), anchors.boxes[d.anchor])
    again = {(d.anchor, d.class_id): d.box for d in decode_detections(logits, re, anchors)}
    for d in dets:
        np.testing.assert_allclose(again[(d.anchor, d.class_id)], d.box, atol=1e-5)


def test_match_truth_equal_to_anchor(anchors):
    box = tuple(anchors.boxes[100])
    t = match_anchors(anchors, [(box, 2)])
    assert t.labels[100] == 2
    np.testing.assert_allclose(t.deltas[100], 0, atol=1e-12)


def test_match_no_truths(anchors):
    t = match_anchors(anchors, [])
    assert not t.positive.any()


@pytest.mark.parametrize("seed", [7, 8, 9, 10])
def test_match_equals_exhaustive_oracle(anchors, seed):
    rng = np.random.default_rng(seed)
    truths = [((float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)),
                float(rng.uniform(0.08, 0.5)), float(rng.uniform(0.08, 0.5))), int(rng.integers(1, 4)))
              for _ in range(2 if seed == 7 else int(rng.integers(1, 6)))]
    t = match_anchors(anchors, truths)
    labels, deltas = oracles.match_anchors([tuple(b) for b in anchors.boxes], truths)
    np.testing.assert_array_equal(t.labels, labels)
    np.testing.assert_allclose(t.deltas, deltas, atol=1e-9)

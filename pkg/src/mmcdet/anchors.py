"""Prior boxes, SSD box coding, NMS and detection decoding.

Boxes are (cx, cy, w, h) in normalized image coordinates throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CENTER_VARIANCE = 0.1
SIZE_VARIANCE = 0.2


@dataclass(frozen=True)
class AnchorSet:
    scales: tuple[int, ...] = (8, 4, 2)
    sizes: tuple[float, ...] = (0.16, 0.32, 0.6)
    ratios: tuple[float, ...] = (1.0, 0.5, 2.0)  # width / height
    boxes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.sizes) != len(self.scales):
            raise ValueError("one anchor size per scale is required")
        out = []
        for res, size in zip(self.scales, self.sizes):
            wh = [(min(1.0, size * np.sqrt(r)), min(1.0, size / np.sqrt(r))) for r in self.ratios]
            for y in range(res):
                for x in range(res):
                    cx, cy = (x + 0.5) / res, (y + 0.5) / res
                    out.extend((cx, cy, w, h) for w, h in wh)
        # clipped to the image so zero deltas decode back to the anchor exactly
        object.__setattr__(self, "boxes", clip_boxes(np.array(out, dtype=np.float64)))

    @property
    def per_cell(self) -> int:
        return len(self.ratios)

    def __len__(self) -> int:
        return len(self.boxes)


def to_corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def to_center(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2, c[..., 2:] - c[..., :2]], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between center-format boxes a (N,4) and b (M,4)."""
    ca, cb = to_corners(np.reshape(a, (-1, 4))), to_corners(np.reshape(b, (-1, 4)))
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    inter = np.clip(rb - lt, 0, None).prod(axis=-1)
    area_a = (ca[:, 2:] - ca[:, :2]).prod(axis=-1)
    area_b = (cb[:, 2:] - cb[:, :2]).prod(axis=-1)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    boxes, anchors = np.asarray(boxes, np.float64), np.asarray(anchors, np.float64)
    d = np.empty(np.broadcast_shapes(boxes.shape, anchors.shape))
    d[..., :2] = (boxes[..., :2] - anchors[..., :2]) / (anchors[..., 2:] * CENTER_VARIANCE)
    d[..., 2:] = np.log(boxes[..., 2:] / anchors[..., 2:]) / SIZE_VARIANCE
    return d


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    deltas, anchors = np.asarray(deltas, np.float64), np.asarray(anchors, np.float64)
    b = np.empty(np.broadcast_shapes(deltas.shape, anchors.shape))
    b[..., :2] = anchors[..., :2] + deltas[..., :2] * anchors[..., 2:] * CENTER_VARIANCE
    b[..., 2:] = anchors[..., 2:] * np.exp(np.clip(deltas[..., 2:] * SIZE_VARIANCE, -10, 10))
    return b


def clip_boxes(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, np.float64)
    c = to_corners(b)
    outside = ((c < 0) | (c > 1)).any(axis=-1, keepdims=True)
    return np.where(outside, to_center(np.clip(c, 0.0, 1.0)), b)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
        order_key: np.ndarray | None = None) -> np.ndarray:
    """Greedy NMS; returns kept indices. Equal scores fall back to ``order_key`` ascending."""
    boxes = np.asarray(boxes, np.float64)
    scores = np.asarray(scores, np.float64)
    if order_key is None:
        order_key = np.arange(len(scores))
    order = np.lexsort((order_key, -scores))
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.array(keep, dtype=int)


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float
    anchor: int = -1


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decode_detections(class_logits, box_deltas, anchors: AnchorSet,
                      score_threshold: float = 0.05, nms_iou: float = 0.45,
                      max_detections: int = 100) -> list[Detection]:
    """Turn one image's head outputs (A,K+1) / (A,4) into detections."""
    if not (0 <= score_threshold <= 1 and 0 <= nms_iou <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    logits = np.asarray(class_logits, dtype=np.float64)
    probs = _softmax(logits)
    boxes = clip_boxes(decode_boxes(box_deltas, anchors.boxes))
    dets: list[Detection] = []
    for c in range(1, probs.shape[1]):
        idx = np.nonzero(probs[:, c] > score_threshold)[0]
        if idx.size == 0:
            continue
        kept = idx[nms(boxes[idx], probs[idx, c], nms_iou, order_key=idx)]
        dets.extend(Detection(tuple(float(v) for v in boxes[i]), c, float(probs[i, c]), int(i))
                    for i in kept)
    dets.sort(key=lambda d: (-d.score, d.anchor, d.class_id))
    return dets[:max_detections]

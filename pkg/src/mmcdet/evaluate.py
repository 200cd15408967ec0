"""Detection metrics: IoU, greedy TP/FP matching, PR curves, AP and F1 at recall 0.5.

PR points are taken at every distinct score threshold, so detections with
equal scores enter the curve together.  AP is the area under the monotone
precision envelope (all-point interpolation).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .anchors import Detection, decode_detections, iou_matrix, to_center

log = logging.getLogger(__name__)

SPLITS = ("all", "day", "night")
EVAL_SCORE_THRESHOLD = 0.05
EVAL_NMS_IOU = 0.45
REPORT_COLUMNS = ("run_id", "variant", "split", "class", "AP", "F1", "n_gt", "n_det")


def iou(a, b, fmt: str = "center") -> float:
    """IoU of two boxes, (cx, cy, w, h) or (x1, y1, x2, y2) with ``fmt='corners'``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if fmt == "corners":
        a, b = to_center(a), to_center(b)
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        log.debug("iou: degenerate box %s / %s", a, b)
        return 0.0
    return float(iou_matrix(a[None], b[None])[0, 0])


@dataclass
class ScoredDetection:
    score: float
    tp: bool
    image: int
    index: int


def match_and_score(dets: list[list[tuple]], gts: list[list], iou_threshold: float = 0.5
                    ) -> list[ScoredDetection]:
    """Greedy TP/FP assignment for one class.

    ``dets[i]`` holds (box, score) pairs for image i and ``gts[i]`` its truth
    boxes.  Detections are visited by descending score (ties: lower image,
    then lower index); each takes the highest-IoU still-unmatched truth.
    """
    order = sorted(((float(s), i, j, box) for i, row in enumerate(dets) for j, (box, s) in enumerate(row)),
                   key=lambda t: (-t[0], t[1], t[2]))
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    ious_cache: dict[int, np.ndarray] = {}
    out = []
    for score, i, j, box in order:
        tp = False
        if len(gts[i]):
            if i not in ious_cache:
                boxes = np.array([b for b, _ in dets[i]], float).reshape(-1, 4)
                ious_cache[i] = iou_matrix(boxes, np.asarray(gts[i], float).reshape(-1, 4))
            cand = np.where(used[i], -1.0, ious_cache[i][j])
            k = int(cand.argmax())
            if cand[k] >= iou_threshold:
                used[i][k] = True
                tp = True
        out.append(ScoredDetection(score, tp, i, j))
    return out


@dataclass
class PRCurve:
    points: list[tuple[float, float]]  # (recall, precision), descending threshold
    n_gt: int

    @classmethod
    def from_scored(cls, scored: list[ScoredDetection], n_gt: int) -> "PRCurve":
        pts = []
        tp = fp = 0
        for k, d in enumerate(scored):
            tp += d.tp
            fp += not d.tp
            last_of_tie = k + 1 == len(scored) or scored[k + 1].score != d.score
            if last_of_tie and n_gt > 0:
                pts.append((tp / n_gt, tp / (tp + fp)))
        return cls(pts, n_gt)


def _envelope(curve: PRCurve) -> tuple[np.ndarray, np.ndarray]:
    if not curve.points:
        return np.zeros(0), np.zeros(0)
    r = np.array([p[0] for p in curve.points])
    p = np.array([p[1] for p in curve.points])
    env = np.maximum.accumulate(p[::-1])[::-1]
    return r, env


def average_precision(curve: PRCurve) -> float:
    r, env = _envelope(curve)
    if r.size == 0:
        return 0.0
    dr = np.diff(np.concatenate([[0.0], r]))
    return float((dr * env).sum())


def f1_at_recall(curve: PRCurve, recall: float = 0.5) -> float:
    r, env = _envelope(curve)
    hit = np.nonzero(r >= recall)[0]
    if hit.size == 0:
        return 0.0
    p0, r0 = env[hit[0]], r[hit[0]]
    return float(2 * p0 * r0 / (p0 + r0)) if p0 + r0 > 0 else 0.0


@dataclass
class ClassResult:
    ap: float
    f1: float
    n_gt: int
    n_det: int


@dataclass
class EvalReport:
    per_split: dict[str, dict[int, ClassResult]] = field(default_factory=dict)

    def present(self, split: str) -> dict[int, ClassResult]:
        return {c: r for c, r in self.per_split[split].items() if r.n_gt > 0}

    def mAP(self, split: str = "all") -> float:
        res = self.present(split)
        return float(np.mean([r.ap for r in res.values()])) if res else 0.0

    def f1(self, split: str = "all") -> float:
        """Macro average of per-class F1 over classes present in ground truth."""
        res = self.present(split)
        return float(np.mean([r.f1 for r in res.values()])) if res else 0.0

    def rows(self, run_id: str = "", variant: str = "") -> list[list]:
        out = []
        for split, classes in self.per_split.items():
            for c, r in sorted(classes.items()):
                out.append([run_id, variant, split, c, f"{r.ap:.6f}", f"{r.f1:.6f}", r.n_gt, r.n_det])
            n_gt = sum(r.n_gt for r in classes.values())
            n_det = sum(r.n_det for r in classes.values())
            out.append([run_id, variant, split, "mean", f"{self.mAP(split):.6f}",
                        f"{self.f1(split):.6f}", n_gt, n_det])
        return out

    def write_csv(self, path, run_id: str = "", variant: str = "") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            w.writerows(self.rows(run_id, variant))


def score_detections(dets: list[list[Detection]], truths: list[list], n_cls: int,
                     iou_threshold: float = 0.5) -> dict[int, ClassResult]:
    """Per-class AP/F1 for detections and ``(box, class)`` truths per image."""
    out = {}
    for c in range(1, n_cls + 1):
        d_c = [[(d.box, d.score) for d in row if d.class_id == c] for row in dets]
        g_c = [[b for b, k in row if k == c] for row in truths]
        n_gt = sum(len(g) for g in g_c)
        scored = match_and_score(d_c, g_c, iou_threshold)
        curve = PRCurve.from_scored(scored, n_gt)
        out[c] = ClassResult(average_precision(curve), f1_at_recall(curve), n_gt, len(scored))
    return out


def report_from_detections(dets: list[list[Detection]], metas, n_cls: int,
                           splits=SPLITS) -> EvalReport:
    report = EvalReport()
    for split in splits:
        keep = [k for k, m in enumerate(metas) if split == "all" or m.domain == split]
        report.per_split[split] = score_detections([dets[k] for k in keep],
                                                   [metas[k].truths for k in keep], n_cls)
    return report


def predict(system, dataset, metas, network: str | None = None, transform_a=None,
            score_threshold: float = EVAL_SCORE_THRESHOLD, nms_iou: float = EVAL_NMS_IOU
            ) -> list[list[Detection]]:
    """Run a trained system over ``metas`` and decode detections per image.

    ``transform_a(image, meta)`` may replace each visual image first (corruptions).
    """
    mods = ("b",) if network == "thm" else system.eval_modalities
    xa = xb = None
    if "a" in mods:
        imgs = [dataset.image_a(m.id) for m in metas]
        if transform_a is not None:
            imgs = [transform_a(img, m) for img, m in zip(imgs, metas)]
        xa = np.stack(imgs)
    if "b" in mods:
        xb = np.stack([dataset.image_b(m.id) for m in metas])
    logits, deltas = system.infer(xa, xb, network)
    return [decode_detections(logits[k], deltas[k], system.anchors, score_threshold, nms_iou)
            for k in range(len(metas))]


def evaluate(system, dataset, splits=SPLITS, network: str | None = None, transform_a=None
             ) -> EvalReport:
    """Evaluate on the test split, broken down by day/night domain."""
    metas = dataset.split("all")
    dets = predict(system, dataset, metas, network, transform_a)
    return report_from_detections(dets, metas, system.n_cls, splits)

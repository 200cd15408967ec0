"""Targeted PGD that hides one class from a visual detector, and the epsilon sweep."""
from __future__ import annotations

import csv
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Sample
from .evaluate import (EVAL_NMS_IOU, EVAL_SCORE_THRESHOLD, match_and_score,
                       report_from_detections)
from .anchors import decode_detections
from .losses import LossWeights, MatchedTargets, detection_loss, match_anchors
from .tensor import ParameterError, Tensor

EPS_GRID = (0.0, 1 / 255, 2 / 255, 4 / 255, 8 / 255, 16 / 255)
# detections at or above this score count toward hidden-class recall
RECALL_SCORE = 0.5
ATTACK_COLUMNS = ("run_id", "hidden_class", "epsilon", "mAP", "hidden_class_recall")


@dataclass(frozen=True)
class AttackSpec:
    hidden_class: int = 1
    epsilon: float = 8 / 255
    step_size: float | None = None  # defaults to epsilon / 4
    iterations: int = 10
    seed: int | None = None  # random start inside the ball when set

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ParameterError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 1:
            raise ParameterError(f"iterations must be >= 1, got {self.iterations}")
        if self.step_size is not None and self.step_size < 0:
            raise ParameterError("step_size must be >= 0")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size


@contextmanager
def frozen(module):
    """Stop parameter gradients so backward only reaches the input."""
    params = module.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def hidden_targets(anchors, truths, hidden_class: int) -> MatchedTargets:
    """Match anchors after relabeling ``hidden_class`` instances to background."""
    return match_anchors(anchors, [(b, c) for b, c in truths if c != hidden_class])


def pgd_batch(system, images: np.ndarray, truths: list[list], attack: AttackSpec,
              weights: LossWeights | None = None, trace=None) -> np.ndarray:
    """Attack a batch of visual images (N,3,H,W); returns the adversarial images.

    Each image is normalized on its own, so results match attacking one at a time.
    ``trace(k, x)`` is called with every iterate.
    """
    weights = weights or LossWeights()
    x0 = np.asarray(images, dtype=np.float32)
    if attack.epsilon == 0:
        return x0.copy()
    targets = MatchedTargets.stack([hidden_targets(system.anchors, t, attack.hidden_class)
                                    for t in truths])
    lo = np.clip(x0 - np.float32(attack.epsilon), 0, 1)
    hi = np.clip(x0 + np.float32(attack.epsilon), 0, 1)
    x = x0.copy()
    if attack.seed is not None:
        rng = np.random.default_rng(attack.seed)
        x = np.clip(x + rng.uniform(-attack.epsilon, attack.epsilon, x.shape).astype(np.float32), lo, hi)
    alpha = np.float32(attack.alpha)
    with frozen(system):
        for k in range(attack.iterations):
            xt = Tensor(x, requires_grad=True)
            loss = detection_loss(system.forward_visual(xt), targets, weights, per_image=True).total
            loss.backward()
            g = xt.grad
            if not np.all(np.isfinite(g)):
                raise T.NumericError("non-finite input gradient during attack")
            x = np.clip(x - alpha * np.sign(g), lo, hi)
            if trace is not None:
                trace(k, x)
    return x


def pgd_targeted(system, sample: Sample, attack: AttackSpec, weights: LossWeights | None = None
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Adversarial visual image and its perturbation for one sample."""
    x0 = np.asarray(sample.image_a, dtype=np.float32)
    x = pgd_batch(system, x0[None], [sample.truths], attack, weights)[0]
    return x, x - x0


@dataclass
class AttackResult:
    epsilon: float
    mAP: float
    hidden_recall: float


def hidden_recall(dets, truths, hidden_class: int, min_score: float = RECALL_SCORE) -> float:
    d_c = [[(d.box, d.score) for d in row if d.class_id == hidden_class and d.score >= min_score]
           for row in dets]
    g_c = [[b for b, c in row if c == hidden_class] for row in truths]
    n_gt = sum(len(g) for g in g_c)
    if n_gt == 0:
        return 0.0
    return sum(s.tp for s in match_and_score(d_c, g_c)) / n_gt


def attack_sweep(system, dataset, hidden_class: int = 1, eps_grid=EPS_GRID, iterations: int = 10,
                 metas=None, chunk: int = 50, progress=None) -> list[AttackResult]:
    """Attack every test image at each epsilon; report mAP and hidden-class recall."""
    metas = dataset.split("all") if metas is None else metas
    truths = [m.truths for m in metas]
    out = []
    for eps in eps_grid:
        spec = AttackSpec(hidden_class, float(eps), iterations=iterations)
        dets = []
        for i in range(0, len(metas), chunk):
            part = metas[i:i + chunk]
            adv = pgd_batch(system, np.stack([dataset.image_a(m.id) for m in part]),
                            truths[i:i + chunk], spec)
            logits, deltas = system.infer(adv, None, "rgb")
            dets.extend(decode_detections(logits[k], deltas[k], system.anchors,
                                          EVAL_SCORE_THRESHOLD, EVAL_NMS_IOU)
                        for k in range(len(part)))
        rep = report_from_detections(dets, metas, system.n_cls, ("all",))
        res = AttackResult(float(eps), rep.mAP("all"), hidden_recall(dets, truths, hidden_class))
        if progress:
            progress(res)
        out.append(res)
    return out


def write_attack_csv(path, results: list[AttackResult], hidden_class: int, run_id: str = "") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ATTACK_COLUMNS)
        for r in results:
            w.writerow([run_id, hidden_class, f"{r.epsilon:.6f}", f"{r.mAP:.6f}", f"{r.hidden_recall:.6f}"])

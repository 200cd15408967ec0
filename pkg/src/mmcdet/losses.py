"""Training objectives for the detectors and the collaborative pair."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .anchors import AnchorSet, encode_boxes, iou_matrix
from .nn import ConfigError, DetectionOutput
from .tensor import Tensor

MATCH_IOU = 0.5


@dataclass
class LossWeights:
    lambda_rgb: float = 0.1
    lambda_thm: float = 1.0
    tau: float = 2.0
    lambda_reg: float = 1.0
    lambda_rec: float = 5.0
    lambda_crossrec_rgb: float = 10.0
    lambda_crossrec_thm: float = 5.0
    n_cls: int = 3
    kl_reduction: str = "mean"  # mean | sum over anchors
    kl_tau_squared: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise ValueError(f"{f.name} must be non-negative, got {v}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.n_cls < 1:
            raise ValueError("n_cls must be at least 1")
        if self.kl_reduction not in ("mean", "sum"):
            raise ValueError("kl_reduction must be 'mean' or 'sum'")


@dataclass
class MatchedTargets:
    labels: np.ndarray  # (..., A) int, 0 = background
    deltas: np.ndarray  # (..., A, 4)
    positive: np.ndarray = field(init=False)

    def __post_init__(self):
        self.positive = self.labels > 0

    @staticmethod
    def stack(items: list["MatchedTargets"]) -> "MatchedTargets":
        return MatchedTargets(np.stack([m.labels for m in items]), np.stack([m.deltas for m in items]))


def match_anchors(anchors: AnchorSet, truths) -> MatchedTargets:
    """SSD assignment of ground truth (box, class) pairs to anchors.

    Anchors overlapping a truth with IoU >= 0.5 take their best truth; each
    truth then claims its single best anchor, later truths overriding earlier
    ones, with ties going to the lower anchor index.
    """
    A = len(anchors)
    labels = np.zeros(A, dtype=np.int64)
    deltas = np.zeros((A, 4), dtype=np.float64)
    if len(truths) == 0:
        return MatchedTargets(labels, deltas)
    boxes = np.array([b for b, _ in truths], dtype=np.float64).reshape(-1, 4)
    classes = np.array([c for _, c in truths], dtype=np.int64)
    ious = iou_matrix(anchors.boxes, boxes)  # A, G
    best_truth = ious.argmax(axis=1)
    assigned = np.where(ious.max(axis=1) >= MATCH_IOU, best_truth, -1)
    for g in range(len(boxes)):
        assigned[int(ious[:, g].argmax())] = g
    pos = assigned >= 0
    labels[pos] = classes[assigned[pos]]
    deltas[pos] = encode_boxes(boxes[assigned[pos]], anchors.boxes[pos])
    return MatchedTargets(labels, deltas)


@dataclass
class DetLoss:
    total: Tensor
    cls: Tensor
    reg: Tensor


def detection_loss(output: DetectionOutput, targets: MatchedTargets, weights: LossWeights,
                   per_image: bool = False) -> DetLoss:
    """(1/N_cls) * cross-entropy over all anchors + lambda_reg * L2 on positive deltas.

    The regression term is a mean over the coordinates of positive anchors.

    With ``per_image`` each image is normalized on its own and the per-image
    losses are summed, so one image's gradient does not depend on its batch.
    """
    logits, deltas = output.class_logits, output.box_deltas
    if logits.shape[:-1] != targets.labels.shape or deltas.shape != targets.deltas.shape:
        raise T.ShapeError(f"detection_loss: outputs {logits.shape}/{deltas.shape} vs targets "
                           f"{targets.labels.shape}/{targets.deltas.shape}")
    dtype = logits.data.dtype
    onehot = np.zeros(logits.shape, dtype=dtype)
    np.put_along_axis(onehot, targets.labels[..., None], 1.0, axis=-1)
    mask = np.repeat(targets.positive[..., None], 4, axis=-1).astype(dtype)
    if per_image:
        n_rows = targets.labels.shape[-1]
        n_coord = mask.reshape(mask.shape[0], -1).sum(axis=1)
        inv = np.where(n_coord > 0, 1.0 / np.maximum(n_coord, 1.0), 0.0).astype(dtype)
        mask = mask * inv[:, None, None]
    else:
        n_rows = targets.labels.size
        n_coord = int(mask.sum())
        mask = mask * (1.0 / n_coord if n_coord else 0.0)
    l_cls = T.scale(T.sum(T.mul(T.log_softmax(logits), Tensor(onehot))), -1.0 / n_rows)

    diff = T.sub(deltas, Tensor(targets.deltas))
    l_reg = T.sum(T.mul(T.square(diff), Tensor(mask.astype(dtype))))

    total = T.add(T.scale(l_cls, 1.0 / weights.n_cls), T.scale(l_reg, weights.lambda_reg))
    return DetLoss(total, l_cls, l_reg)


def kl_mimicry(logits_self: Tensor, logits_peer, tau: float, reduction: str = "mean",
               tau_squared: bool = False) -> Tensor:
    """KL(p_self || p_peer) of temperature-softened class distributions.

    The peer enters as a constant: no gradient reaches it.
    """
    peer = logits_peer.data if isinstance(logits_peer, Tensor) else np.asarray(logits_peer)
    if peer.shape != logits_self.shape:
        raise T.ShapeError(f"kl_mimicry: shapes {logits_self.shape} and {peer.shape} do not conform")
    log_p = T.log_softmax_temp(logits_self, tau)
    log_q = T.log_softmax_temp(Tensor(peer), tau).data
    kl = T.sum(T.mul(T.exp(log_p), T.sub(log_p, Tensor(log_q))))
    n_rows = int(np.prod(logits_self.shape[:-1]))
    factor = (1.0 / n_rows if reduction == "mean" else 1.0) * (tau * tau if tau_squared else 1.0)
    return T.scale(kl, factor)


def reconstruction_loss(image, reconstruction: Tensor) -> Tensor:
    """Sum of squared pixel errors divided by the batch size."""
    target = image.data if isinstance(image, Tensor) else np.asarray(image)
    if target.shape != reconstruction.shape:
        raise T.ShapeError(f"reconstruction_loss: shapes {target.shape} and "
                           f"{reconstruction.shape} do not conform")
    batch = target.shape[0] if target.ndim == 4 else 1
    return T.scale(T.sum(T.square(T.sub(reconstruction, Tensor(target)))), 1.0 / batch)


VARIANTS = ("plain", "recon", "crossrecon")


@dataclass
class MMCParts:
    """Inputs of one network's collaborative objective.

    For ``recon`` the reconstruction comes from this network's own decoder
    applied to its own encoder; for ``crossrecon`` from its decoder applied to
    the peer encoder's features. ``image`` is always this network's input.
    """

    output: DetectionOutput
    targets: MatchedTargets
    peer_logits: np.ndarray | Tensor
    image: np.ndarray | None = None
    reconstruction: Tensor | None = None


def mmc_total(variant: str, network: str, parts: MMCParts,
              weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """One network's total loss and its logged components."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown MMC variant {variant!r}")
    if network not in ("rgb", "thm"):
        raise ConfigError(f"unknown network {network!r}")
    det = detection_loss(parts.output, parts.targets, weights)
    kl = kl_mimicry(parts.output.class_logits, parts.peer_logits, weights.tau,
                    weights.kl_reduction, weights.kl_tau_squared)
    lam_kl = weights.lambda_rgb if network == "rgb" else weights.lambda_thm
    total = T.add(det.total, T.scale(kl, lam_kl))
    rec_value = 0.0
    if variant != "plain":
        if parts.image is None or parts.reconstruction is None:
            raise ConfigError(f"variant {variant!r} needs an image and its reconstruction")
        rec = reconstruction_loss(parts.image, parts.reconstruction)
        if variant == "recon":
            lam_rec = weights.lambda_rec
        else:
            lam_rec = weights.lambda_crossrec_rgb if network == "rgb" else weights.lambda_crossrec_thm
        total = T.add(total, T.scale(rec, lam_rec))
        rec_value = rec.item()
    logged = {"cls": det.cls.item(), "reg": det.reg.item(), "kl": kl.item(),
              "rec": rec_value, "total": total.item()}
    return total, logged

"""Optimizer, augmentation and the training loop for every variant."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import map_coordinates

from . import tensor as T
from .anchors import AnchorSet
from .checkpoint import save_checkpoint
from .config import AugmentConfig, TrainConfig, dump_config
from .data import Dataset, Sample, SampleMeta, adain_stylize
from .losses import LossWeights, MatchedTargets, MMCParts, detection_loss, match_anchors, mmc_total
from .nn import ConfigError, Detector, EncoderConfig, FusionDetector, Module
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "variant", "network", "L_Cls", "L_Reg", "D_KL", "L_Rec", "total")


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "OptimState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: OptimState,
               lr: float, weight_decay: float, names: list[str] | None = None) -> None:
    """Bias-corrected Adam with decoupled weight decay, updating ``params`` in place."""
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            who = names[i] if names else f"#{i}"
            raise NumericError(f"non-finite gradient in parameter {who} at step {state.step + 1}; "
                               f"update aborted")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + state.eps) + weight_decay * p)


class AdamW:
    def __init__(self, named_params: list[tuple[str, T.Tensor]], lr: float, weight_decay: float):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr, self.weight_decay = lr, weight_decay
        self.state = OptimState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                   self.lr, self.weight_decay, self.names)


# ---------------------------------------------------------------------------
# augmentation

def _resize_crop(img: np.ndarray, crop: tuple[float, float, float, float]) -> np.ndarray:
    x0, y0, cw, ch = crop
    C, H, W = img.shape
    ys = y0 * H + (np.arange(H) + 0.5) * ch - 0.5
    xs = x0 * W + (np.arange(W) + 0.5) * cw - 0.5
    cc, yy, xx = np.meshgrid(np.arange(C), ys, xs, indexing="ij")
    out = map_coordinates(img.astype(np.float64), [cc, yy, xx], order=1, mode="nearest")
    return out.astype(np.float32)


def _crop_boxes(boxes, crop, min_keep: float = 0.25):
    x0, y0, cw, ch = crop
    out = []
    for c, cx, cy, w, h in boxes:
        x1, x2 = (cx - w / 2 - x0) / cw, (cx + w / 2 - x0) / cw
        y1, y2 = (cy - h / 2 - y0) / ch, (cy + h / 2 - y0) / ch
        full = (x2 - x1) * (y2 - y1)
        x1c, x2c, y1c, y2c = max(x1, 0.0), min(x2, 1.0), max(y1, 0.0), min(y2, 1.0)
        kept = max(0.0, x2c - x1c) * max(0.0, y2c - y1c)
        if full <= 0 or kept / full < min_keep:
            continue
        out.append((c, (x1c + x2c) / 2, (y1c + y2c) / 2, x2c - x1c, y2c - y1c))
    return out


def _adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    if img.shape[0] == 3:
        m = float((0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).mean())
    else:
        m = float(img.mean())
    return (img - m) * factor + m


def _adjust_hsv(img: np.ndarray, saturation: float, hue_degrees: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(img, 0, 1).transpose(1, 2, 0).astype(np.float64))
    if hue_degrees:
        hsv[..., 0] = np.mod(hsv[..., 0] + hue_degrees / 360.0, 1.0)
    if saturation != 1.0:
        hsv[..., 1] = np.clip(hsv[..., 1] * saturation, 0, 1)
    return hsv_to_rgb(hsv).transpose(2, 0, 1).astype(np.float32)


def apply_augment(sample: Sample, crop=None, contrast: float = 1.0, saturation: float = 1.0,
                  hue_degrees: float = 0.0, thermal_contrast: float = 1.0) -> Sample:
    """Deterministic augmentation given explicit parameters.

    ``crop`` is (x0, y0, width, height) in normalized coordinates and applies
    to both modalities; photometric changes touch only the visual image.
    Either image may be ``None``.
    """
    a, b, boxes = sample.image_a, sample.image_b, list(sample.boxes)
    if crop is not None and tuple(crop) != (0.0, 0.0, 1.0, 1.0):
        a = None if a is None else _resize_crop(a, crop)
        b = None if b is None else _resize_crop(b, crop)
        boxes = _crop_boxes(boxes, crop)
    if a is not None:
        if contrast != 1.0:
            a = _adjust_contrast(a, contrast)
        if a.shape[0] == 3 and (saturation != 1.0 or hue_degrees != 0.0):
            a = _adjust_hsv(a, saturation, hue_degrees)
        a = np.clip(a, 0, 1).astype(np.float32)
    if b is not None:
        if thermal_contrast != 1.0:
            b = _adjust_contrast(b, thermal_contrast)
        b = np.clip(b, 0, 1).astype(np.float32)
    return Sample(sample.id, a, b, boxes, sample.domain, sample.illumination)


def augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> Sample:
    """Random crop shared by both modalities plus visual-only photometric jitter.

    Draws the same random numbers whatever the sample holds, so batches stay
    aligned across variants that see different modalities.
    """
    cfg = cfg or AugmentConfig()
    flags = rng.random(5)
    s = rng.uniform(cfg.crop_min, 1.0)
    x0, y0 = rng.uniform(0, 1 - s), rng.uniform(0, 1 - s)
    contrast = rng.uniform(*cfg.contrast)
    saturation = rng.uniform(*cfg.saturation)
    hue = rng.uniform(-cfg.hue_degrees, cfg.hue_degrees)
    p = cfg.photometric_prob
    return apply_augment(
        sample,
        crop=(x0, y0, s, s) if flags[0] < cfg.crop_prob else None,
        contrast=contrast if flags[1] < p else 1.0,
        saturation=saturation if flags[2] < p else 1.0,
        hue_degrees=hue if flags[3] < p else 0.0,
        thermal_contrast=contrast if (cfg.thermal_contrast and flags[4] < p) else 1.0,
    )


# ---------------------------------------------------------------------------
# variant wiring

@dataclass
class Batch:
    a: np.ndarray | None  # (B,3,H,W)
    b: np.ndarray | None  # (B,1,H,W)
    targets: MatchedTargets
    boxes: list = field(default_factory=list)


def make_anchors(cfg: TrainConfig) -> AnchorSet:
    m = cfg.model
    grid = m.image_size // m.patch_size
    scales = tuple(grid // 2 ** i for i in range(len(m.extra_channels) + 1))
    return AnchorSet(scales=scales, sizes=tuple(m.anchor_sizes))


def _enc_cfg(cfg: TrainConfig, in_channels: int) -> EncoderConfig:
    m = cfg.model
    return EncoderConfig(m.image_size, m.patch_size, m.embed_dim, m.depth, m.heads, in_channels,
                         tuple(m.extra_channels))


class System(Module):
    """The network(s) of one variant and the way batches feed them."""

    #: item kinds contributed per training sample
    kinds: tuple[str, ...] = ("a",)
    #: modalities needed at evaluation time
    eval_modalities: tuple[str, ...] = ("a",)

    def __init__(self, cfg: TrainConfig):
        self.variant = cfg.variant
        self.anchors = make_anchors(cfg)
        self.n_cls = cfg.loss.n_cls

    def losses(self, batch: Batch, weights: LossWeights) -> tuple[Tensor, list[dict]]:
        raise NotImplementedError

    def forward_eval(self, xa: Tensor | None, xb: Tensor | None, network: str | None = None):
        raise NotImplementedError

    def forward_visual(self, xa: Tensor):
        """Detector on visual images only (used by attacks)."""
        raise ConfigError(f"variant {self.variant!r} has no visual-only detector")

    def infer(self, xa: np.ndarray | None, xb: np.ndarray | None, network: str | None = None,
              chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
        n = len(xa if xa is not None else xb)
        logits, deltas = [], []
        with T.no_grad():
            for i in range(0, n, chunk):
                out = self.forward_eval(None if xa is None else Tensor(xa[i:i + chunk]),
                                        None if xb is None else Tensor(xb[i:i + chunk]), network)
                logits.append(out.class_logits.data)
                deltas.append(out.box_deltas.data)
        return np.concatenate(logits), np.concatenate(deltas)


def _log_row(network: str, det, kl: float = 0.0, rec: float = 0.0, total=None) -> dict:
    return {"network": network, "cls": det.cls.item(), "reg": det.reg.item(), "kl": kl,
            "rec": rec, "total": det.total.item() if total is None else total}


class SingleSystem(System):
    """One detector on one input stream (rgb, thermal, combined, style_aug, input_fusion)."""

    def __init__(self, cfg: TrainConfig):
        super().__init__(cfg)
        v = cfg.variant
        in_ch = {"thermal": 1, "input_fusion": 4}.get(v, 3)
        key = [cfg.seed, 2] if v == "thermal" else [cfg.seed, 1]
        self.name = "thm" if v == "thermal" else ("rgb" if v in ("rgb", "style_aug") else "net")
        self.net = Detector(_enc_cfg(cfg, in_ch), self.anchors, self.n_cls, np.random.default_rng(key))
        self.kinds = {"rgb": ("a",), "thermal": ("b",), "combined": ("a", "b3"),
                      "style_aug": ("a", "style"), "input_fusion": ("pair",)}[v]
        self.eval_modalities = {"thermal": ("b",), "input_fusion": ("a", "b")}.get(v, ("a",))

    def named_parameters(self, prefix: str = ""):
        return self.net.named_parameters(prefix + self.name + ".")

    def _input(self, xa, xb):
        if self.variant == "thermal":
            return xb
        if self.variant == "input_fusion":
            return T.concat([xa, xb], axis=1)
        return xa

    def losses(self, batch, weights):
        xa = None if batch.a is None else Tensor(batch.a)
        xb = None if batch.b is None else Tensor(batch.b)
        det = detection_loss(self.net(self._input(xa, xb)), batch.targets, weights)
        return det.total, [_log_row(self.name, det)]

    def forward_eval(self, xa, xb, network=None):
        return self.net(self._input(xa, xb))

    def forward_visual(self, xa):
        if self.eval_modalities != ("a",):
            return super().forward_visual(xa)
        return self.net(xa)


class FeatureFusionSystem(System):
    kinds = ("pair",)
    eval_modalities = ("a", "b")

    def __init__(self, cfg: TrainConfig):
        super().__init__(cfg)
        self.net = FusionDetector(_enc_cfg(cfg, 3), _enc_cfg(cfg, 1), self.anchors, self.n_cls,
                                  np.random.default_rng([cfg.seed, 1]))

    def named_parameters(self, prefix: str = ""):
        return self.net.named_parameters(prefix + "fused.")

    def losses(self, batch, weights):
        det = detection_loss(self.net(Tensor(batch.a), Tensor(batch.b)), batch.targets, weights)
        return det.total, [_log_row("fused", det)]

    def forward_eval(self, xa, xb, network=None):
        return self.net(xa, xb)


class MMCSystem(System):
    """Visual and thermal detectors trained together with mutual mimicry."""

    kinds = ("pair",)

    def __init__(self, cfg: TrainConfig):
        super().__init__(cfg)
        self.mode = {"mmc": "plain", "mmc_recon": "recon", "mmc_crossrecon": "crossrecon"}[cfg.variant]
        with_dec = self.mode != "plain"
        self.rgb = Detector(_enc_cfg(cfg, 3), self.anchors, self.n_cls,
                            np.random.default_rng([cfg.seed, 1]), 3 if with_dec else None)
        self.thm = Detector(_enc_cfg(cfg, 1), self.anchors, self.n_cls,
                            np.random.default_rng([cfg.seed, 2]), 1 if with_dec else None)
        self.eval_modalities = ("a",)

    def named_parameters(self, prefix: str = ""):
        yield from self.rgb.named_parameters(prefix + "rgb.")
        yield from self.thm.named_parameters(prefix + "thm.")

    def losses(self, batch, weights):
        xa, xb = Tensor(batch.a), Tensor(batch.b)
        maps_r, maps_t = self.rgb.encoder(xa), self.thm.encoder(xb)
        out_r, out_t = self.rgb.head(maps_r), self.thm.head(maps_t)
        rec_r = rec_t = None
        if self.mode == "recon":
            rec_r, rec_t = self.rgb.decoder(maps_r[0]), self.thm.decoder(maps_t[0])
        elif self.mode == "crossrecon":
            # each decoder rebuilds its own modality from the peer encoder's features
            rec_r, rec_t = self.rgb.decoder(maps_t[0]), self.thm.decoder(maps_r[0])
        # peers enter as constants: logits from this step's shared forward
        parts_r = MMCParts(out_r, batch.targets, out_t.class_logits.data, batch.a, rec_r)
        parts_t = MMCParts(out_t, batch.targets, out_r.class_logits.data, batch.b, rec_t)
        total_r, log_r = mmc_total(self.mode, "rgb", parts_r, weights)
        total_t, log_t = mmc_total(self.mode, "thm", parts_t, weights)
        rows = [dict(network="rgb", **log_r), dict(network="thm", **log_t)]
        return T.add(total_r, total_t), rows

    def forward_eval(self, xa, xb, network=None):
        if network == "thm":
            return self.thm(xb)
        return self.rgb(xa)

    def forward_visual(self, xa):
        return self.rgb(xa)


def build_system(cfg: TrainConfig) -> System:
    if cfg.variant.startswith("mmc"):
        return MMCSystem(cfg)
    if cfg.variant == "feature_fusion":
        return FeatureFusionSystem(cfg)
    return SingleSystem(cfg)


# ---------------------------------------------------------------------------
# batches

def _item_sample(dataset: Dataset, meta: SampleMeta, kind: str, style_cache: dict) -> Sample:
    a = b = None
    if kind in ("a", "pair"):
        a = dataset.image_a(meta.id)
    if kind in ("b", "b3", "pair"):
        b = dataset.image_b(meta.id)
    if kind == "style":
        if meta.id not in style_cache:
            style_cache[meta.id] = adain_stylize(dataset.image_a(meta.id), dataset.image_b(meta.id))
        a = style_cache[meta.id]
    return Sample(meta.id, a, b, meta.boxes, meta.domain, meta.illumination)


def assemble_batch(dataset: Dataset, items: list[tuple[SampleMeta, str]], anchors: AnchorSet,
                   rng: np.random.Generator | None, aug: AugmentConfig,
                   style_cache: dict | None = None) -> Batch:
    style_cache = {} if style_cache is None else style_cache
    xa, xb, targets, boxes = [], [], [], []
    for meta, kind in items:
        s = _item_sample(dataset, meta, kind, style_cache)
        if rng is not None and aug.enabled:
            if kind == "b3":
                # thermal as a visual stand-in: crop only, no colour jitter
                s = augment(s, rng, AugmentConfig(**{**aug.__dict__, "photometric_prob": 0.0}))
            else:
                s = augment(s, rng, aug)
        if kind == "b3":
            xa.append(np.repeat(s.image_b, 3, axis=0))
        elif s.image_a is not None:
            xa.append(s.image_a)
        if s.image_b is not None and kind != "b3":
            xb.append(s.image_b)
        boxes.append(s.boxes)
        targets.append(match_anchors(anchors, [((cx, cy, w, h), c) for c, cx, cy, w, h in s.boxes]))
    return Batch(np.stack(xa) if xa else None, np.stack(xb) if xb else None,
                 MatchedTargets.stack(targets), boxes)


class Sampler:
    """Epoch-wise shuffled stream of pool indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order: list[int] = []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self.order:
                self.order = list(self.rng.permutation(self.n))
            out.append(int(self.order.pop(0)))
        return out


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    system: System
    log: list[dict]

    def totals(self) -> list[float]:
        """Per-step training loss summed over networks."""
        by_step: dict[int, float] = {}
        for row in self.log:
            by_step[row["step"]] = by_step.get(row["step"], 0.0) + row["total"]
        return [by_step[k] for k in sorted(by_step)]


def write_loss_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["step"], r["variant"], r["network"]] +
                       [f"{r[k]:.8g}" for k in ("cls", "reg", "kl", "rec", "total")])


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None, progress=None) -> TrainResult:
    """Train one variant; writes checkpoint, loss log and config when ``out_dir`` is given."""
    system = build_system(cfg)
    train_meta = dataset.split("train")
    if not train_meta:
        raise ConfigError("dataset has no training samples")
    pool = [(m, k) for m in train_meta for k in system.kinds]
    opt = AdamW(list(system.named_parameters()), cfg.lr, cfg.weight_decay)
    sampler = Sampler(len(pool), np.random.default_rng([cfg.seed, 100]))
    aug_rng = np.random.default_rng([cfg.seed, 101])
    style_cache: dict = {}
    rows: list[dict] = []
    fixed = None
    if cfg.fixed_batch:
        fixed = assemble_batch(dataset, pool[:cfg.batch_size], system.anchors, None, cfg.augment, style_cache)

    for step in range(cfg.steps):
        batch = fixed or assemble_batch(dataset, [pool[i] for i in sampler.take(cfg.batch_size)],
                                        system.anchors, aug_rng, cfg.augment, style_cache)
        system.zero_grad()
        total, step_rows = system.losses(batch, cfg.loss)
        if not np.isfinite(total.item()):
            raise NumericError(f"non-finite training loss at step {step}")
        total.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rows.extend(dict(step=step, variant=cfg.variant, **r) for r in step_rows)
            if progress:
                progress(step, total.item())

    result = TrainResult(system, rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.mmck", system.state_dict())
        write_loss_log(out / "loss_log.csv", rows)
        (out / "config.ini").write_text(dump_config(cfg))
    return result


def load_system(cfg: TrainConfig, checkpoint_path) -> System:
    from .checkpoint import load_checkpoint

    system = build_system(cfg)
    system.load_state_dict(load_checkpoint(checkpoint_path))
    return system

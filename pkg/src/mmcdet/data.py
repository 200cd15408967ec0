"""Synthetic paired visual/thermal detection scenes and their on-disk format.

Each scene draws from three independent random streams spawned from its
seed: geometry (object layout), thermal (thermal rendering noise) and visual
(illumination, colours, glare, sensor noise).  The thermal image therefore
never depends on illumination or domain.
"""
from __future__ import annotations

import hashlib
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

CLASS_NAMES = {1: "person", 2: "car", 3: "cyclist"}
IMAGE_MAGIC = b"MMCT"
IMAGE_VERSION = 1
IMAGE_SIZE = 64
DAY_ILLUMINATION = (0.7, 1.0)
NIGHT_ILLUMINATION = (0.05, 0.3)


@dataclass
class Sample:
    id: int
    image_a: np.ndarray  # 3xHxW visual
    image_b: np.ndarray  # 1xHxW thermal
    boxes: list[tuple[int, float, float, float, float]]  # (class, cx, cy, w, h)
    domain: str = "day"
    illumination: float = 1.0

    @property
    def truths(self) -> list[tuple[tuple[float, float, float, float], int]]:
        return [((cx, cy, w, h), c) for c, cx, cy, w, h in self.boxes]


@dataclass
class SceneSpec:
    seed: int
    domain: str = "day"
    min_objects: int = 1
    max_objects: int = 5
    glare_prob: float = 0.5
    visual_noise: float = 0.04
    thermal_noise: float = 0.02
    illumination: float | None = None  # overrides the domain draw
    size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.domain not in ("day", "night"):
            raise ValueError(f"domain must be day or night, got {self.domain!r}")
        if not 0 <= self.min_objects <= self.max_objects <= 6:
            raise ValueError("object counts must satisfy 0 <= min <= max <= 6")


# ---------------------------------------------------------------------------
# rendering

def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="xy")


def _ellipse(X, Y, cx, cy, ax, ay) -> np.ndarray:
    return ((X - cx) / ax) ** 2 + ((Y - cy) / ay) ** 2 <= 1.0


def shape_mask(cls: int, box, size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean pixel mask of one object, tight to ``box``."""
    X, Y = _grid(size)
    cx, cy, w, h = box
    if cls == 1:
        return _ellipse(X, Y, cx, cy, w / 2, h / 2)
    if cls == 2:
        return (np.abs(X - cx) <= w / 2) & (np.abs(Y - cy) <= h / 2)
    # cyclist: body ellipse on top of a wheel circle
    r = w / 2
    body = _ellipse(X, Y, cx, cy - 0.2 * h, 0.25 * w, 0.3 * h)
    wheel = (X - cx) ** 2 + (Y - (cy + h / 2 - r)) ** 2 <= r * r
    return body | wheel


def _draw_box(cls: int, rng: np.random.Generator) -> tuple[float, float]:
    if cls == 1:
        h = rng.uniform(0.3, 0.5)
        return h * rng.uniform(0.4, 0.55), h
    if cls == 2:
        w = rng.uniform(0.25, 0.45)
        return w, w * rng.uniform(0.45, 0.6)
    h = rng.uniform(0.28, 0.42)
    return h * rng.uniform(0.6, 0.8), h


def _layout(spec: SceneSpec, rng: np.random.Generator):
    from .anchors import iou_matrix

    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes: list[tuple[int, float, float, float, float]] = []
    for _ in range(n):
        for _attempt in range(20):
            cls = int(rng.integers(1, 4))
            w, h = _draw_box(cls, rng)
            cx = rng.uniform(0.02 + w / 2, 0.98 - w / 2)
            cy = rng.uniform(0.02 + h / 2, 0.98 - h / 2)
            cand = (cls, float(cx), float(cy), float(w), float(h))
            if not boxes or iou_matrix(np.array([cand[1:]]), np.array([b[1:] for b in boxes])).max() < 0.2:
                boxes.append(cand)
                break
    return boxes


_BASE_COLOURS = {1: (0.85, 0.65, 0.5), 2: (0.8, 0.15, 0.15), 3: (0.2, 0.45, 0.85)}


def _render_visual(spec: SceneSpec, boxes, masks, rng: np.random.Generator):
    s = spec.size
    lo, hi = DAY_ILLUMINATION if spec.domain == "day" else NIGHT_ILLUMINATION
    illum = float(rng.uniform(lo, hi))
    if spec.illumination is not None:
        illum = float(spec.illumination)
    X, Y = _grid(s)
    base = rng.uniform(0.3, 0.55, size=3)
    slope = rng.uniform(-0.15, 0.15, size=2)
    refl = base[:, None, None] + (slope[0] * (X - 0.5) + slope[1] * (Y - 0.5))[None]
    refl = refl + gaussian_filter(rng.normal(0, 0.05, size=(3, s, s)), sigma=(0, 2, 2))
    for (cls, *_), m in zip(boxes, masks):
        colour = np.clip(np.array(_BASE_COLOURS[cls]) + rng.normal(0, 0.07, size=3), 0, 1)
        refl[:, m] = colour[:, None]
    img = illum * refl
    glare = np.zeros((s, s))
    if spec.domain == "night":
        for cls, cx, cy, w, h in boxes:
            if rng.random() < spec.glare_prob:
                gx = cx + rng.uniform(-0.3, 0.3) * w
                gy = cy + rng.uniform(-0.3, 0.3) * h
                r = rng.uniform(0.5, 0.8) * max(w, h)
                glare += np.exp(-((X - gx) ** 2 + (Y - gy) ** 2) / (2 * (0.5 * r) ** 2))
    img = img + 1.2 * glare[None] + rng.normal(0, spec.visual_noise, size=(3, s, s))
    return np.clip(img, 0, 1).astype(np.float32), illum


def _render_thermal(spec: SceneSpec, boxes, masks, rng: np.random.Generator) -> np.ndarray:
    s = spec.size
    X, Y = _grid(s)
    bg = rng.uniform(0.1, 0.3)
    img = bg + rng.uniform(-0.04, 0.04) * (X - 0.5) + rng.uniform(-0.04, 0.04) * (Y - 0.5)
    for _, m in zip(boxes, masks):
        img = np.where(m, rng.uniform(0.8, 1.0), img)
    img = gaussian_filter(img, sigma=0.8) + rng.normal(0, spec.thermal_noise, size=(s, s))
    return np.clip(img, 0, 1).astype(np.float32)[None]


def generate_scene(spec: SceneSpec, sample_id: int = 0) -> Sample:
    """Render one paired scene; a pure function of ``spec``."""
    geo, thm, vis = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3))
    boxes = _layout(spec, geo)
    masks = [shape_mask(c, (cx, cy, w, h), spec.size) for c, cx, cy, w, h in boxes]
    image_b = _render_thermal(spec, boxes, masks, thm)
    image_a, illum = _render_visual(spec, boxes, masks, vis)
    return Sample(sample_id, image_a, image_b, boxes, spec.domain, illum)


def scene_seed(dataset_seed: int, sample_id: int) -> int:
    """Counter-based per-sample seed: independent of generation order."""
    return int(np.random.SeedSequence([dataset_seed, sample_id]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# stylisation

def adain_stylize(content: np.ndarray, style: np.ndarray, clip: bool = True) -> np.ndarray:
    """Give each content channel the style image's mean and std.

    With differing channel counts the style statistics are taken over all
    of its channels.
    """
    content = np.asarray(content, dtype=np.float64)
    style = np.asarray(style, dtype=np.float64)
    mu_c = content.mean(axis=(1, 2), keepdims=True)
    sd_c = content.std(axis=(1, 2), keepdims=True)
    if style.shape[0] == content.shape[0]:
        mu_s = style.mean(axis=(1, 2), keepdims=True)
        sd_s = style.std(axis=(1, 2), keepdims=True)
    else:
        mu_s, sd_s = style.mean(), style.std()
    out = sd_s * (content - mu_c) / np.maximum(sd_c, 1e-5) + mu_s
    if clip:
        out = np.clip(out, 0, 1)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# on-disk format

def write_image(path: Path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype="<f4")
    c, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<IIII", IMAGE_VERSION, c, h, w))
        fh.write(img.tobytes(order="C"))


def read_image(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != IMAGE_MAGIC:
        raise OSError(f"{path}: bad magic {raw[:4]!r}")
    version, c, h, w = struct.unpack("<IIII", raw[4:20])
    if version != IMAGE_VERSION:
        raise OSError(f"{path}: unsupported version {version}")
    data = np.frombuffer(raw, dtype="<f4", offset=20)
    if data.size != c * h * w:
        raise OSError(f"{path}: payload has {data.size} floats, header says {c * h * w}")
    return data.reshape(c, h, w).astype(np.float32)


@dataclass
class SampleMeta:
    id: int
    split: str
    domain: str
    illumination: float
    boxes: list[tuple[int, float, float, float, float]]

    @property
    def truths(self):
        return [((cx, cy, w, h), c) for c, cx, cy, w, h in self.boxes]


def _manifest_line(meta: SampleMeta) -> str:
    fields_ = [str(meta.id), meta.split, meta.domain, f"{meta.illumination:.6f}", str(len(meta.boxes))]
    fields_ += [f"{c} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}" for c, cx, cy, w, h in meta.boxes]
    return "\t".join(fields_)


def _parse_manifest_line(line: str) -> SampleMeta:
    parts = line.rstrip("\n").split("\t")
    n = int(parts[4])
    boxes = []
    for p in parts[5:5 + n]:
        c, cx, cy, w, h = p.split()
        boxes.append((int(c), float(cx), float(cy), float(w), float(h)))
    return SampleMeta(int(parts[0]), parts[1], parts[2], float(parts[3]), boxes)


@dataclass
class Dataset:
    """Manifest plus lazily read images; counts every image read per modality."""

    root: Path | None
    samples: list[SampleMeta]
    reads: Counter = field(default_factory=Counter)
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        manifest = root / "manifest.tsv"
        if not manifest.exists():
            raise OSError(f"no dataset at {root} (missing manifest.tsv)")
        lines = manifest.read_text().splitlines()
        return cls(root, [_parse_manifest_line(x) for x in lines if x.strip()])

    @classmethod
    def from_samples(cls, samples: list[Sample], split: str = "train") -> "Dataset":
        ds = cls(None, [SampleMeta(s.id, split, s.domain, s.illumination, list(s.boxes)) for s in samples])
        for s in samples:
            ds._cache[(s.id, "a")] = s.image_a
            ds._cache[(s.id, "b")] = s.image_b
        return ds

    def split(self, name: str) -> list[SampleMeta]:
        if name in ("day", "night"):
            return [m for m in self.samples if m.split == "test" and m.domain == name]
        if name == "all":
            return [m for m in self.samples if m.split == "test"]
        return [m for m in self.samples if m.split == name]

    def _image(self, sid: int, modality: str) -> np.ndarray:
        self.reads[modality] += 1
        key = (sid, modality)
        if key not in self._cache:
            if self.root is None:
                raise OSError(f"sample {sid} has no image {modality}")
            self._cache[key] = read_image(self.root / "images" / f"{sid}_{modality}.bin")
        return self._cache[key]

    def image_a(self, sid: int) -> np.ndarray:
        return self._image(sid, "a")

    def image_b(self, sid: int) -> np.ndarray:
        return self._image(sid, "b")

    def manifest_hash(self) -> str:
        text = "".join(_manifest_line(m) + "\n" for m in self.samples)
        return hashlib.sha256(text.encode()).hexdigest()


def build_dataset(out_dir, n_train: int, n_test: int, day_fraction: float = 0.6,
                  seed: int = 0, **scene_kwargs) -> Dataset:
    """Generate and write a train/test dataset; returns it loaded."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be at least 1")
    if not 0 <= day_fraction <= 1:
        raise ValueError("day_fraction must lie in [0, 1]")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    metas = []
    next_id = 0
    for split_code, (split, n) in enumerate((("train", n_train), ("test", n_test))):
        n_day = int(round(day_fraction * n))
        domains = np.array(["day"] * n_day + ["night"] * (n - n_day))
        np.random.default_rng([seed, split_code]).shuffle(domains)
        for dom in domains:
            sid = next_id
            next_id += 1
            sample = generate_scene(SceneSpec(scene_seed(seed, sid), str(dom), **scene_kwargs), sid)
            write_image(out / "images" / f"{sid}_a.bin", sample.image_a)
            write_image(out / "images" / f"{sid}_b.bin", sample.image_b)
            metas.append(SampleMeta(sid, split, str(dom), sample.illumination, sample.boxes))
    with open(out / "manifest.tsv", "w") as fh:
        for m in metas:
            fh.write(_manifest_line(m) + "\n")
    return Dataset.load(out)

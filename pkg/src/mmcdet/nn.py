"""Layers and the detector networks built from them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .anchors import AnchorSet
from .tensor import Tensor, ShapeError


class ConfigError(ValueError):
    """Inconsistent model or training configuration."""


class AlignmentError(ValueError):
    """Two modalities disagree in resolution or feature shape."""


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    """Attribute-walking parameter container, in declaration order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in own.items():
            if state[k].shape != p.data.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != {p.data.shape}")
            p.data = np.asarray(state[k], dtype=np.float32).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.weight = Parameter(rng.uniform(-limit, limit, size=(n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, n_in: int, n_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        self.weight = _uniform(rng, (n_out, n_in, kernel, kernel), n_in * kernel * kernel)
        self.bias = _uniform(rng, (n_out,), n_in * kernel * kernel)
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, n_in: int, n_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 2, padding: int = 1):
        self.weight = _uniform(rng, (n_in, n_out, kernel, kernel), n_in * kernel * kernel // (stride * stride))
        self.bias = Parameter(np.zeros(n_out))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        h, dh = self.heads, D // self.heads
        qkv = self.qkv(x).reshape(B, N, 3, h, dh).permute(2, 0, 3, 1, 4)
        q = T.slice_axis(qkv, 0, 0, 1).reshape(B, h, N, dh)
        k = T.slice_axis(qkv, 0, 1, 2).reshape(B, h, N, dh)
        v = T.slice_axis(qkv, 0, 2, 3).reshape(B, h, N, dh)
        att = T.softmax(T.scale(T.matmul(q, k.permute(0, 1, 3, 2)), dh ** -0.5))
        out = T.matmul(att, v).permute(0, 2, 1, 3).reshape(B, N, D)
        return self.proj(out)


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    in_channels: int = 3
    extra_channels: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def channels(self) -> tuple[int, ...]:
        return (self.embed_dim,) + tuple(self.extra_channels)

    def with_channels(self, in_channels: int) -> "EncoderConfig":
        return EncoderConfig(self.image_size, self.patch_size, self.embed_dim, self.depth,
                             self.heads, in_channels, self.extra_channels)


class Encoder(Module):
    """Patch-embedding transformer followed by stride-2 conv blocks.

    Returns feature maps at the token-grid resolution and at each extra
    block's halved resolution (8x8, 4x4, 2x2 for the defaults).
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        p = cfg.patch_size
        self.patch = Conv2d(cfg.in_channels, cfg.embed_dim, p, rng, stride=p)
        self.pos = Parameter(np.zeros((cfg.grid * cfg.grid, cfg.embed_dim)))
        self.blocks = [Block(cfg.embed_dim, cfg.heads, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.embed_dim)
        chans = cfg.channels
        self.extra = [Conv2d(chans[i], chans[i + 1], 3, rng, stride=2, padding=1)
                      for i in range(len(chans) - 1)]

    def tokens(self, x: Tensor) -> Tensor:
        """Token embeddings (B, N, D) after the final transformer block."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(f"encode: input shape {x.shape[1:]} does not match "
                             f"({cfg.in_channels}, {cfg.image_size}, {cfg.image_size})")
        B = x.shape[0]
        t = self.patch(x).reshape(B, cfg.embed_dim, -1).permute(0, 2, 1) + self.pos
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t)

    def forward(self, x: Tensor) -> list[Tensor]:
        B, g = x.shape[0], self.cfg.grid
        fmap = self.tokens(x).permute(0, 2, 1).reshape(B, self.cfg.embed_dim, g, g)
        maps = [fmap]
        for conv in self.extra:
            maps.append(T.gelu(conv(maps[-1])))
        return maps


@dataclass
class DetectionOutput:
    class_logits: Tensor  # (B, A, K+1)
    box_deltas: Tensor  # (B, A, 4)


class DetectHead(Module):
    def __init__(self, channels: tuple[int, ...], anchors: AnchorSet, n_cls: int,
                 rng: np.random.Generator):
        if len(channels) != len(anchors.scales):
            raise ConfigError(f"detect_head: {len(channels)} feature maps for "
                              f"{len(anchors.scales)} anchor scales")
        self.n_cls = n_cls
        self.per_cell = anchors.per_cell
        a = anchors.per_cell
        self.cls = [Conv2d(c, a * (n_cls + 1), 3, rng, padding=1) for c in channels]
        self.box = [Conv2d(c, a * 4, 3, rng, padding=1) for c in channels]

    def forward(self, maps: list[Tensor]) -> DetectionOutput:
        if len(maps) != len(self.cls):
            raise ConfigError(f"detect_head: got {len(maps)} maps, expected {len(self.cls)}")
        logits, deltas = [], []
        a, k = self.per_cell, self.n_cls + 1
        for fm, cc, bc in zip(maps, self.cls, self.box):
            B, _, H, W = fm.shape
            # channel c = anchor * width + component -> (B, H, W, anchor, width)
            logits.append(cc(fm).reshape(B, a, k, H, W).permute(0, 3, 4, 1, 2).reshape(B, H * W * a, k))
            deltas.append(bc(fm).reshape(B, a, 4, H, W).permute(0, 3, 4, 1, 2).reshape(B, H * W * a, 4))
        return DetectionOutput(T.concat(logits, axis=1), T.concat(deltas, axis=1))


class Decoder(Module):
    """Transposed-conv upsampler from the token-grid map to a full image."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 grid: int = 8, image_size: int = 64, hidden: tuple[int, ...] = (32, 16)):
        n_up = int(round(np.log2(image_size // grid)))
        if grid * 2 ** n_up != image_size:
            raise ConfigError("decoder needs image_size = grid * 2**k")
        widths = [in_channels] + list(hidden[: n_up - 1])
        while len(widths) < n_up:
            widths.append(widths[-1])
        widths.append(out_channels)
        self.ups = [ConvTranspose2d(widths[i], widths[i + 1], 4, rng, stride=2, padding=1)
                    for i in range(n_up)]

    def forward(self, fmap: Tensor) -> Tensor:
        x = fmap
        for i, up in enumerate(self.ups):
            x = up(x)
            x = T.gelu(x) if i < len(self.ups) - 1 else T.sigmoid(x)
        return x


class FeatureFusion(Module):
    """Per-scale channel concat followed by a 1x1 reduction."""

    def __init__(self, channels: tuple[int, ...], rng: np.random.Generator):
        self.reduce = [Conv2d(2 * c, c, 1, rng) for c in channels]

    def forward(self, maps_a: list[Tensor], maps_b: list[Tensor]) -> list[Tensor]:
        if len(maps_a) != len(maps_b):
            raise AlignmentError("feature_fusion: scale counts differ")
        fused = []
        for fa, fb, conv in zip(maps_a, maps_b, self.reduce):
            if fa.shape != fb.shape:
                raise AlignmentError(f"feature_fusion: shapes {fa.shape} and {fb.shape} differ")
            fused.append(conv(T.concat([fa, fb], axis=1)))
        return fused


def input_fusion_stem(image_a, image_b) -> np.ndarray:
    """Channel-concatenate a visual/thermal pair, visual channels first.

    Works on single images (C,H,W) or batches (B,C,H,W).
    """
    a, b = np.asarray(image_a), np.asarray(image_b)
    if a.shape[-2:] != b.shape[-2:] or a.ndim != b.ndim:
        raise AlignmentError(f"input_fusion: resolutions {a.shape[-2:]} and {b.shape[-2:]} differ")
    return np.concatenate([a, b], axis=-3)


# ---------------------------------------------------------------------------
# complete networks

class Detector(Module):
    """Encoder + SSD head, optionally with a reconstruction decoder."""

    def __init__(self, enc_cfg: EncoderConfig, anchors: AnchorSet, n_cls: int,
                 rng: np.random.Generator, decoder_channels: int | None = None):
        self.encoder = Encoder(enc_cfg, rng)
        self.head = DetectHead(enc_cfg.channels, anchors, n_cls, rng)
        if decoder_channels is not None:
            self.decoder = Decoder(enc_cfg.embed_dim, decoder_channels, rng,
                                   grid=enc_cfg.grid, image_size=enc_cfg.image_size)

    def features(self, x: Tensor) -> list[Tensor]:
        return self.encoder(x)

    def forward(self, x: Tensor) -> DetectionOutput:
        return self.head(self.encoder(x))


class FusionDetector(Module):
    """Two encoders, per-scale 1x1 fusion, one shared head."""

    def __init__(self, cfg_a: EncoderConfig, cfg_b: EncoderConfig, anchors: AnchorSet,
                 n_cls: int, rng: np.random.Generator):
        if cfg_a.channels != cfg_b.channels:
            raise ConfigError("feature fusion needs matching encoder widths")
        self.encoder_a = Encoder(cfg_a, rng)
        self.encoder_b = Encoder(cfg_b, rng)
        self.fusion = FeatureFusion(cfg_a.channels, rng)
        self.head = DetectHead(cfg_a.channels, anchors, n_cls, rng)

    def forward(self, x_a: Tensor, x_b: Tensor) -> DetectionOutput:
        return self.head(self.fusion(self.encoder_a(x_a), self.encoder_b(x_b)))

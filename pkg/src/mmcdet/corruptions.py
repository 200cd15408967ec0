"""Fifteen natural image corruptions at five severities, and the sweep over them.

``SEVERITY`` is the single source of truth for every corruption's parameters.
The constants are scaled for 64x64 images; they are this package's own
choice, not a port of any external benchmark's tables.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import convolve, gaussian_filter, map_coordinates, zoom

from .tensor import ParameterError

GROUPS = {
    "noise": ("gaussian_noise", "shot_noise", "impulse_noise"),
    "blur": ("defocus_blur", "glass_blur", "motion_blur", "zoom_blur"),
    "weather": ("brightness", "fog", "frost", "snow"),
    "digital": ("contrast", "elastic", "jpeg", "pixelate"),
}
KINDS = tuple(k for g in GROUPS.values() for k in g)

SEVERITY = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.10, 0.14),  # sigma
    "shot_noise": (60, 25, 12, 5, 3),  # photons per unit intensity
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),  # salt-and-pepper fraction
    "defocus_blur": (1.0, 1.5, 2.0, 2.5, 3.0),  # disk radius, px
    "glass_blur": ((0.4, 1, 1), (0.5, 1, 2), (0.6, 1, 2), (0.7, 2, 1), (0.9, 2, 2)),  # sigma, max shift, iters
    "motion_blur": (3, 5, 7, 9, 11),  # streak length, px
    "zoom_blur": (1.11, 1.16, 1.21, 1.26, 1.31),  # largest zoom (step 0.02)
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),  # additive shift
    "fog": ((1.5, 2.0), (2.0, 2.0), (2.5, 1.7), (2.5, 1.5), (3.0, 1.4)),  # strength, spectral decay
    "frost": ((1.0, 0.4), (0.8, 0.6), (0.7, 0.7), (0.65, 0.7), (0.6, 0.75)),  # image, frost weights
    "snow": ((0.01, 3, 0.9), (0.015, 5, 0.85), (0.02, 7, 0.8), (0.025, 9, 0.75), (0.03, 11, 0.7)),  # density, streak px, mix
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),  # contrast factor
    "elastic": ((1.5, 4.0), (2.0, 4.0), (2.5, 3.5), (3.0, 3.0), (3.5, 3.0)),  # amplitude px, smoothness
    "jpeg": (25, 18, 15, 10, 7),  # quality
    "pixelate": (0.6, 0.5, 0.4, 0.3, 0.25),  # downsample factor
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY:
            raise ParameterError(f"unknown corruption {self.kind!r}")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ParameterError(f"severity must be 1..5, got {self.severity}")


# ---------------------------------------------------------------------------
# individual corruptions, all on float64 (C,H,W) images in [0,1]

def gaussian_noise(x, sigma, rng):
    return x + sigma * rng.standard_normal(x.shape)


def shot_noise(x, photons, rng):
    return rng.poisson(x * photons) / photons


def impulse_noise(x, amount, rng):
    u = rng.random(x.shape)
    salt = rng.random(x.shape) < 0.5
    return np.where(u < amount, salt.astype(float), x)


def _filter(x, kernel):
    return np.stack([convolve(c, kernel, mode="reflect") for c in x])


def _disk(radius):
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xx ** 2 + yy ** 2 <= radius ** 2).astype(float)
    k = gaussian_filter(k, 0.5)
    return k / k.sum()


def defocus_blur(x, radius, rng):
    return _filter(x, _disk(radius))


def glass_blur(x, params, rng):
    sigma, delta, iters = params
    out = gaussian_filter(x, (0, sigma, sigma))
    _, H, W = x.shape
    for _ in range(iters):
        shifts = rng.integers(-delta, delta, size=(H - 2 * delta, W - 2 * delta, 2), endpoint=False)
        for h in range(H - delta, delta, -1):
            for w in range(W - delta, delta, -1):
                dy, dx = shifts[h - delta - 1, w - delta - 1]
                hp, wp = h + dy, w + dx
                out[:, h, w], out[:, hp, wp] = out[:, hp, wp].copy(), out[:, h, w].copy()
    return gaussian_filter(out, (0, sigma, sigma))


def _line_kernel(length, angle):
    k = np.zeros((length, length))
    c = (length - 1) / 2
    for t in np.linspace(-c, c, 4 * length):
        k[int(round(c + t * np.sin(angle))), int(round(c + t * np.cos(angle)))] = 1.0
    return k / k.sum()


def motion_blur(x, length, rng):
    return _filter(x, _line_kernel(length, rng.uniform(-np.pi / 4, np.pi / 4)))


def _center_zoom(x, z):
    _, H, W = x.shape
    ch = int(np.ceil(H / z))
    top = (H - ch) // 2
    crop = x[:, top:top + ch, top:top + ch]
    out = zoom(crop, (1, H / ch, W / ch), order=1)
    return out[:, :H, :W]


def zoom_blur(x, z_max, rng):
    zooms = np.arange(1.0, z_max, 0.02)[1:]
    acc = x.copy()
    for z in zooms:
        acc += _center_zoom(x, z)
    return acc / (len(zooms) + 1)


def brightness(x, shift, rng=None):
    return x + shift


def _fractal(H, W, decay, rng):
    """Isotropic 1/f**decay noise synthesized in the Fourier domain, scaled to [0,1]."""
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.rfftfreq(W)[None, :]
    f = np.sqrt(fx ** 2 + fy ** 2)
    f[0, 0] = 1.0
    spec = (rng.standard_normal(f.shape) + 1j * rng.standard_normal(f.shape)) / f ** decay
    spec[0, 0] = 0.0
    field = np.fft.irfft2(spec, s=(H, W))
    field -= field.min()
    return field / field.max()


def fog(x, params, rng):
    strength, decay = params
    _, H, W = x.shape
    top = x.max()
    out = x + strength * 0.3 * _fractal(H, W, decay, rng)[None]
    return out * top / (top + strength * 0.3)


def _frost_texture(H, W, rng):
    tex = np.zeros((H, W))
    for octave, weight in ((6.0, 0.5), (3.0, 0.3), (1.5, 0.2)):
        n = gaussian_filter(rng.standard_normal((H, W)), octave)
        n /= np.abs(n).max() + 1e-12
        tex += weight * (1.0 - np.abs(n)) ** 4  # ridges at zero crossings
    for _ in range(int(0.02 * H * W)):  # crystal needles
        y, x0 = rng.integers(0, H), rng.integers(0, W)
        ang, length = rng.uniform(0, np.pi), rng.integers(2, 6)
        for t in range(length):
            yy, xx = int(y + t * np.sin(ang)), int(x0 + t * np.cos(ang))
            if 0 <= yy < H and 0 <= xx < W:
                tex[yy, xx] += 0.6
    tex = gaussian_filter(tex, 0.5)
    return np.clip(tex / tex.max(), 0, 1)


def frost(x, params, rng):
    w_img, w_frost = params
    _, H, W = x.shape
    tint = np.array([0.85, 0.9, 1.0])[:x.shape[0], None, None]
    return w_img * x + w_frost * tint * _frost_texture(H, W, rng)[None]


def snow(x, params, rng):
    density, length, mix = params
    _, H, W = x.shape
    gray = x.mean(axis=0, keepdims=True)
    base = mix * x + (1 - mix) * np.maximum(x, gray * 1.5 + 0.5)
    flakes = (rng.random((H, W)) < density) * rng.uniform(0.5, 1.0, (H, W))
    streaks = convolve(flakes, _line_kernel(length, rng.uniform(np.pi / 3, 2 * np.pi / 3)), mode="wrap")
    streaks = np.clip(streaks * length * 0.6, 0, 1)
    return base + streaks[None]


def contrast(x, factor, rng=None):
    m = x.mean(axis=(1, 2), keepdims=True)
    return (x - m) * factor + m


def elastic(x, params, rng):
    amp, smooth = params
    C, H, W = x.shape
    dx = gaussian_filter(rng.uniform(-1, 1, (H, W)), smooth)
    dy = gaussian_filter(rng.uniform(-1, 1, (H, W)), smooth)
    norm = max(np.abs(dx).max(), np.abs(dy).max(), 1e-12)
    dx, dy = amp * dx / norm, amp * dy / norm
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    return np.stack([map_coordinates(c, [yy + dy, xx + dx], order=1, mode="reflect") for c in x])


_Q_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61], [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56], [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77], [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101], [72, 92, 95, 98, 112, 100, 103, 99]], float)
_Q_CHROMA = np.full((8, 8), 99.0)
_Q_CHROMA[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]


def _quant_table(base, quality):
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def _block_dct_roundtrip(chan, table):
    H, W = chan.shape
    blocks = chan.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3) - 128.0
    coef = dctn(blocks, axes=(2, 3), norm="ortho")
    coef = np.round(coef / table) * table
    out = idctn(coef, axes=(2, 3), norm="ortho") + 128.0
    return out.transpose(0, 2, 1, 3).reshape(H, W)


def jpeg(x, quality, rng=None):
    if x.shape[1] % 8 or x.shape[2] % 8:
        raise ParameterError("jpeg corruption needs image sides divisible by 8")
    rgb = x * 255.0
    if x.shape[0] == 1:
        return _block_dct_roundtrip(rgb[0], _quant_table(_Q_LUMA, quality))[None] / 255.0
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128 + 0.5 * r - 0.418688 * g - 0.081312 * b
    y = _block_dct_roundtrip(y, _quant_table(_Q_LUMA, quality))
    cb = _block_dct_roundtrip(cb, _quant_table(_Q_CHROMA, quality))
    cr = _block_dct_roundtrip(cr, _quant_table(_Q_CHROMA, quality))
    out = np.stack([y + 1.402 * (cr - 128),
                    y - 0.344136 * (cb - 128) - 0.714136 * (cr - 128),
                    y + 1.772 * (cb - 128)])
    return out / 255.0


def _area_matrix(n_out, n_in):
    """Rows average the input cells each output cell covers (fractional overlap)."""
    m = np.zeros((n_out, n_in))
    edges = np.linspace(0, n_in, n_out + 1)
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(np.floor(lo)), int(np.ceil(hi))):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / m.sum(axis=1, keepdims=True)


def pixelate(x, factor, rng=None):
    _, H, W = x.shape
    h, w = max(1, int(round(H * factor))), max(1, int(round(W * factor)))
    small = _area_matrix(h, H) @ x @ _area_matrix(w, W).T
    iy = (np.arange(H) * h) // H
    ix = (np.arange(W) * w) // W
    return small[:, iy][:, :, ix]


_FUNCS = {
    "gaussian_noise": gaussian_noise, "shot_noise": shot_noise, "impulse_noise": impulse_noise,
    "defocus_blur": defocus_blur, "glass_blur": glass_blur, "motion_blur": motion_blur,
    "zoom_blur": zoom_blur, "brightness": brightness, "fog": fog, "frost": frost, "snow": snow,
    "contrast": contrast, "elastic": elastic, "jpeg": jpeg, "pixelate": pixelate,
}


def corrupt(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption; output is float32, same shape, clipped to [0, 1]."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise ParameterError(f"corrupt expects a (C,H,W) image, got shape {x.shape}")
    rng = np.random.default_rng([spec.seed, KINDS.index(spec.kind)])
    out = _FUNCS[spec.kind](x, SEVERITY[spec.kind][spec.severity - 1], rng)
    return np.clip(out, 0, 1).astype(np.float32)


# ---------------------------------------------------------------------------
# sweep

SWEEP_COLUMNS = ("run_id", "corruption", "severity", "split", "mAP", "F1")


def corruption_sweep(system, dataset, severity: int = 3, seed: int = 0, kinds=KINDS,
                     splits=("all", "day", "night")) -> dict[str, object]:
    """Evaluate on clean and on each corrupted copy of the visual test images.

    Returns an ordered mapping ``{"clean": report, kind: report, ...}``.  Each
    image is corrupted with its own seed so results do not depend on order.
    """
    from .evaluate import evaluate

    out = {"clean": evaluate(system, dataset, splits)}
    for kind in kinds:
        def transform(img, meta, kind=kind):
            return corrupt(img, CorruptionSpec(kind, severity, seed * 1_000_003 + meta.id))

        out[kind] = evaluate(system, dataset, splits, transform_a=transform)
    return out


def write_sweep_csv(path, results: dict, run_id: str = "", severity: int = 3) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for name, rep in results.items():
            for split in rep.per_split:
                w.writerow([run_id, name, 0 if name == "clean" else severity, split,
                            f"{rep.mAP(split):.6f}", f"{rep.f1(split):.6f}"])

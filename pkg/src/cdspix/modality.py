"""Auxiliary modality construction and training-time augmentation.

The auxiliary modalities are deterministic per-image transforms of the
RGB pixels that keep spatial structure while shifting global appearance:
an HSV re-encoding, a CIELAB re-encoding, and a Sobel gradient-magnitude
map. All three come out as (H, W, 3) float arrays in [0, 1] (per-channel
min-max normalized where the raw range is unbounded).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AUX_KINDS",
    "rgb_to_hsv",
    "rgb_to_lab",
    "rgb_to_lab_raw",
    "gradient_map",
    "make_aux",
    "aux_call_count",
    "reset_aux_call_count",
    "AugmentConfig",
    "augment",
    "resize_image",
    "resize_labels",
]

AUX_KINDS = ("gradient", "hsv", "lab")

# instrumentation: inference paths must never construct an auxiliary modality
_AUX_CALLS = 0


def aux_call_count() -> int:
    return _AUX_CALLS


def reset_aux_call_count() -> None:
    global _AUX_CALLS
    _AUX_CALLS = 0


def _check_rgb(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB, got {pixels.shape}")
    return pixels


def _minmax_per_channel(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=(0, 1), keepdims=True)
    hi = x.max(axis=(0, 1), keepdims=True)
    rng = hi - lo
    rng[rng == 0] = 1.0
    return (x - lo) / rng


def rgb_to_hsv(pixels: np.ndarray) -> np.ndarray:
    """Hexcone HSV with hue scaled to [0, 1]."""
    rgb = _check_rgb(pixels)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    c = v - mn
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    h = np.zeros_like(v)
    nz = c > 0
    rmax = nz & (v == r)
    gmax = nz & (v == g) & ~rmax
    bmax = nz & ~rmax & ~gmax
    cc = np.where(nz, c, 1.0)
    h[rmax] = (((g - b) / cc)[rmax] / 6.0) % 1.0
    h[gmax] = (((b - r) / cc)[gmax] + 2.0) / 6.0
    h[bmax] = (((r - g) / cc)[bmax] + 4.0) / 6.0
    return np.stack([h, s, v], axis=-1).astype(np.float32)


_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab_raw(pixels: np.ndarray) -> np.ndarray:
    """sRGB -> XYZ (D65) -> CIELAB in native units (L in [0,100])."""
    rgb = _check_rgb(pixels).astype(np.float64)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _SRGB_TO_XYZ.T
    t = xyz / _D65_WHITE
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def rgb_to_lab(pixels: np.ndarray) -> np.ndarray:
    """CIELAB re-encoding, per-channel min-max normalized for network input."""
    return _minmax_per_channel(rgb_to_lab_raw(pixels)).astype(np.float32)


def _sobel_xy(lum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sobel responses as differences of smoothed sums.

    Each half-sum runs through identical arithmetic, so constant inputs
    cancel exactly instead of leaving rounding residue that min-max
    normalization would blow up to full scale.
    """
    p = np.pad(lum, 1, mode="edge")
    right = p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]
    left = p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2]
    bottom = p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]
    top = p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:]
    return right - left, bottom - top


def gradient_map(pixels: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Sobel gradient magnitude of the luminance, replicated to 3 channels.

    Luminance weights (0.299, 0.587, 0.114); replicate-border padding so
    the image frame itself produces no response.
    """
    rgb = _check_rgb(pixels).astype(np.float64)
    lum = rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114
    gx, gy = _sobel_xy(lum)
    mag = np.sqrt(gx * gx + gy * gy)
    if normalize:
        hi = mag.max()
        if hi > 0:
            mag = mag / hi
    return np.repeat(mag[:, :, None], 3, axis=2).astype(np.float32)


def make_aux(pixels: np.ndarray, kind: str = "gradient") -> np.ndarray:
    """Build the auxiliary modality named by ``kind``."""
    global _AUX_CALLS
    _AUX_CALLS += 1
    if kind == "gradient":
        return gradient_map(pixels)
    if kind == "hsv":
        return rgb_to_hsv(pixels)
    if kind == "lab":
        return rgb_to_lab(pixels)
    raise ValueError(f"unknown auxiliary modality {kind!r}; expected one of {AUX_KINDS}")


# -- geometric transforms ---------------------------------------------------------


def _interp_1d(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corner-aligned source indices and weights for linear resampling."""
    if n_out == 1:
        z = np.zeros(1, dtype=np.int64)
        return z, z, np.ones(1)
    s = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(s).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, s - lo


def resize_image(pixels: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an (H, W, C) float image."""
    pixels = np.asarray(pixels)
    h, w = pixels.shape[:2]
    rlo, rhi, rf = _interp_1d(h, h2)
    clo, chi, cf = _interp_1d(w, w2)
    rf = rf[:, None, None]
    top = pixels[rlo] * (1 - rf) + pixels[rhi] * rf
    cf = cf[None, :, None]
    out = top[:, clo] * (1 - cf) + top[:, chi] * cf
    return out.astype(pixels.dtype, copy=False)


def resize_labels(labels: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Corner-aligned nearest-neighbor resize of an (H, W) label map."""
    labels = np.asarray(labels)
    h, w = labels.shape
    rlo, rhi, rf = _interp_1d(h, h2)
    clo, chi, cf = _interp_1d(w, w2)
    ridx = np.where(rf < 0.5, rlo, rhi)
    cidx = np.where(cf < 0.5, clo, chi)
    return labels[np.ix_(ridx, cidx)]


@dataclass
class AugmentConfig:
    """Training augmentation policy: random resize, crop, flips."""

    crop: int = 208
    scale_range: tuple[float, float] = (0.8, 1.2)
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5


def augment(
    pixels: np.ndarray,
    labels: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one random resize/crop/flip draw to an image/label pair.

    The same geometric transform hits both rasters: the image is resampled
    bilinearly, the label map with nearest neighbor. Resize targets are
    clamped so the crop always fits.
    """
    pixels = np.asarray(pixels)
    labels = np.asarray(labels)
    if pixels.shape[:2] != labels.shape:
        raise ValueError(f"image {pixels.shape[:2]} and labels {labels.shape} disagree")
    h, w = labels.shape
    scale = rng.uniform(*cfg.scale_range)
    h2 = max(cfg.crop, int(round(h * scale)))
    w2 = max(cfg.crop, int(round(w * scale)))
    if h2 != h or w2 != w:
        pixels = resize_image(pixels, h2, w2)
        labels = resize_labels(labels, h2, w2)
    if h2 < cfg.crop or w2 < cfg.crop:
        raise ValueError(f"image {h2}x{w2} smaller than crop {cfg.crop}")
    r0 = int(rng.integers(0, h2 - cfg.crop + 1))
    c0 = int(rng.integers(0, w2 - cfg.crop + 1))
    pixels = pixels[r0 : r0 + cfg.crop, c0 : c0 + cfg.crop]
    labels = labels[r0 : r0 + cfg.crop, c0 : c0 + cfg.crop]
    if rng.random() < cfg.flip_h_prob:
        pixels = pixels[:, ::-1]
        labels = labels[:, ::-1]
    if rng.random() < cfg.flip_v_prob:
        pixels = pixels[::-1]
        labels = labels[::-1]
    return np.ascontiguousarray(pixels), np.ascontiguousarray(labels)

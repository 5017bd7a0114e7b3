"""Classic SLIC superpixels: the traditional clustering baseline.

Features are raw CIELAB color plus pixel coordinates; the distance is
D^2 = d_lab^2 + (m/S)^2 * d_xy^2 with S = sqrt(N/k). Seeds start at cell
midpoints of a near-square grid, move to a strictly-lower-gradient pixel
in their 3x3 window, and k-means-style assignment/update alternate inside
2S windows. The within-cluster energy sum(D^2) never increases across
iterations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .modality import rgb_to_lab_raw
from .superpixels import enforce_connectivity

__all__ = ["SlicConfig", "slic", "grid_baseline"]


@dataclass
class SlicConfig:
    k: int = 100
    m: float = 10.0
    iters: int = 10
    connectivity: bool = True

    def __post_init__(self):
        if self.k < 1 or self.iters < 1:
            raise ValueError("k and iters must be >= 1")


def _seed_grid(h: int, w: int, k: int) -> tuple[np.ndarray, np.ndarray, int, int]:
    ky = max(1, round(math.sqrt(k * h / w)))
    kx = max(1, round(k / ky))
    rb = np.round(np.arange(ky + 1) * h / ky).astype(np.int64)
    cb = np.round(np.arange(kx + 1) * w / kx).astype(np.int64)
    ys = (rb[:-1] + rb[1:] - 1) / 2.0
    xs = (cb[:-1] + cb[1:] - 1) / 2.0
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return yy.reshape(-1), xx.reshape(-1), ky, kx


def _lab_gradient(lab: np.ndarray) -> np.ndarray:
    padded = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    gx = padded[1:-1, 2:] - padded[1:-1, :-2]
    gy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    return (gx * gx).sum(axis=2) + (gy * gy).sum(axis=2)


def slic(image: np.ndarray, cfg: SlicConfig, return_energy: bool = False):
    """Segment an (H, W, 3) RGB image in [0,1] into about ``cfg.k`` superpixels."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    n = h * w
    if cfg.k > n:
        raise ValueError(f"k={cfg.k} exceeds pixel count {n}")
    lab = rgb_to_lab_raw(image)
    s = math.sqrt(n / cfg.k)
    sy, sx, ky, kx = _seed_grid(h, w, cfg.k)
    nk = sy.size

    # move each seed to a strictly lower-gradient pixel in its 3x3 window
    grad = _lab_gradient(lab)
    iy = np.clip(np.round(sy).astype(np.int64), 0, h - 1)
    ix = np.clip(np.round(sx).astype(np.int64), 0, w - 1)
    for i in range(nk):
        r0, r1 = max(0, iy[i] - 1), min(h, iy[i] + 2)
        c0, c1 = max(0, ix[i] - 1), min(w, ix[i] + 2)
        win = grad[r0:r1, c0:c1]
        best = np.unravel_index(np.argmin(win), win.shape)
        if win[best] < grad[iy[i], ix[i]]:
            sy[i], sx[i] = r0 + best[0], c0 + best[1]

    centers = np.empty((nk, 5))
    centers[:, 0] = sy
    centers[:, 1] = sx
    ir = np.clip(np.round(sy).astype(np.int64), 0, h - 1)
    ic = np.clip(np.round(sx).astype(np.int64), 0, w - 1)
    centers[:, 2:] = lab[ir, ic]

    wxy = (cfg.m / s) ** 2
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    labels = np.full((h, w), -1, dtype=np.int32)
    half_y = int(math.ceil(max(s, h / ky))) + 1
    half_x = int(math.ceil(max(s, w / kx))) + 1
    energies: list[float] = []

    for _ in range(cfg.iters):
        if labels.min() >= 0:
            cl = centers[labels]
            dist = ((lab - cl[:, :, 2:]) ** 2).sum(axis=2)
            dist += wxy * ((rows[:, None] - cl[:, :, 0]) ** 2 + (cols[None, :] - cl[:, :, 1]) ** 2)
        else:
            dist = np.full((h, w), np.inf)
        for i in range(nk):
            cy, cx = centers[i, 0], centers[i, 1]
            r0, r1 = max(0, int(cy) - half_y), min(h, int(cy) + half_y + 1)
            c0, c1 = max(0, int(cx) - half_x), min(w, int(cx) + half_x + 1)
            dl = ((lab[r0:r1, c0:c1] - centers[i, 2:]) ** 2).sum(axis=2)
            dxy = (rows[r0:r1, None] - cy) ** 2 + (cols[None, c0:c1] - cx) ** 2
            d2 = dl + wxy * dxy
            better = d2 < dist[r0:r1, c0:c1]
            labels[r0:r1, c0:c1][better] = i
            dist[r0:r1, c0:c1][better] = d2[better]
        if labels.min() < 0:  # window coverage fallback
            miss = labels < 0
            mr, mc = np.nonzero(miss)
            d = (mr[:, None] - centers[None, :, 0]) ** 2 + (mc[:, None] - centers[None, :, 1]) ** 2
            labels[miss] = d.argmin(axis=1)
            dl = ((lab[miss] - centers[labels[miss], 2:]) ** 2).sum(axis=1)
            dist[miss] = dl + wxy * d.min(axis=1)
        energies.append(float(dist.sum()))
        # center update: member means in (y, x, L, a, b)
        flat = labels.reshape(-1)
        count = np.bincount(flat, minlength=nk).astype(np.float64)
        ok = count > 0
        feats = [
            np.repeat(rows, w),
            np.tile(cols, h),
            lab[:, :, 0].reshape(-1),
            lab[:, :, 1].reshape(-1),
            lab[:, :, 2].reshape(-1),
        ]
        for fi, fv in enumerate(feats):
            sums = np.bincount(flat, weights=fv, minlength=nk)
            centers[ok, fi] = sums[ok] / count[ok]

    if cfg.connectivity:
        labels = enforce_connectivity(labels, max(1, (n // cfg.k) // 16))
    if return_energy:
        return labels, energies
    return labels


def grid_baseline(h: int, w: int, d: int) -> np.ndarray:
    """Plain d x d tiling (ragged cells at the far edges if not divisible)."""
    if d < 1:
        raise ValueError("d must be >= 1")
    kw = (w + d - 1) // d
    rows = np.arange(h) // d
    cols = np.arange(w) // d
    return (rows[:, None] * kw + cols[None, :]).astype(np.int32)

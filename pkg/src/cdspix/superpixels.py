"""Superpixel grid geometry, hard assignment, connectivity, rendering.

An image of size (H, W) with cell side ``d`` is tiled into a (H/d, W/d)
grid of initial superpixels. An association map ``q`` of shape (H, W, 9)
holds, per pixel, a categorical distribution over the pixel's own grid
cell and its eight grid neighbors. The nine channels follow row-major
order over the offsets (dr, dc) in (-1, 0, 1) x (-1, 0, 1):

    0:NW 1:N 2:NE 3:W 4:center 5:E 6:SW 7:S 8:SE

Off-grid neighbors are invalid; their probabilities are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

__all__ = [
    "NEIGHBOR_OFFSETS",
    "GridSpec",
    "grid_index_map",
    "hard_assign",
    "enforce_connectivity",
    "plan_resize",
    "render_mean_fill",
    "boundary_overlay",
    "boundary_mask",
]

NEIGHBOR_OFFSETS: tuple[tuple[int, int], ...] = tuple(
    (dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)
)

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True)
class GridSpec:
    """Initial superpixel tiling of an (H, W) image with cell side d."""

    height: int
    width: int
    d: int

    def __post_init__(self):
        if self.d < 1 or (self.d & (self.d - 1)) != 0:
            raise ValueError(f"cell side d={self.d} must be a power of two")
        if self.height % self.d or self.width % self.d:
            raise ValueError(f"{self.height}x{self.width} not divisible by d={self.d}")

    @property
    def kh(self) -> int:
        return self.height // self.d

    @property
    def kw(self) -> int:
        return self.width // self.d

    @property
    def k(self) -> int:
        return self.kh * self.kw


@lru_cache(maxsize=32)
def _grid_index_map_cached(h: int, w: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    grid = GridSpec(h, w, d)
    rows = np.arange(h) // d
    cols = np.arange(w) // d
    ids = np.empty((h, w, 9), dtype=np.int32)
    valid = np.empty((h, w, 9), dtype=bool)
    for ch, (dr, dc) in enumerate(NEIGHBOR_OFFSETS):
        rr = rows + dr
        cc = cols + dc
        ok = ((rr >= 0) & (rr < grid.kh))[:, None] & ((cc >= 0) & (cc < grid.kw))[None, :]
        rr = np.clip(rr, 0, grid.kh - 1)
        cc = np.clip(cc, 0, grid.kw - 1)
        ids[:, :, ch] = rr[:, None] * grid.kw + cc[None, :]
        valid[:, :, ch] = ok
    ids.setflags(write=False)
    valid.setflags(write=False)
    return ids, valid


def grid_index_map(h: int, w: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ids of the nine neighbor cells plus a validity mask.

    Returns ``(ids, valid)`` of shapes (H, W, 9); ``ids`` entries for
    invalid channels are clamped in-grid and must be ignored.
    """
    return _grid_index_map_cached(h, w, d)


def hard_assign(q: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Argmax assignment of each pixel to a neighbor cell id.

    Invalid channels never win; ties go to the lowest channel index.
    """
    q = np.asarray(q)
    if q.shape != (grid.height, grid.width, 9):
        raise ValueError(f"q shape {q.shape} != {(grid.height, grid.width, 9)}")
    ids, valid = grid_index_map(grid.height, grid.width, grid.d)
    masked = np.where(valid, q, -1.0)
    ch = masked.argmax(axis=2)
    return np.take_along_axis(ids, ch[:, :, None], axis=2)[:, :, 0].astype(np.int32)


def _components(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected components of a labeling (components never straddle labels)."""
    comp = np.zeros(labels.shape, dtype=np.int32)
    next_id = 0
    for v in np.unique(labels):
        mask = labels == v
        sub, n = ndimage.label(mask, structure=_FOUR_CONN)
        comp[mask] = sub[mask] + next_id
        next_id += n
    return comp - 1, next_id  # component ids 0..n-1


def enforce_connectivity(labels: np.ndarray, min_size: int = 1) -> np.ndarray:
    """Relabel fragments so every surviving label is one 4-connected region.

    A component is absorbed if it is not its label's largest component or
    if it is smaller than ``min_size``; it takes the most frequent
    4-adjacent neighboring label (ties to the smallest id). Components
    with no differently-labeled neighbor are kept. Idempotent.
    """
    out = np.asarray(labels).astype(np.int32).copy()
    h, w = out.shape
    while True:
        comp, n = _components(out)
        if n == 1:
            return out
        sizes = np.bincount(comp.reshape(-1), minlength=n)
        first_pix = np.full(n, h * w, dtype=np.int64)
        flat_comp = comp.reshape(-1)
        np.minimum.at(first_pix, flat_comp, np.arange(h * w))
        comp_label = out.reshape(-1)[first_pix]
        # the largest component of each label survives (ties: first in raster order)
        order = np.lexsort((first_pix, -sizes))
        keep = np.zeros(n, dtype=bool)
        seen_label: set[int] = set()
        for ci in order:
            lv = int(comp_label[ci])
            if lv not in seen_label:
                seen_label.add(lv)
                keep[ci] = True
        bad = [ci for ci in range(n) if (not keep[ci]) or sizes[ci] < min_size]
        if not bad:
            return out
        bad.sort(key=lambda ci: (sizes[ci], first_pix[ci]))
        changed = False
        for ci in bad:
            mask = comp == ci
            neigh: dict[int, int] = {}
            for vals in _adjacent_values(out, mask):
                for v, c in zip(*np.unique(vals, return_counts=True)):
                    neigh[int(v)] = neigh.get(int(v), 0) + int(c)
            cur = int(out[mask][0])
            neigh.pop(cur, None)
            if not neigh:
                continue  # e.g. single label in image
            best = max(neigh.values())
            target = min(v for v, c in neigh.items() if c == best)
            out[mask] = target
            changed = True
        if not changed:
            return out


def _adjacent_values(labels: np.ndarray, mask: np.ndarray):
    """Yield label values 4-adjacent to ``mask`` and outside it, per direction."""
    h, w = labels.shape
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        src = (slice(max(0, -dr), h - max(0, dr)), slice(max(0, -dc), w - max(0, dc)))
        dst = (slice(max(0, dr), h + min(0, dr)), slice(max(0, dc), w + min(0, dc)))
        sel = mask[src] & ~mask[dst]
        if sel.any():
            yield labels[dst][sel]


def plan_resize(h: int, w: int, sp_h: int, sp_w: int, d: int) -> tuple[int, int]:
    """Working resolution that yields an (sp_h, sp_w) grid of cells."""
    if sp_h < 2 or sp_w < 2:
        raise ValueError(f"superpixel grid {(sp_h, sp_w)} must be at least 2x2")
    return sp_h * d, sp_w * d


def render_mean_fill(pixels: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Replace each pixel by its superpixel's channel-wise mean color."""
    pixels = np.asarray(pixels, dtype=np.float64)
    labels = np.asarray(labels)
    if pixels.shape[:2] != labels.shape:
        raise ValueError(f"image {pixels.shape[:2]} and labels {labels.shape} disagree")
    flat = labels.reshape(-1)
    nmax = int(flat.max()) + 1
    counts = np.bincount(flat, minlength=nmax).astype(np.float64)
    counts[counts == 0] = 1.0
    out = np.empty_like(pixels)
    for c in range(pixels.shape[2]):
        sums = np.bincount(flat, weights=pixels[:, :, c].reshape(-1), minlength=nmax)
        out[:, :, c] = (sums / counts)[labels]
    return out.astype(np.float32)


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels having a 4-neighbor with a different label."""
    labels = np.asarray(labels)
    b = np.zeros(labels.shape, dtype=bool)
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    b[1:, :] |= labels[1:, :] != labels[:-1, :]
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    b[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    return b


def boundary_overlay(pixels: np.ndarray, labels: np.ndarray, color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Paint superpixel boundary pixels with ``color``."""
    pixels = np.asarray(pixels, dtype=np.float32).copy()
    if pixels.shape[:2] != np.asarray(labels).shape:
        raise ValueError("image and labels disagree in size")
    pixels[boundary_mask(labels)] = np.asarray(color, dtype=np.float32)
    return pixels

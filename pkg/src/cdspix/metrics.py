"""Superpixel quality metrics and the count-sweep benchmark harness.

All metrics take two (H, W) integer label maps: a superpixel labeling and
a ground-truth partition. Boundary pixels are pixels with a 4-neighbor of
a different label; boundary matching uses Chebyshev distance.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .imageio import load_image, load_labels
from .superpixels import boundary_mask

__all__ = [
    "MetricReport",
    "asa",
    "br_bp",
    "ue",
    "co",
    "default_tolerance",
    "evaluate_pair",
    "sweep",
]

CSV_HEADER = "count,asa,br,bp,ue,co"


@dataclass
class MetricReport:
    n_superpixels: float
    asa: float
    br: float
    bp: float
    ue: float
    co: float

    def csv_row(self) -> str:
        return (
            f"{self.n_superpixels:.6f},{self.asa:.6f},{self.br:.6f},"
            f"{self.bp:.6f},{self.ue:.6f},{self.co:.6f}"
        )


def _check_pair(sp: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sp = np.asarray(sp)
    gt = np.asarray(gt)
    if sp.shape != gt.shape or sp.ndim != 2:
        raise ValueError(f"label maps disagree: {sp.shape} vs {gt.shape}")
    return sp, gt


def _overlap_matrix(sp: np.ndarray, gt: np.ndarray) -> np.ndarray:
    ns = int(sp.max()) + 1
    ng = int(gt.max()) + 1
    joint = sp.astype(np.int64).reshape(-1) * ng + gt.astype(np.int64).reshape(-1)
    return np.bincount(joint, minlength=ns * ng).reshape(ns, ng)


def asa(sp: np.ndarray, gt: np.ndarray) -> float:
    """Achievable segmentation accuracy: best-label overlap per superpixel."""
    sp, gt = _check_pair(sp, gt)
    inter = _overlap_matrix(sp, gt)
    return float(inter.max(axis=1).sum() / sp.size)


def ue(sp: np.ndarray, gt: np.ndarray) -> float:
    """Under-segmentation error: per-pair min(inside, leaked) pixel counts."""
    sp, gt = _check_pair(sp, gt)
    inter = _overlap_matrix(sp, gt)
    sizes = inter.sum(axis=1, keepdims=True)
    leak = np.minimum(inter, sizes - inter)
    return float(leak[inter > 0].sum() / sp.size)


def br_bp(sp: np.ndarray, gt: np.ndarray, tol: int = 0) -> tuple[float, float]:
    """Boundary recall and precision within Chebyshev distance ``tol``.

    0/0 conventions: recall is 1 when the ground truth has no boundary,
    precision is 1 when the superpixel map has no boundary.
    """
    sp, gt = _check_pair(sp, gt)
    if tol < 0:
        raise ValueError("tol must be >= 0")
    bs = boundary_mask(sp)
    bg = boundary_mask(gt)
    if tol > 0:
        size = 2 * tol + 1
        near_s = ndimage.maximum_filter(bs.astype(np.uint8), size=size).astype(bool)
        near_g = ndimage.maximum_filter(bg.astype(np.uint8), size=size).astype(bool)
    else:
        near_s, near_g = bs, bg
    n_gt = int(bg.sum())
    n_sp = int(bs.sum())
    br = float((bg & near_s).sum() / n_gt) if n_gt else 1.0
    bp = float((bs & near_g).sum() / n_sp) if n_sp else 1.0
    return br, bp


def co(sp: np.ndarray) -> float:
    """Compactness: size-weighted isoperimetric quotient 4*pi*A/P^2.

    Perimeter counts pixel edges adjacent to a different label or to the
    image border; a full square tiling scores exactly pi/4.
    """
    sp = np.asarray(sp)
    if sp.size == 0:
        raise ValueError("empty labeling")
    same = np.zeros(sp.shape, dtype=np.int32)
    same[1:, :] += (sp[1:, :] == sp[:-1, :]).astype(np.int32)
    same[:-1, :] += (sp[:-1, :] == sp[1:, :]).astype(np.int32)
    same[:, 1:] += (sp[:, 1:] == sp[:, :-1]).astype(np.int32)
    same[:, :-1] += (sp[:, :-1] == sp[:, 1:]).astype(np.int32)
    flat = sp.reshape(-1)
    nmax = int(flat.max()) + 1
    area = np.bincount(flat, minlength=nmax).astype(np.float64)
    perim = np.bincount(flat, weights=(4 - same).reshape(-1), minlength=nmax)
    present = area > 0
    quot = 4.0 * math.pi * area[present] ** 2 / perim[present] ** 2
    return float(quot.sum() / sp.size)


def default_tolerance(h: int, w: int) -> int:
    """Boundary-matching tolerance scaled to the image diagonal."""
    return int(round(0.0025 * math.hypot(h, w)))


def evaluate_pair(sp: np.ndarray, gt: np.ndarray, tol: int | None = None) -> MetricReport:
    sp, gt = _check_pair(sp, gt)
    if tol is None:
        tol = default_tolerance(*sp.shape)
    br, bp = br_bp(sp, gt, tol)
    return MetricReport(
        n_superpixels=float(np.unique(sp).size),
        asa=asa(sp, gt),
        br=br,
        bp=bp,
        ue=ue(sp, gt),
        co=co(sp),
    )


def sweep(
    segment: Callable[[np.ndarray, int], np.ndarray],
    pairs: Sequence[tuple[str, str]],
    counts: Iterable[int],
    tol: int | None = None,
    jobs: int = 1,
) -> tuple[list[MetricReport], list[str]]:
    """Run ``segment(image, count)`` over a dataset for each target count.

    Returns one averaged report per count (reporting the mean *actual*
    post-processing superpixel count) plus a list of per-file errors;
    unreadable inputs are skipped and the run continues.
    """
    counts = list(counts)
    if counts != sorted(counts):
        raise ValueError("sp counts must be ascending")
    loaded: list[tuple[np.ndarray, np.ndarray]] = []
    errors: list[str] = []
    for img_path, gt_path in pairs:
        try:
            loaded.append((load_image(img_path), load_labels(gt_path)))
        except (OSError, ValueError) as e:
            errors.append(f"{img_path}: {e}")
    if not loaded:
        return [], errors

    def one(args):
        image, gt, count = args
        labels = segment(image, count)
        return evaluate_pair(labels, gt, tol)

    rows: list[MetricReport] = []
    for count in counts:
        tasks = [(image, gt, count) for image, gt in loaded]
        if jobs > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=jobs) as ex:
                reports = list(ex.map(one, tasks))
        else:
            reports = [one(t) for t in tasks]
        rows.append(
            MetricReport(
                n_superpixels=float(np.mean([r.n_superpixels for r in reports])),
                asa=float(np.mean([r.asa for r in reports])),
                br=float(np.mean([r.br for r in reports])),
                bp=float(np.mean([r.bp for r in reports])),
                ue=float(np.mean([r.ue for r in reports])),
                co=float(np.mean([r.co for r in reports])),
            )
        )
    return rows, errors

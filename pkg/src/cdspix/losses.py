"""Training objectives: superpixel reconstruction, grid alignment, MI bound.

Association maps are (H, W, 9) or (N, H, W, 9) tensors whose channel
order matches :data:`cdspix.superpixels.NEIGHBOR_OFFSETS`. Pixel
properties travel feature-first, (F, H, W) or (N, F, H, W). All losses
are scalar tensors differentiable through the autodiff core.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import VariationalParams, variational_mean_logvar
from .superpixels import NEIGHBOR_OFFSETS

__all__ = [
    "SEMANTIC_CAPACITY",
    "semantic_one_hot",
    "position_features",
    "compute_centers",
    "reconstruct_properties",
    "superpixel_loss",
    "unfold_grids",
    "fold_grids",
    "grid_kl",
    "alignment_loss",
    "mi_loss",
    "variational_nll",
    "total_loss",
]

SEMANTIC_CAPACITY = 50
CENTER_EPS = 1e-8
PROB_FLOOR = 1e-8
LOG_2PI = float(np.log(2.0 * np.pi))


def _grid_d(grid) -> int:
    return int(getattr(grid, "d", grid))


def semantic_one_hot(labels: np.ndarray, capacity: int = SEMANTIC_CAPACITY, dtype=np.float32) -> np.ndarray:
    """One-hot region encoding with a fixed channel budget.

    Regions are ranked by pixel count (ties by smaller id); regions past
    the budget share the last channel. Accepts (H, W) or (N, H, W).
    """
    labels = np.asarray(labels)
    single = labels.ndim == 2
    lab = labels[None] if single else labels
    n, h, w = lab.shape
    out = np.zeros((n, capacity, h, w), dtype=dtype)
    for i in range(n):
        flat = lab[i].reshape(-1)
        counts = np.bincount(flat)
        present = np.flatnonzero(counts)
        order = present[np.argsort(-counts[present], kind="stable")]
        slot = np.zeros(counts.size, dtype=np.int64)
        for rank, v in enumerate(order):
            slot[v] = min(rank, capacity - 1)
        out[i].reshape(capacity, -1)[slot[flat], np.arange(h * w)] = 1.0
    return out[0] if single else out


def position_features(h: int, w: int, n: int | None = None, dtype=np.float32) -> np.ndarray:
    """(2, H, W) row/col coordinates in pixels, optionally batched."""
    rows = np.broadcast_to(np.arange(h, dtype=dtype)[:, None], (h, w))
    cols = np.broadcast_to(np.arange(w, dtype=dtype)[None, :], (h, w))
    pos = np.stack([rows, cols])
    return pos if n is None else np.broadcast_to(pos[None], (n, 2, h, w)).copy()


def _as_batched_q(q: Tensor) -> tuple[Tensor, bool]:
    if q.ndim == 3:
        return ad.reshape(q, (1, *q.shape)), True
    if q.ndim == 4:
        return q, False
    raise ValueError(f"expected (H,W,9) or (N,H,W,9) association map, got {q.shape}")


def _as_batched_feat(f: Tensor, single: bool) -> Tensor:
    f = f if isinstance(f, Tensor) else Tensor(f)
    return ad.reshape(f, (1, *f.shape)) if single else f


def _cell_layouts(qb: Tensor, fb: Tensor, d: int) -> tuple[Tensor, Tensor, tuple[int, int]]:
    """Rearranged views: q as (N,K,9,d^2), f as (N,K,d^2,F), cells raster-ordered."""
    n, h, w, _ = qb.shape
    if h % d or w % d:
        raise ValueError(f"{h}x{w} not divisible by d={d}")
    kh, kw = h // d, w // d
    q_cell = ad.reshape(
        ad.transpose(ad.reshape(qb, (n, kh, d, kw, d, 9)), (0, 1, 3, 5, 2, 4)),
        (n, kh * kw, 9, d * d),
    )
    f_cell = ad.reshape(
        ad.transpose(ad.reshape(fb, (n, fb.shape[1], kh, d, kw, d)), (0, 2, 4, 3, 5, 1)),
        (n, kh * kw, d * d, fb.shape[1]),
    )
    return q_cell, f_cell, (kh, kw)


def _gather_offsets(grid_maps: Tensor, sign: int) -> Tensor:
    """Sum channel j of (N,9,F,kh,kw) shifted by sign*offset_j over j."""
    total = None
    for j, (dr, dc) in enumerate(NEIGHBOR_OFFSETS):
        piece = ad.shift2d(ad.slice_axis(grid_maps, 1, j, j + 1), sign * dr, sign * dc)
        total = piece if total is None else total + piece
    return ad.reshape(total, (total.shape[0], *total.shape[2:]))


def _centers(q_cell: Tensor, f_cell: Tensor, kh: int, kw: int) -> Tensor:
    """Weighted per-cell property means g of shape (N, F, kh, kw)."""
    n, k, _, nf = f_cell.shape[0], f_cell.shape[1], f_cell.shape[2], f_cell.shape[3]
    cellsum = ad.matmul(q_cell, f_cell)  # (N,K,9,F): per-cell mass-weighted sums
    den_cell = ad.tsum(q_cell, axis=-1)  # (N,K,9)
    cs_grid = ad.transpose(ad.reshape(cellsum, (n, kh, kw, 9, nf)), (0, 3, 4, 1, 2))
    den_grid = ad.transpose(ad.reshape(den_cell, (n, kh, kw, 9, 1)), (0, 3, 4, 1, 2))
    num = _gather_offsets(cs_grid, -1)  # (N,F,kh,kw)
    den = _gather_offsets(den_grid, -1)  # (N,1,kh,kw)
    return num / (den + CENTER_EPS)


def compute_centers(q: Tensor, f: Tensor, grid) -> Tensor:
    """Per-superpixel property centers g(s) = sum f*Q / sum Q over support.

    ``q`` is the association map, ``f`` the pixel properties, and the
    result has shape (F, kh, kw) (batched if the inputs are). Cells whose
    support carries no probability mass come out as zero.
    """
    d = _grid_d(grid)
    qb, single = _as_batched_q(q)
    fb = _as_batched_feat(f, single)
    q_cell, f_cell, (kh, kw) = _cell_layouts(qb, fb, d)
    g = _centers(q_cell, f_cell, kh, kw)
    return ad.reshape(g, g.shape[1:]) if single else g


def reconstruct_properties(q: Tensor, f: Tensor, grid) -> Tensor:
    """Per-pixel property reconstruction f'(p) = sum_s g(s) * Q_s(p)."""
    d = _grid_d(grid)
    qb, single = _as_batched_q(q)
    fb = _as_batched_feat(f, single)
    n, nf = fb.shape[0], fb.shape[1]
    h, w = fb.shape[2], fb.shape[3]
    q_cell, f_cell, (kh, kw) = _cell_layouts(qb, fb, d)
    g = _centers(q_cell, f_cell, kh, kw)
    shifted = [
        ad.reshape(ad.shift2d(g, dr, dc), (n, 1, nf, kh, kw)) for dr, dc in NEIGHBOR_OFFSETS
    ]
    gstack = ad.reshape(
        ad.transpose(ad.concat(shifted, axis=1), (0, 3, 4, 1, 2)), (n, kh * kw, 9, nf)
    )
    recon_cell = ad.matmul(ad.transpose(q_cell, (0, 1, 3, 2)), gstack)  # (N,K,d^2,F)
    recon = ad.reshape(
        ad.transpose(ad.reshape(recon_cell, (n, kh, kw, d, d, nf)), (0, 5, 1, 3, 2, 4)),
        (n, nf, h, w),
    )
    return ad.reshape(recon, recon.shape[1:]) if single else recon


def superpixel_loss(
    q: Tensor,
    f_semantic,
    f_position,
    grid,
    lambda_pos: float = 0.003,
) -> Tensor:
    """Reconstruction distance: semantic cross-entropy + weighted position MSE.

    Cross-entropy uses the clamped reconstructed probabilities, so an
    exact reconstruction scores exactly zero; the position term is the
    mean squared distance in pixel units.
    """
    d = _grid_d(grid)
    qb, single = _as_batched_q(q)
    sem = _as_batched_feat(f_semantic if isinstance(f_semantic, Tensor) else Tensor(f_semantic), single)
    pos = _as_batched_feat(f_position if isinstance(f_position, Tensor) else Tensor(f_position), single)
    r = sem.shape[1]
    f = ad.concat([sem, pos], axis=1)
    recon = reconstruct_properties(qb, f, d)
    recon_sem = ad.slice_axis(recon, 1, 0, r)
    recon_pos = ad.slice_axis(recon, 1, r, r + pos.shape[1])
    ce = -ad.tmean(ad.tsum(sem * ad.log(ad.clamp(recon_sem, PROB_FLOOR, 1.0), eps=0.0), axis=1))
    if lambda_pos == 0.0:
        return ce
    diff = pos - recon_pos
    sq = ad.tmean(ad.tsum(diff * diff, axis=1))
    return ce + lambda_pos * sq


def unfold_grids(x: Tensor, d: int) -> Tensor:
    """Rearrange (..., H, W) into per-cell rows (..., K, d*d), raster order."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    h, w = x.shape[-2:]
    if h % d or w % d:
        raise ValueError(f"{h}x{w} not divisible by d={d}")
    lead = x.shape[:-2]
    nl = len(lead)
    kh, kw = h // d, w // d
    r = ad.reshape(x, (*lead, kh, d, kw, d))
    t = ad.transpose(r, (*range(nl), nl, nl + 2, nl + 1, nl + 3))
    return ad.reshape(t, (*lead, kh * kw, d * d))


def fold_grids(z: Tensor, h: int, w: int, d: int) -> Tensor:
    """Inverse of :func:`unfold_grids`."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    lead = z.shape[:-2]
    nl = len(lead)
    kh, kw = h // d, w // d
    r = ad.reshape(z, (*lead, kh, kw, d, d))
    t = ad.transpose(r, (*range(nl), nl, nl + 2, nl + 1, nl + 3))
    return ad.reshape(t, (*lead, h, w))


def grid_kl(z_ref: Tensor, z_other: Tensor) -> Tensor:
    """Mean row-wise KL(softmax(z_ref) || softmax(z_other)).

    Rows live on the last axis; the mean runs over all leading axes. This
    is the kernel the alignment loss applies to unfolded grid features.
    """
    z_ref = z_ref if isinstance(z_ref, Tensor) else Tensor(z_ref)
    z_other = z_other if isinstance(z_other, Tensor) else Tensor(z_other)
    p = ad.softmax(z_ref, axis=-1)
    qq = ad.softmax(z_other, axis=-1)
    kl = ad.tsum(p * (ad.log(p) - ad.log(qq)), axis=-1)
    return ad.tmean(kl)


def alignment_loss(c_i: Tensor, c_a: Tensor, d: int) -> Tensor:
    """Per-cell spatial-pattern KL between the two modalities' content.

    Channel-mean both feature stacks, unfold into (K, d*d) grid rows,
    softmax each row, and average KL(image row || auxiliary row) over cells.
    """
    c_i = c_i if isinstance(c_i, Tensor) else Tensor(c_i)
    c_a = c_a if isinstance(c_a, Tensor) else Tensor(c_a)
    if c_i.shape != c_a.shape:
        raise ValueError(f"content shapes disagree: {c_i.shape} vs {c_a.shape}")
    z_i = unfold_grids(ad.channel_mean(c_i), d)
    z_a = unfold_grids(ad.channel_mean(c_a), d)
    return grid_kl(z_i, z_a)


def mi_loss(v_i: Tensor, v_a: Tensor, vp: VariationalParams) -> Tensor:
    """Sample estimate of the contrastive MI upper bound on the style pair.

    (1/N^2) sum_ij [log h(v_i_i | v_a_i) - log h(v_i_j | v_a_i)] with the
    density network's weights frozen: gradients reach only the style
    vectors.
    """
    v_i = v_i if isinstance(v_i, Tensor) else Tensor(v_i)
    v_a = v_a if isinstance(v_a, Tensor) else Tensor(v_a)
    if v_i.ndim == 1:
        v_i = ad.reshape(v_i, (1, *v_i.shape))
        v_a = ad.reshape(v_a, (1, *v_a.shape))
    if v_i.shape != v_a.shape:
        raise ValueError(f"style batches disagree: {v_i.shape} vs {v_a.shape}")
    n, c = v_i.shape
    frozen = vp.detached()
    mu, logvar = variational_mean_logvar(v_a, frozen)
    var = ad.exp(logvar)
    diag = (v_i - mu) * (v_i - mu)
    positive = ad.tsum(-0.5 * LOG_2PI + (-0.5) * logvar - diag / (2.0 * var), axis=-1)
    mu_e = ad.reshape(mu, (n, 1, c))
    lv_e = ad.reshape(logvar, (n, 1, c))
    var_e = ad.reshape(var, (n, 1, c))
    vi_e = ad.reshape(v_i, (1, n, c))
    cross = (vi_e - mu_e) * (vi_e - mu_e)
    negative = ad.tsum(-0.5 * LOG_2PI + (-0.5) * lv_e - cross / (2.0 * var_e), axis=-1)
    return ad.tmean(positive) - ad.tmean(negative)


def variational_nll(v_i: Tensor, v_a: Tensor, vp: VariationalParams) -> Tensor:
    """Mean negative log-likelihood for fitting the density network.

    The style inputs must be detached; gradients flow only to ``vp``.
    """
    for t in (v_i, v_a):
        if isinstance(t, Tensor) and t._parents:
            raise ValueError("style inputs to variational_nll must be detached")
    v_i = v_i if isinstance(v_i, Tensor) else Tensor(v_i)
    v_a = v_a if isinstance(v_a, Tensor) else Tensor(v_a)
    if v_i.ndim == 1:
        v_i = ad.reshape(v_i, (1, *v_i.shape))
        v_a = ad.reshape(v_a, (1, *v_a.shape))
    mu, logvar = variational_mean_logvar(v_a, vp)
    var = ad.exp(logvar)
    diag = (v_i - mu) * (v_i - mu)
    ll = ad.tsum(-0.5 * LOG_2PI + (-0.5) * logvar - diag / (2.0 * var), axis=-1)
    return -ad.tmean(ll)


def total_loss(
    l_align: Tensor,
    l_mi: Tensor,
    l_sp_i: Tensor,
    l_sp_a: Tensor,
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0),
) -> Tensor:
    """Weighted sum of the four training objectives (plain sum by default)."""
    wa, wm, wi, waa = weights
    return wa * l_align + wm * l_mi + wi * l_sp_i + waa * l_sp_a

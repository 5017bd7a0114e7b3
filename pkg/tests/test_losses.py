"""Training objectives against hand-derived values and brute-force oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdspix import autodiff as ad
from cdspix import losses
from cdspix import model as md
from cdspix.autodiff import Tensor
from cdspix.superpixels import NEIGHBOR_OFFSETS, grid_index_map


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr), requires_grad=requires_grad, dtype=np.float64)


def random_q(rng, h, w, d):
    """A valid association map: random positive mass on valid channels."""
    _, valid = grid_index_map(h, w, d)
    q = rng.random((h, w, 9)) * valid
    return q / q.sum(axis=2, keepdims=True)


def brute_centers_recon(q, f, d):
    """Loop transcription of the center/reconstruction definitions."""
    h, w, _ = q.shape
    nf = f.shape[0]
    kh, kw = h // d, w // d
    ids, valid = grid_index_map(h, w, d)
    num = np.zeros((nf, kh * kw))
    den = np.zeros(kh * kw)
    for r in range(h):
        for c in range(w):
            for j in range(9):
                if valid[r, c, j]:
                    s = ids[r, c, j]
                    num[:, s] += f[:, r, c] * q[r, c, j]
                    den[s] += q[r, c, j]
    g = num / (den + 1e-8)
    recon = np.zeros((nf, h, w))
    for r in range(h):
        for c in range(w):
            for j in range(9):
                if valid[r, c, j]:
                    recon[:, r, c] += g[:, ids[r, c, j]] * q[r, c, j]
    return g.reshape(nf, kh, kw), recon


def brute_superpixel_loss(q, sem, pos, d, lambda_pos):
    _, recon = brute_centers_recon(q, np.concatenate([sem, pos]), d)
    rs = recon[: sem.shape[0]]
    rp = recon[sem.shape[0] :]
    ce = -(sem * np.log(np.clip(rs, 1e-8, 1.0))).sum(axis=0).mean()
    err = ((pos - rp) ** 2).sum(axis=0).mean()
    return ce + lambda_pos * err


# -- compute_centers ---------------------------------------------------------------


def test_centers_hard_assignment_is_cell_mean(rng):
    h = w = 4
    d = 2
    q = np.zeros((h, w, 9))
    q[:, :, 4] = 1.0  # every pixel in its own cell
    f = rng.random((3, h, w))
    g = losses.compute_centers(t64(q), t64(f), d).data
    for cr in range(2):
        for cc in range(2):
            want = f[:, 2 * cr : 2 * cr + 2, 2 * cc : 2 * cc + 2].mean(axis=(1, 2))
            np.testing.assert_allclose(g[:, cr, cc], want, atol=1e-7)


def test_centers_empty_support_is_zero():
    q = np.zeros((2, 2, 9))
    q[:, :, 4] = 1.0
    q[1, 1, 4] = 0.0
    q[1, 1, 3] = 1.0  # mass moved west; own cell keeps it though (d=1 grid)
    d = 1
    f = np.ones((1, 2, 2))
    g = losses.compute_centers(t64(q), t64(f), d).data
    # cell (1,1) now holds no mass at all
    assert g[0, 1, 1] == 0.0


def test_centers_weighted_mean():
    q = np.zeros((1, 2, 9))
    q[0, 0, 4] = 0.25
    q[0, 1, 3] = 0.75
    g = losses.compute_centers(t64(q), t64([[[0.0, 1.0]]]), 1).data
    assert g[0, 0, 0] == pytest.approx(0.75, abs=1e-7)


def test_centers_match_brute_force(rng):
    q = random_q(rng, 4, 4, 2)
    f = rng.random((5, 4, 4))
    gb, rb = brute_centers_recon(q, f, 2)
    gv = losses.compute_centers(t64(q), t64(f), 2).data
    rv = losses.reconstruct_properties(t64(q), t64(f), 2).data
    np.testing.assert_allclose(gv, gb, atol=1e-10)
    np.testing.assert_allclose(rv, rb, atol=1e-10)


# -- superpixel_loss ---------------------------------------------------------------


def test_superpixel_loss_zero_when_each_pixel_own_superpixel():
    h = w = 2
    q = np.zeros((h, w, 9))
    q[:, :, 4] = 1.0
    sem = np.eye(4).reshape(2, 2, 4).transpose(2, 0, 1)
    pos = losses.position_features(h, w, dtype=np.float64)
    loss = losses.superpixel_loss(t64(q), t64(sem), t64(pos), 1, lambda_pos=0.003)
    assert abs(loss.item()) < 1e-6


def test_superpixel_loss_merged_pair_cross_entropy():
    q = np.zeros((1, 2, 9))
    q[0, 0, 4] = 1.0
    q[0, 1, 3] = 1.0  # both pixels fully assigned to cell (0,0)
    sem = np.zeros((2, 1, 2))
    sem[0, 0, 0] = 1.0
    sem[1, 0, 1] = 1.0
    pos = losses.position_features(1, 2, dtype=np.float64)
    loss = losses.superpixel_loss(t64(q), t64(sem), t64(pos), 1, lambda_pos=0.0)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-6)


def test_superpixel_loss_matches_brute_force(rng):
    for _ in range(5):
        q = random_q(rng, 4, 4, 2)
        labels = rng.integers(0, 3, (4, 4))
        sem = losses.semantic_one_hot(labels, 3, dtype=np.float64)
        pos = losses.position_features(4, 4, dtype=np.float64)
        want = brute_superpixel_loss(q, sem, pos, 2, 0.003)
        got = losses.superpixel_loss(t64(q), t64(sem), t64(pos), 2, 0.003).item()
        assert got == pytest.approx(want, abs=1e-10)


def test_superpixel_loss_decreases_toward_label_consistency():
    # two-region 2x2 image, d=1: moving Q mass toward the label-consistent
    # cell strictly lowers the loss (coarse sweep over the mixing weight)
    sem = np.zeros((2, 2, 2))
    sem[0, :, 0] = 1.0  # left column region 0
    sem[1, :, 1] = 1.0
    pos = losses.position_features(2, 2, dtype=np.float64)
    vals = []
    for t in np.linspace(0.0, 0.45, 10):
        q = np.zeros((2, 2, 9))
        q[:, :, 4] = 1.0 - t
        q[:, 0, 5] = t  # left pixels leak mass east (towards the other region)
        q[:, 1, 3] = t
        vals.append(losses.superpixel_loss(t64(q), t64(sem), t64(pos), 1, 0.0).item())
    assert all(vals[i] < vals[i + 1] for i in range(len(vals) - 1))


def test_superpixel_loss_nonnegative(rng):
    for _ in range(20):
        q = random_q(rng, 4, 4, 2)
        labels = rng.integers(0, 4, (4, 4))
        sem = losses.semantic_one_hot(labels, 4, dtype=np.float64)
        pos = losses.position_features(4, 4, dtype=np.float64)
        assert losses.superpixel_loss(t64(q), t64(sem), t64(pos), 2, 0.003).item() >= 0.0


def test_superpixel_loss_gradient(rng):
    q0 = t64(rng.standard_normal((4, 4, 9)), requires_grad=True)
    labels = rng.integers(0, 3, (4, 4))
    sem = t64(losses.semantic_one_hot(labels, 3, dtype=np.float64))
    pos = t64(losses.position_features(4, 4, dtype=np.float64))
    _, valid = grid_index_map(4, 4, 2)

    def f(t):
        return losses.superpixel_loss(ad.softmax(t, axis=2, mask=valid), sem, pos, 2, 0.01)

    assert ad.grad_check(f, q0, 1e-5) < 1e-4


# -- unfold / fold ------------------------------------------------------------------


def test_unfold_4x4_d2_rows():
    z = losses.unfold_grids(t64(np.arange(16.0).reshape(4, 4)), 2)
    assert z.shape == (4, 4)
    np.testing.assert_array_equal(z.data[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(z.data[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(z.data[3], [10, 11, 14, 15])


def test_unfold_full_image_is_flatten():
    x = np.arange(16.0).reshape(4, 4)
    z = losses.unfold_grids(t64(x), 4)
    np.testing.assert_array_equal(z.data, x.reshape(1, 16))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1_000), st.sampled_from([1, 2, 4]))
def test_fold_unfold_roundtrip(seed, d):
    x = np.random.default_rng(seed).random((8, 8))
    z = losses.unfold_grids(Tensor(x), d)
    back = losses.fold_grids(z, 8, 8, d)
    np.testing.assert_array_equal(back.data, x)


def test_unfold_indivisible_errors():
    with pytest.raises(ValueError, match="not divisible"):
        losses.unfold_grids(t64(np.zeros((5, 4))), 2)


# -- alignment loss ----------------------------------------------------------------


def test_alignment_zero_on_identical(rng):
    c = t64(rng.standard_normal((3, 4, 4)))
    other = t64(c.data.copy())
    assert losses.alignment_loss(c, other, 2).item() == 0.0


def test_grid_kl_hand_value():
    # softmax rows (0,0) -> (1/2,1/2) and (ln3,0) -> (3/4,1/4);
    # KL = 0.5*ln(4/3)
    got = losses.grid_kl(t64([[0.0, 0.0]]), t64([[math.log(3.0), 0.0]])).item()
    assert got == pytest.approx(0.5 * math.log(4.0 / 3.0), abs=1e-6)


def test_alignment_loss_brute_force(rng):
    c_i = rng.standard_normal((3, 4, 4))
    c_a = rng.standard_normal((3, 4, 4))
    d = 2

    def brute(ci, ca):
        mi = ci.mean(axis=0)
        ma = ca.mean(axis=0)
        total = 0.0
        for cr in range(2):
            for cc in range(2):
                zi = mi[2 * cr : 2 * cr + 2, 2 * cc : 2 * cc + 2].reshape(-1)
                za = ma[2 * cr : 2 * cr + 2, 2 * cc : 2 * cc + 2].reshape(-1)
                p = np.exp(zi - zi.max())
                p /= p.sum()
                q = np.exp(za - za.max())
                q /= q.sum()
                total += (p * (np.log(p + 1e-8) - np.log(q + 1e-8))).sum()
        return total / 4.0

    got = losses.alignment_loss(t64(c_i), t64(c_a), d).item()
    assert got == pytest.approx(brute(c_i, c_a), abs=1e-9)


def test_alignment_nonnegative_many_trials(rng):
    # Gibbs inequality on softmax rows, emphatically sampled
    z_i = rng.standard_normal((10_000, 4))
    z_a = rng.standard_normal((10_000, 4))
    kl_each = []
    for chunk in range(0, 10_000, 2_000):
        v = losses.grid_kl(t64(z_i[chunk : chunk + 2000]), t64(z_a[chunk : chunk + 2000])).item()
        kl_each.append(v)
    assert all(v >= 0.0 for v in kl_each)


def test_alignment_asymmetric(rng):
    c_i = t64(rng.standard_normal((3, 4, 4)))
    c_a = t64(rng.standard_normal((3, 4, 4)))
    ab = losses.alignment_loss(c_i, c_a, 2).item()
    ba = losses.alignment_loss(c_a, c_i, 2).item()
    assert ab != pytest.approx(ba, abs=1e-12)


def test_alignment_shape_mismatch():
    with pytest.raises(ValueError, match="disagree"):
        losses.alignment_loss(t64(np.zeros((2, 4, 4))), t64(np.zeros((2, 4, 6))), 2)


# -- MI loss -----------------------------------------------------------------------


def _identity_gaussian_vp():
    """Density net realizing mu = v_cond, log-variance = 0 (unit Gaussian)."""
    w1 = t64(np.array([[1.0], [-1.0]]))
    b1 = t64(np.zeros(2))
    w2 = t64(np.array([[1.0, -1.0], [0.0, 0.0]]))
    b2 = t64(np.zeros(2))
    return md.VariationalParams(w1, b1, w2, b2)


def test_mi_loss_single_sample_zero(rng):
    vp = _identity_gaussian_vp()
    assert losses.mi_loss(t64([[0.7]]), t64([[0.2]]), vp).item() == 0.0


def test_mi_loss_hand_value():
    vp = _identity_gaussian_vp()
    v = t64([[0.0], [2.0]])
    assert losses.mi_loss(v, t64(v.data.copy()), vp).item() == pytest.approx(1.0, abs=1e-6)


def test_mi_loss_joint_permutation_invariance(rng):
    cfg = md.ModelConfig(channels=4, d=4)
    vp = md.init_params(3, cfg, dtype=np.float64).var
    v_i = rng.standard_normal((5, 4))
    v_a = rng.standard_normal((5, 4))
    base = losses.mi_loss(t64(v_i), t64(v_a), vp).item()
    perm = rng.permutation(5)
    shuffled = losses.mi_loss(t64(v_i[perm]), t64(v_a[perm]), vp).item()
    assert shuffled == pytest.approx(base, abs=1e-9)


def test_mi_loss_freezes_density_net(rng):
    cfg = md.ModelConfig(channels=4, d=4)
    vp = md.init_params(3, cfg, dtype=np.float64).var
    for t in (vp.w1, vp.b1, vp.w2, vp.b2):
        t.requires_grad = True
        t.zero_grad()
    v_i = t64(rng.standard_normal((3, 4)), requires_grad=True)
    v_a = t64(rng.standard_normal((3, 4)), requires_grad=True)
    losses.mi_loss(v_i, v_a, vp).backward()
    assert v_i.grad is not None and v_a.grad is not None
    for t in (vp.w1, vp.b1, vp.w2, vp.b2):
        assert t.grad is None


def test_mi_loss_batch_mismatch(rng):
    vp = _identity_gaussian_vp()
    with pytest.raises(ValueError, match="disagree"):
        losses.mi_loss(t64(np.zeros((2, 1))), t64(np.zeros((3, 1))), vp)


# -- variational likelihood / NLL ---------------------------------------------------


def test_variational_loglik_perfect_prediction():
    c = 3
    eye = np.eye(c)
    w1 = t64(np.vstack([eye, -eye]))
    b1 = t64(np.zeros(2 * c))
    w2 = t64(np.hstack([np.vstack([eye, np.zeros((c, c))]), np.vstack([-eye, np.zeros((c, c))])]))
    b2 = t64(np.zeros(2 * c))
    vp = md.VariationalParams(w1, b1, w2, b2)
    v = t64(np.random.default_rng(0).standard_normal(c))
    ll = md.variational_loglik(v, t64(v.data.copy()), vp)
    assert ll.item() == pytest.approx(-(c / 2) * math.log(2 * math.pi), abs=1e-9)
    nll = losses.variational_nll(t64(v.data.copy()), t64(v.data.copy()), vp)
    assert nll.item() == pytest.approx((c / 2) * math.log(2 * math.pi), abs=1e-9)


def test_variational_loglik_monotone_in_distance():
    vp = _identity_gaussian_vp()
    base = t64([0.5])
    vals = [md.variational_loglik(t64([0.5 + delta]), base, vp).item() for delta in (0.0, 0.5, 1.0, 2.0)]
    assert all(vals[i] > vals[i + 1] for i in range(len(vals) - 1))


def test_variational_loglik_gradient_wrt_params(rng):
    cfg = md.ModelConfig(channels=4, d=4)
    vp = md.init_params(9, cfg, dtype=np.float64).var
    v_i = t64(rng.standard_normal(4))
    v_a = t64(rng.standard_normal(4))
    for t in (vp.w1, vp.b1, vp.w2, vp.b2):
        assert ad.grad_check(lambda _: md.variational_loglik(v_i, v_a, vp), t, 1e-5) < 1e-4


def test_variational_nll_requires_detached(rng):
    vp = _identity_gaussian_vp()
    x = t64([[1.0]], requires_grad=True)
    attached = x * 2.0
    with pytest.raises(ValueError, match="detached"):
        losses.variational_nll(attached, t64([[1.0]]), vp)


def test_variational_nll_optimization_decreases(rng):
    # fitting the density net on correlated pairs lowers the NLL
    from cdspix.training import AdamState, adam_step

    cfg = md.ModelConfig(channels=4, d=4)
    params = md.init_params(42, cfg, dtype=np.float64)
    vp = params.var
    state = AdamState()
    v_a = rng.standard_normal((16, 4))
    v_i = 0.8 * v_a + 0.1 * rng.standard_normal((16, 4))
    tensors = {"w1": vp.w1, "b1": vp.b1, "w2": vp.w2, "b2": vp.b2}
    first = losses.variational_nll(t64(v_i), t64(v_a), vp).item()
    for _ in range(500):
        for t in tensors.values():
            t.zero_grad()
        loss = losses.variational_nll(t64(v_i), t64(v_a), vp)
        loss.backward()
        adam_step(tensors, state, 5e-3)
    last = losses.variational_nll(t64(v_i), t64(v_a), vp).item()
    assert last < first


def test_variational_nll_no_gradient_to_main(rng):
    vp = _identity_gaussian_vp()
    v_i = t64(rng.standard_normal((2, 1)))
    v_a = t64(rng.standard_normal((2, 1)))
    loss = losses.variational_nll(v_i, v_a, vp)
    loss.backward()
    assert v_i.grad is None and v_a.grad is None


# -- total loss --------------------------------------------------------------------


def test_total_loss_zero_and_plain_sum():
    zero = t64(0.0)
    assert losses.total_loss(zero, zero, zero, zero).item() == 0.0
    parts = [t64(v) for v in (0.5, -0.25, 1.5, 2.0)]
    assert losses.total_loss(*parts).item() == pytest.approx(3.75)
    assert losses.total_loss(*parts, weights=(1, 1, 1, 1)).item() == pytest.approx(3.75)


def test_total_loss_weight_isolation():
    parts = [t64(v, requires_grad=True) for v in (0.5, -0.25, 1.5, 2.0)]
    for hot in range(4):
        for t in parts:
            t.zero_grad()
        weights = tuple(1.0 if i == hot else 0.0 for i in range(4))
        losses.total_loss(*parts, weights=weights).backward()
        for i, t in enumerate(parts):
            if i == hot:
                assert t.grad is not None and t.grad.reshape(()) == 1.0
            else:
                assert t.grad is None or t.grad.reshape(()) == 0.0


# -- one-hot / positions --------------------------------------------------------------


def test_semantic_one_hot_basic():
    labels = np.array([[0, 1], [2, 2]])
    hot = losses.semantic_one_hot(labels, capacity=4)
    assert hot.shape == (4, 2, 2)
    np.testing.assert_array_equal(hot.sum(axis=0), 1.0)
    # region 2 is largest (2 px) -> rank 0
    assert hot[0, 1, 0] == 1.0 and hot[0, 1, 1] == 1.0


def test_semantic_one_hot_overflow_merges():
    labels = np.arange(9).reshape(3, 3)
    hot = losses.semantic_one_hot(labels, capacity=4)
    assert hot.shape == (4, 3, 3)
    np.testing.assert_array_equal(hot.sum(axis=0), 1.0)
    assert hot[3].sum() == 6  # 9 regions, 3 keep own slots, 6 share the last


def test_position_features_values():
    pos = losses.position_features(3, 2)
    np.testing.assert_array_equal(pos[0], [[0, 0], [1, 1], [2, 2]])
    np.testing.assert_array_equal(pos[1], [[0, 1], [0, 1], [0, 1]])

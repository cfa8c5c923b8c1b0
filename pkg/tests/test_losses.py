import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heapgroup import diffcore as dc
from heapgroup.head import HeadConfig, forward, init_head
from heapgroup.ingest import SyntheticSpec, generate_synthetic
from heapgroup.losses import (
    LossConfig,
    assignment_affinity,
    entropy_term,
    image_fg_bg,
    inter_loss,
    intra_loss,
    modularity_term,
    neg_loss,
    patch_affinity,
    ranking_weights,
    region_fg_bg,
    total_loss,
)

EPS = 1e-6


def loop_modularity(A, delta):
    """Double-loop evaluation of -(1/2m) sum_ij (A_ij - k_i k_j / 2m) delta_ij."""
    n = len(A)
    k = [sum(A[i][j] for j in range(n)) for i in range(n)]
    two_m = sum(k)
    if two_m < 1e-9:
        return 0.0
    s = 0.0
    for i in range(n):
        for j in range(n):
            s += (A[i][j] - k[i] * k[j] / two_m) * delta[i][j]
    return -s / two_m


def onehot(labels, m):
    return np.eye(m)[labels]


def loop_cos(u, v):
    nu, nv = math.sqrt(sum(x * x for x in u)), math.sqrt(sum(x * x for x in v))
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def loop_inter(X, alpha, eps=EPS):
    """Direct recomputation of the rank-weighted inter-image term."""
    R = len(X)
    S = [[max(0.0, loop_cos(X[i], X[j])) for j in range(R)] for i in range(R)]
    total = 0.0
    for i in range(R):
        others = sorted((j for j in range(R) if j != i), key=lambda j: (-S[i][j], j))
        for rank, j in enumerate(others):
            total += math.exp(-alpha * rank) * math.log(min(max(S[i][j], eps), 1.0))
    return -total / (R * (R - 1))


# ---------------------------------------------------------------- affinities


def test_patch_affinity_examples():
    assert np.array_equal(patch_affinity([[1.0, 0.0], [0.0, 1.0]]), np.zeros((2, 2)))
    assert np.array_equal(patch_affinity([[1.0, 0.0], [1.0, 0.0]]), [[0.0, 1.0], [1.0, 0.0]])
    assert np.array_equal(patch_affinity([[1.0, 0.0], [-1.0, 0.0]]), np.zeros((2, 2)))


def test_assignment_affinity_examples():
    assert np.allclose(assignment_affinity(onehot([0, 0], 2)).data, 1.0)
    assert np.allclose(assignment_affinity(onehot([0, 1], 2)).data, np.eye(2))
    d = assignment_affinity([[0.5, 0.5], [1.0, 0.0]]).data
    assert d[0, 1] == pytest.approx(math.sqrt(0.5), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_affinity_properties(n, seed):
    rng = np.random.default_rng(seed)
    A = patch_affinity(rng.normal(size=(n, 4)))
    assert np.array_equal(A, A.T)
    assert np.all(np.diag(A) == 0)
    assert np.all((A >= 0) & (A <= 1 + 1e-12))
    Z = dc.row_softmax(rng.normal(size=(n, 3))).data
    d = assignment_affinity(Z).data
    assert np.all((d >= -1e-12) & (d <= 1 + 1e-12))
    assert np.allclose(np.diag(d), 1.0)


# ---------------------------------------------------------------- modularity


def test_two_edge_graph_hand_sum():
    A = np.zeros((4, 4))
    A[0, 1] = A[1, 0] = A[2, 3] = A[3, 2] = 1.0
    delta = assignment_affinity(onehot([0, 0, 1, 1], 2))
    # 2m = 4, k = 1 each; the 8 same-group terms are (A_ij - 1/4) and the rest vanish
    hand = -(1 / 4) * (4 * (1 - 0.25) + 4 * (0 - 0.25))
    assert hand == -0.5
    assert modularity_term(A, delta).item() == pytest.approx(-0.5, abs=1e-15)
    single = modularity_term(A, assignment_affinity(onehot([0, 0, 0, 0], 2))).item()
    assert modularity_term(A, delta).item() < single


def test_modularity_zero_for_empty_graph():
    assert modularity_term(np.zeros((3, 3)), np.eye(3)).item() == 0.0


@pytest.mark.parametrize("c", [0.5, 2.0])
def test_modularity_scale_invariance(c):
    rng = np.random.default_rng(0)
    A = patch_affinity(rng.normal(size=(7, 3)))
    delta = assignment_affinity(dc.row_softmax(rng.normal(size=(7, 3))))
    assert abs(modularity_term(c * A, delta).item() - modularity_term(A, delta).item()) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_modularity_matches_double_loop(n, seed):
    rng = np.random.default_rng(seed)
    A = np.triu(rng.integers(0, 2, (n, n)), 1).astype(float)
    A = A + A.T
    Z = dc.row_softmax(rng.normal(size=(n, 3)) * 2)
    delta = assignment_affinity(Z)
    assert abs(modularity_term(A, delta).item() - loop_modularity(A, delta.data)) < 1e-12


# ------------------------------------------------------------------- entropy


def test_entropy_uniform_is_zero():
    assert entropy_term(np.full((2, 2), 0.5)).item() == pytest.approx(0.0, abs=1e-15)


def test_entropy_all_mass_on_one_group():
    Z = np.array([[1.0, 0.0], [1.0, 0.0]])
    lam = 0.7
    val = intra_loss(np.zeros((2, 2)), Z, assignment_affinity(Z), lam).item()
    assert val == pytest.approx(lam * math.log(2), abs=1e-12)


def test_entropy_balanced_below_unbalanced():
    balanced = entropy_term(onehot([0, 0, 1, 1], 2)).item()
    unbalanced = entropy_term(onehot([0, 0, 0, 1], 2)).item()
    assert balanced < unbalanced
    assert balanced == pytest.approx(2 * math.log(2), abs=1e-12)


def test_intra_loss_flag_drops_entropy():
    Z = onehot([0, 0], 2)
    assert intra_loss(np.zeros((2, 2)), Z, assignment_affinity(Z), 1.0, use_entropy=False).item() == 0.0


# ------------------------------------------------------------ fg/bg contrast


def test_image_fg_bg_examples():
    G = np.array([[1.0, 2.0], [3.0, -1.0]])
    ff, fb = image_fg_bg([[1.0], [0.0]], G)
    assert np.array_equal(ff.data[0], G[0]) and np.array_equal(fb.data[0], G[1])
    ff, fb = image_fg_bg([[0.5], [0.5]], G)
    assert np.allclose(ff.data, fb.data) and np.allclose(ff.data[0], G.mean(axis=0))


def test_image_fg_bg_loop_oracle():
    rng = np.random.default_rng(2)
    H, G = rng.random((3, 1)), rng.normal(size=(3, 2))
    ff, fb = image_fg_bg(H, G)
    for d in range(2):
        assert abs(ff.data[0, d] - sum(H[j, 0] * G[j, d] for j in range(3))) < 1e-12
        assert abs(fb.data[0, d] - sum((1 - H[j, 0]) * G[j, d] for j in range(3))) < 1e-12


def test_neg_loss_examples():
    assert neg_loss([[[1.0, 0.0]]], [[[0.0, 1.0]]]).item() == pytest.approx(0.0, abs=1e-15)
    ff = [[[1.0, 2.0]], [[1.0, 2.0]]]
    fb = [[[-1.0, -2.0]], [[-2.0, -4.0]]]
    assert neg_loss(ff, fb).item() == pytest.approx(-math.log(2), abs=1e-12)
    same = neg_loss([[[1.0, 1.0]]], [[[2.0, 2.0]]], EPS).item()
    assert math.isfinite(same) and same == pytest.approx(-math.log(EPS), rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000))
def test_neg_loss_lower_bound(n, seed):
    rng = np.random.default_rng(seed)
    ff = [rng.normal(size=(1, 3)) for _ in range(n)]
    fb = [rng.normal(size=(1, 3)) for _ in range(n)]
    val = neg_loss(ff, fb).item()
    assert val >= -math.log(2) - 1e-12 and math.isfinite(val)


def test_region_fg_bg_examples_and_oracle():
    G = np.array([[1.0, 2.0], [4.0, -2.0]])
    gf, gb = region_fg_bg([[1.0], [0.5]], G)
    assert np.array_equal(gf.data[0], G[0]) and np.array_equal(gb.data[0], [0.0, 0.0])
    assert np.array_equal(gf.data[1], G[1] / 2) and np.array_equal(gb.data[1], G[1] / 2)
    rng = np.random.default_rng(1)
    H, G = rng.random((4, 1)), rng.normal(size=(4, 3))
    gf, gb = region_fg_bg(H, G)
    for i in range(4):
        for d in range(3):
            assert abs(gf.data[i, d] - H[i, 0] * G[i, d]) < 1e-12
            assert abs(gb.data[i, d] - (1 - H[i, 0]) * G[i, d]) < 1e-12


# ------------------------------------------------------------------- ranking


def test_ranking_weights_distinct():
    S = np.array([[1.0, 0.9, 0.2, 0.5], [0.9, 1, 0, 0], [0.2, 0, 1, 0], [0.5, 0, 0, 1]])
    W = ranking_weights(S, 0.1)
    assert W[0, 0] == 0
    assert W[0, 1] == 1.0
    assert W[0, 3] == pytest.approx(math.exp(-0.1)) and W[0, 2] == pytest.approx(math.exp(-0.2))
    assert W[0, 3] == pytest.approx(0.9048, abs=1e-4) and W[0, 2] == pytest.approx(0.8187, abs=1e-4)


def test_ranking_tie_break_by_index():
    S = np.array([[1.0, 0.4, 0.4], [0.4, 1.0, 0.1], [0.4, 0.1, 1.0]])
    W = ranking_weights(S, 0.1)
    assert W[0, 1] == 1.0 and W[0, 2] == pytest.approx(math.exp(-0.1))


def test_default_alpha():
    assert LossConfig().alpha == 0.1


# ------------------------------------------------------------------ inter


def test_inter_identical_regions_is_zero():
    G = np.tile([[1.0, 2.0, 0.5]], (4, 1))
    l_fg, _ = inter_loss(G, G)
    assert l_fg.item() == pytest.approx(0.0, abs=1e-15)


def test_inter_two_orthogonal_regions():
    G = np.eye(2)
    l_fg, l_bg = inter_loss(G, G, 0.1, EPS)
    assert l_fg.item() == pytest.approx(-math.log(EPS), rel=1e-12)


def test_inter_needs_two_regions(caplog):
    with caplog.at_level("WARNING"):
        l_fg, l_bg = inter_loss(np.ones((1, 3)), np.ones((1, 3)))
    assert l_fg.item() == 0.0 and l_bg.item() == 0.0
    assert "at least two" in caplog.text


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000), st.sampled_from([0.05, 0.1, 0.5]))
def test_inter_matches_loop(R, seed, alpha):
    G = np.random.default_rng(seed).normal(size=(R, 3))
    l_fg, _ = inter_loss(G, G, alpha)
    assert abs(l_fg.item() - loop_inter(G.tolist(), alpha)) < 1e-12


def _outputs(images, seed=0, M=4):
    rng = np.random.default_rng(seed)
    named = init_head(M, images[0].dim, 2, seed).named()
    from heapgroup.head import HeadParams

    params = HeadParams.from_named({k: v.data + rng.normal(0, 0.3, v.shape) for k, v in named.items()})
    return forward(images, params, HeadConfig(M=M))


def test_duplicated_batch_against_recomputation():
    data = generate_synthetic(SyntheticSpec(n_images=2))
    imgs = data.features.images
    for batch in (imgs, imgs + imgs):
        outs = _outputs(batch)
        _, report = total_loss(outs, LossConfig())
        rows = []
        for o in outs:
            for r in o.occupied:
                rows.append(o.h_values[r] * o.G.data[r])
        assert abs(report.l_inter_fg - loop_inter(rows, 0.1)) < 1e-9


# ------------------------------------------------------------------- total


def test_total_is_sum_of_components():
    data = generate_synthetic(SyntheticSpec(n_images=3))
    outs = _outputs(data.features.images, 1)
    _, r = total_loss(outs, LossConfig())
    assert abs(r.total - (r.l_intra + r.l_neg + r.l_inter_fg + r.l_inter_bg)) < 1e-12
    assert len(r.modularity) == 3


def test_flags_and_zero_total():
    data = generate_synthetic(SyntheticSpec(n_images=2))
    outs = _outputs(data.features.images, 2)
    off = LossConfig(use_intra=False, use_entropy=False, use_neg=False, use_inter=False)
    loss, r = total_loss(outs, off)
    assert r.total == 0.0 and loss.item() == 0.0
    no_inter = LossConfig(use_inter=False)
    _, r = total_loss(outs, no_inter)
    assert r.l_inter_fg == 0.0 and r.l_inter_bg == 0.0
    assert r.total == pytest.approx(r.l_intra + r.l_neg, abs=1e-12)


def test_batch_intra_is_mean_over_images():
    data = generate_synthetic(SyntheticSpec(n_images=2))
    outs = _outputs(data.features.images, 3)
    _, r = total_loss(outs, LossConfig(lam=0.5, use_neg=False, use_inter=False))
    per_image = [m + 0.5 * e for m, e in zip(r.modularity, r.entropy)]
    assert r.l_intra == pytest.approx(np.mean(per_image), abs=1e-12)


def test_config_validation():
    for bad in (LossConfig(lam=-1), LossConfig(alpha=0), LossConfig(eps_log=0.1)):
        with pytest.raises(ValueError):
            bad.validate()


# -------------------------------------------------------------- gradients


def _grad_check_batch(fn_terms, seed=0):
    rng = np.random.default_rng(seed)
    from heapgroup.head import HeadParams

    named = {k: v.data + rng.normal(0, 0.3, v.shape) for k, v in init_head(3, 4, 2, seed).named().items()}
    params = HeadParams.from_named(named)
    images = generate_synthetic(SyntheticSpec(n_images=2, grid_h=2, grid_w=3, D=4, k_regions=3,
                                              n_fg_prototypes=1, min_prototype_angle=0.5, fg_bias=0.3)).features
    from heapgroup.head import forward_image, prepare_patches

    def fn():
        outs = [forward_image(prepare_patches(im.embeddings, True), params) for im in images.images]
        return fn_terms(outs)

    return dc.grad_check(fn, params.tensors(), names=list(params.named()))


def test_grad_check_intra():
    report = _grad_check_batch(lambda outs: total_loss(outs, LossConfig(lam=0.3, use_neg=False, use_inter=False))[0])
    assert max(report.tensor_relative(1e-8).values()) < 1e-4


def test_grad_check_neg_plus_inter():
    cfg = LossConfig(use_intra=False, use_entropy=False)
    report = _grad_check_batch(lambda outs: total_loss(outs, cfg)[0], seed=1)
    rel = report.tensor_relative(1e-8)
    assert rel and max(rel.values()) < 1e-4

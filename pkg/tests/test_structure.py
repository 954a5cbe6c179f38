import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.stats import ortho_group

from lowlight_diffusion import diffcore as dc
from lowlight_diffusion import structure as S
from lowlight_diffusion.errors import ConfigError, DimensionError
from lowlight_diffusion.schedules import build_linear


def partition(cs):
    return {frozenset(int(i) for i in m) for m in cs.members}


def planted_blocks(rng, sizes=(5, 7, 4), spread=0.01):
    centers = rng.random((len(sizes), 12)) * 10
    X = np.concatenate([c + spread * rng.standard_normal((n, 12)) for c, n in zip(centers, sizes)])
    truth, start = set(), 0
    for n in sizes:
        truth.add(frozenset(range(start, start + n)))
        start += n
    return X, truth


# -- patches -----------------------------------------------------------------

def test_single_block(rng):
    img = rng.random((8, 8, 3))
    grid, blocks = S.patchify(img, 8)
    assert grid.n == 1 and blocks.shape == (1, 192)
    np.testing.assert_array_equal(blocks[0], img.ravel())


def test_block_count_and_layout(rng):
    img = rng.random((16, 16, 3))
    grid, blocks = S.patchify(img, 4)
    assert (grid.n, grid.m) == (16, 48) and blocks.shape == (16, 48)
    np.testing.assert_array_equal(blocks[5], img[4:8, 4:8].ravel())


@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(0, 2**32 - 1))
def test_unpatchify_inverts_patchify(rows, cols, b, seed):
    img = np.random.default_rng(seed).random((rows * b, cols * b, 3))
    grid, blocks = S.patchify(img, b)
    np.testing.assert_array_equal(S.unpatchify(grid, blocks), img)


def test_patchify_tensor_matches_array(rng):
    img = rng.random((2, 8, 8, 3))
    _, a = S.patchify(img, 4)
    with dc.precision(np.float64):
        _, t = S.patchify(dc.Tensor(img), 4)
    np.testing.assert_array_equal(a, t.data)


@pytest.mark.parametrize("shape,b", [((10, 8, 3), 4), ((8, 8, 3), 3), ((8, 8, 4), 4)])
def test_patchify_errors(shape, b):
    with pytest.raises(DimensionError):
        S.patchify(np.zeros(shape), b)


def test_default_cluster_count():
    assert [S.default_cluster_count(n) for n in (1, 2, 16, 64, 256)] == [1, 2, 2, 4, 16]


# -- k-means -----------------------------------------------------------------

def test_kmeans_k_equals_n_is_singletons(rng):
    X = rng.random((9, 4))
    cs = S.cluster_kmeans(X, 9)
    assert sorted(cs.sizes) == [1] * 9


def test_kmeans_single_cluster(rng):
    cs = S.cluster_kmeans(rng.random((9, 4)), 1)
    assert cs.k == 1 and cs.sizes == [9]


def test_kmeans_planted(rng):
    X, truth = planted_blocks(rng)
    assert partition(S.cluster_kmeans(X, 3, seed=5)) == truth


def test_kmeans_deterministic_and_duplicates(rng):
    X = np.repeat(rng.random((2, 4)), 4, axis=0)
    a = S.cluster_kmeans(X, 3, seed=1)
    b = S.cluster_kmeans(X, 3, seed=1)
    assert np.array_equal(a.assignment, b.assignment) and a.k == 3


def test_cluster_count_errors(rng):
    X = rng.random((4, 3))
    for k in (0, 5):
        with pytest.raises(ConfigError):
            S.cluster_kmeans(X, k)
        with pytest.raises(ConfigError):
            S.cluster_hierarchical(X, k)
    with pytest.raises(ConfigError):
        S.cluster_image(np.zeros((8, 8, 3)), 4, algo="spectral")


# -- Ward --------------------------------------------------------------------

def test_ward_hand_trace():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    merges = S.ward_linkage(X)
    assert [(i, j) for i, j, _ in merges] == [(0, 1), (2, 3), (0, 2)]
    np.testing.assert_allclose([c for *_, c in merges], [1.0, 1.0, 8.0], rtol=1e-14)


def test_ward_singletons_and_planted(rng):
    X, truth = planted_blocks(rng)
    assert sorted(S.cluster_hierarchical(X, len(X)).sizes) == [1] * len(X)
    assert partition(S.cluster_hierarchical(X, 3)) == truth


@pytest.mark.parametrize("seed", range(5))
def test_ward_matches_scipy(seed):
    X = np.random.default_rng(seed).random((20, 6))
    Z = linkage(X, method="ward")
    ours = S.ward_linkage(X)
    np.testing.assert_allclose([c for *_, c in ours], Z[:, 2] ** 2, rtol=1e-9)
    for k in (2, 4, 7):
        labels = fcluster(Z, k, criterion="maxclust")
        ref = {frozenset(np.flatnonzero(labels == v).tolist()) for v in np.unique(labels)}
        assert partition(S.cluster_hierarchical(X, k)) == ref


def test_cluster_numbering_by_smallest_member(rng):
    cs = S.cluster_image(rng.random((16, 16, 3)), 4, 3)
    firsts = [int(m[0]) for m in cs.members]
    assert firsts == sorted(firsts) and firsts[0] == 0
    assert all(np.all(np.diff(m) > 0) for m in cs.members)


# -- cluster matrices ----------------------------------------------------------

def test_build_matrices_identity_and_stability(rng):
    img = rng.random((16, 16, 3))
    cs = S.cluster_image(img, 4, 3)
    _, blocks = S.patchify(img, 4)
    mats = S.build_matrices(cs, blocks)
    assert [M.shape for M in mats] == [(48, n) for n in cs.sizes]
    for M, members in zip(mats, cs.members):
        np.testing.assert_array_equal(M, blocks[members].T)
    assert all(np.array_equal(a, b) for a, b in zip(mats, S.build_matrices(cs, blocks)))


def test_swapping_two_blocks_swaps_their_columns(rng):
    img = rng.random((16, 16, 3))
    cs = S.cluster_image(img, 4, 3)
    _, blocks = S.patchify(img, 4)
    i, j = 2, 13
    swapped = blocks.copy()
    swapped[[i, j]] = swapped[[j, i]]
    before, after = S.build_matrices(cs, blocks), S.build_matrices(cs, swapped)
    for members, A, B in zip(cs.members, before, after):
        for col, idx in enumerate(members):
            other = {i: j, j: i}.get(int(idx), int(idx))
            np.testing.assert_array_equal(B[:, col], blocks[other])


def test_build_matrices_shape_errors(rng):
    cs = S.cluster_image(rng.random((8, 8, 3)), 4, 2)
    with pytest.raises(DimensionError):
        S.build_matrices(cs, np.zeros((3, 48)))
    with pytest.raises(DimensionError):
        S.build_matrices(cs, np.zeros((4, 12)))


# -- rank loss -----------------------------------------------------------------

def test_rank_loss_hand_value():
    assert S.rank_loss([np.diag([3.0, 1.0])], [np.diag([2.0, 1.0])]).item() == 0.5


def test_rank_loss_zero_on_identical(rng):
    Ms = [rng.random((48, n)) for n in (3, 5, 1)]
    assert S.rank_loss(Ms, Ms).item() < 1e-12


def test_rank_loss_permutation_and_rotation_invariance(rng):
    rec = [rng.random((12, 5)), rng.random((12, 3))]
    gt = [rng.random((12, 5)), rng.random((12, 3))]
    base = S.rank_loss(rec, gt).item()
    perm = [M[:, rng.permutation(M.shape[1])] for M in rec]
    assert abs(S.rank_loss(perm, gt).item() - base) < 1e-12
    Q = ortho_group.rvs(12, random_state=3)
    assert abs(S.rank_loss([Q @ M for M in rec], [Q @ M for M in gt]).item() - base) < 1e-12


def test_rank_loss_pairing_errors(rng):
    with pytest.raises(DimensionError):
        S.rank_loss([np.eye(2)], [np.eye(2), np.eye(2)])
    with pytest.raises(DimensionError):
        S.rank_loss([np.eye(2)], [np.eye(3)])


def test_rank_loss_gradcheck(rng):
    gt = rng.random((12, 5))
    rep = dc.grad_check(lambda M: S.rank_loss([M], [gt]), [rng.random((12, 5))], 1e-4)
    assert rep.passed, rep.line()


def test_weighted_rank_loss_schedule(rng):
    s = build_linear(500, 1e-4, 2e-2)
    rec, gt = [rng.random((12, 4))], [rng.random((12, 4))]
    with dc.precision(np.float64):
        plain = S.rank_loss(rec, gt).item()
        late, early = S.weighted_rank_loss(rec, gt, 500, s).item(), S.weighted_rank_loss(rec, gt, 1, s).item()
        mid = S.weighted_rank_loss(rec, gt, 200, s).item()
    assert late < 1e-3 * early
    ab = s.alpha_bar
    assert abs(early / mid - (ab[0] / ab[199]) ** 2) < 1e-12
    unit = build_linear(1, 1e-300, 1e-300)
    with dc.precision(np.float64):
        assert S.weighted_rank_loss(rec, gt, 1, unit).item() == plain
    with pytest.raises(IndexError):
        S.weighted_rank_loss(rec, gt, 501, s)


def test_batch_structure_loss_matches_per_image(rng):
    imgs = rng.random((2, 8, 8, 3))
    gts = rng.random((2, 8, 8, 3))
    css = [S.cluster_image(g, 4, 2) for g in gts]
    specs = [S.spectra(S.build_matrices(cs, S.patchify(g, 4)[1])) for cs, g in zip(css, gts)]
    with dc.precision(np.float64):
        _, blocks = S.patchify(dc.Tensor(imgs), 4)
        total = S.batch_structure_loss(blocks, css, specs, [0.5, 2.0]).item()
        each = [S.rank_loss(S.build_matrices(cs, S.patchify(x, 4)[1]),
                            S.build_matrices(cs, S.patchify(g, 4)[1])).item()
                for cs, x, g in zip(css, imgs, gts)]
    assert abs(total - (0.5 * each[0] + 2.0 * each[1]) / 2) < 1e-12


def test_clustering_deterministic(rng):
    img = rng.random((16, 16, 3))
    for algo in S.CLUSTERERS:
        a, b = S.cluster_image(img, 4, 4, algo, seed=2), S.cluster_image(img, 4, 4, algo, seed=2)
        assert np.array_equal(a.assignment, b.assignment)


def test_spectrum_pair_csv(rng, tmp_path):
    x0 = rng.random((8, 8, 3))
    cs = S.cluster_image(x0, 4, 2)
    sp = S.spectrum_pair(x0, x0, cs)
    assert all(g == 0 for g in sp.gaps)
    sp.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "cluster_id,rank_index,sigma_rec,sigma_gt"
    assert len(lines) == 1 + sum(min(48, n) for n in cs.sizes)

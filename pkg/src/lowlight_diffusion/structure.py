"""Non-local structure regularization on clustered image blocks.

An image is cut into non-overlapping b x b blocks, the blocks of the clean
image are clustered, and every cluster is stacked into an m x n_j matrix
(m = 3 b^2). The loss compares singular-value spectra of the same clusters
taken from a reconstruction and from the clean image.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DimensionError
from .schedules import NoiseSchedule

ArrayOrTensor = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class PatchGrid:
    block: int
    rows: int
    cols: int

    @property
    def m(self) -> int:
        return 3 * self.block * self.block

    @property
    def n(self) -> int:
        return self.rows * self.cols


@dataclass
class ClusterSet:
    """Partition of a grid's blocks; clusters numbered by their smallest member."""

    grid: PatchGrid
    assignment: np.ndarray
    members: list  # per cluster, ascending block indices

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def sizes(self) -> list[int]:
        return [len(m) for m in self.members]

    @classmethod
    def from_labels(cls, grid: PatchGrid, labels: np.ndarray) -> "ClusterSet":
        labels = np.asarray(labels)
        _, first = np.unique(labels, return_index=True)
        order = labels[np.sort(first)]
        remap = {int(old): new for new, old in enumerate(order)}
        assignment = np.array([remap[int(l)] for l in labels], dtype=np.int64)
        members = [np.flatnonzero(assignment == j) for j in range(len(order))]
        return cls(grid, assignment, members)


# -- patches -----------------------------------------------------------------

def _grid_for(shape, b: int) -> PatchGrid:
    H, W = shape[-3], shape[-2]
    if shape[-1] != 3:
        raise DimensionError(f"expected 3 channels last, got shape {shape}")
    if b < 1 or H % b or W % b:
        raise DimensionError(f"{H}x{W} image is not divisible into {b}x{b} blocks")
    return PatchGrid(b, H // b, W // b)


def patchify(img: ArrayOrTensor, b: int) -> tuple[PatchGrid, ArrayOrTensor]:
    """Blocks of an (H, W, 3) or (N, H, W, 3) image as rows of an (N*n, m) array.

    Blocks are in row-major grid order; each vector is flattened as
    (row-in-block, col-in-block, channel).
    """
    grid = _grid_for(img.shape, b)
    N = img.shape[0] if len(img.shape) == 4 else 1
    five = (N, grid.rows, b, grid.cols, b, 3)
    if isinstance(img, Tensor):
        x = dc.reshape(img, five)
        x = dc.transpose(x, (0, 1, 3, 2, 4, 5))
        return grid, dc.reshape(x, (N * grid.n, grid.m))
    x = np.asarray(img).reshape(five).transpose(0, 1, 3, 2, 4, 5)
    return grid, x.reshape(N * grid.n, grid.m)


def unpatchify(grid: PatchGrid, blocks: np.ndarray) -> np.ndarray:
    b = grid.block
    N = blocks.shape[0] // grid.n
    x = np.asarray(blocks).reshape(N, grid.rows, grid.cols, b, b, 3).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(N, grid.rows * b, grid.cols * b, 3)
    return x[0] if N == 1 else x


def default_cluster_count(n: int) -> int:
    return min(n, max(2, n // 16))


# -- clustering --------------------------------------------------------------

def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] - 2.0 * a @ b.T + (b * b).sum(1)[None, :]
    return np.maximum(d, 0.0)


def cluster_kmeans(blocks: np.ndarray, k: int, seed: int = 0, max_iters: int = 50,
                   grid: Optional[PatchGrid] = None) -> ClusterSet:
    """Lloyd's algorithm with k-means++ seeding on raw block vectors."""
    X = np.asarray(blocks, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= n, got k={k}, n={n}")
    if max_iters < 1:
        raise ConfigError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:  # remaining points coincide with centers
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[[nxt]])[:, 0])
    centers = X[chosen].copy()

    labels = np.full(n, -1)
    for _ in range(max_iters):
        dist = _sq_dists(X, centers)
        new = dist.argmin(axis=1)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # move the point farthest from its centroid into the empty cluster
            own = dist[np.arange(n), new]
            own = np.where(counts[new] > 1, own, -1.0)
            far = int(own.argmax())
            counts[new[far]] -= 1
            new[far] = j
            counts[j] = 1
            centers[j] = X[far]
            dist[:, j] = _sq_dists(X, X[[far]])[:, 0]
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            centers[j] = X[labels == j].mean(axis=0)
    return ClusterSet.from_labels(grid or PatchGrid(0, n, 1), labels)


def ward_linkage(blocks: np.ndarray, k: int = 1) -> list[tuple[int, int, float]]:
    """Agglomerative Ward merges down to ``k`` clusters.

    Returns (slot_i, slot_j, cost) per merge where cost is the Ward merge
    distance on squared Euclidean scale; the merged cluster keeps slot_i.
    Ties go to the lexicographically smallest (i, j).
    """
    X = np.asarray(blocks, dtype=np.float64)
    n = X.shape[0]
    D = _sq_dists(X, X)
    D[np.diag_indices(n)] = np.inf
    D[np.tril_indices(n, -1)] = np.inf
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    merges = []
    for _ in range(n - k):
        flat = int(np.argmin(D))
        i, j = divmod(flat, n)
        cost = float(D[i, j])
        merges.append((i, j, cost))
        others = np.flatnonzero(active)
        others = others[(others != i) & (others != j)]
        d_ik = np.minimum(D[i, others], D[others, i])
        d_jk = np.minimum(D[j, others], D[others, j])
        nk, ni, nj = size[others], size[i], size[j]
        new = ((ni + nk) * d_ik + (nj + nk) * d_jk - nk * cost) / (ni + nj + nk)
        lo, hi = np.minimum(others, i), np.maximum(others, i)
        D[lo, hi] = new
        D[j, :] = np.inf
        D[:, j] = np.inf
        size[i] += size[j]
        active[j] = False
    return merges


def cluster_hierarchical(blocks: np.ndarray, k: int, grid: Optional[PatchGrid] = None) -> ClusterSet:
    """Ward-linkage agglomerative clustering cut at ``k`` clusters."""
    X = np.asarray(blocks, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= n, got k={k}, n={n}")
    parent = np.arange(n)
    for i, j, _ in ward_linkage(X, k):
        parent[parent == j] = i
    return ClusterSet.from_labels(grid or PatchGrid(0, n, 1), parent)


CLUSTERERS = ("hierarchical", "kmeans")


def cluster_image(img: np.ndarray, b: int, k: Optional[int] = None, algo: str = "hierarchical",
                  seed: int = 0) -> ClusterSet:
    grid, blocks = patchify(np.asarray(img), b)
    k = default_cluster_count(grid.n) if k is None else k
    if algo == "kmeans":
        return cluster_kmeans(blocks, k, seed=seed, grid=grid)
    if algo == "hierarchical":
        return cluster_hierarchical(blocks, k, grid=grid)
    raise ConfigError(f"unknown clustering algorithm {algo!r}; choose from {CLUSTERERS}")


# -- matrices and loss -----------------------------------------------------

def build_matrices(clusters: ClusterSet, blocks: ArrayOrTensor, offset: int = 0) -> list:
    """Stack each cluster's blocks as columns of an m x n_j matrix.

    ``blocks`` may hold several images' blocks; ``offset`` selects where this
    image's rows start. The assignment always comes from the clean image.
    """
    n = clusters.grid.n if clusters.grid.block else len(clusters.assignment)
    if blocks.shape[0] < offset + n:
        raise DimensionError(f"blocks hold {blocks.shape[0]} rows, need {offset + n}")
    if clusters.grid.block and blocks.shape[1] != clusters.grid.m:
        raise DimensionError(f"block length {blocks.shape[1]} does not match grid m={clusters.grid.m}")
    if isinstance(blocks, Tensor):
        return [dc.transpose(dc.take_rows(blocks, members + offset), (1, 0)) for members in clusters.members]
    blocks = np.asarray(blocks)
    return [blocks[members + offset].T for members in clusters.members]


def spectra(mats: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [s for _, s, _ in dc.thin_svd_many(list(mats))]


def _check_pairing(Ms_rec, Ms_gt) -> None:
    if len(Ms_rec) != len(Ms_gt):
        raise DimensionError(f"{len(Ms_rec)} reconstruction clusters vs {len(Ms_gt)} ground-truth clusters")
    for a, b in zip(Ms_rec, Ms_gt):
        if tuple(a.shape) != tuple(np.shape(b)):
            raise DimensionError(f"cluster matrix shapes differ: {a.shape} vs {np.shape(b)}")


def rank_loss(Ms_rec: Sequence[ArrayOrTensor], Ms_gt: Sequence[np.ndarray],
              gt_spectra: Optional[Sequence[np.ndarray]] = None) -> Tensor:
    """Mean absolute gap between cluster spectra; gradient flows to ``Ms_rec`` only."""
    _check_pairing(Ms_rec, Ms_gt)
    if gt_spectra is None:
        gt_spectra = spectra([np.asarray(getattr(M, "data", M)) for M in Ms_gt])
    s_rec = dc.singular_values_batch(list(Ms_rec))
    target = np.concatenate(gt_spectra).astype(s_rec.dtype)
    return dc.mean(dc.abs(dc.sub(s_rec, target)))


def weighted_rank_loss(Ms_rec, Ms_gt, t: int, schedule: NoiseSchedule, gt_spectra=None) -> Tensor:
    """kappa_t * rank_loss with kappa_t = alpha_bar_t ** 2."""
    schedule._check(t)
    return dc.mul(rank_loss(Ms_rec, Ms_gt, gt_spectra), float(schedule.kappa[t - 1]))


def batch_structure_loss(blocks_rec: Tensor, cluster_sets: Sequence[ClusterSet],
                         gt_spectra: Sequence[Sequence[np.ndarray]], weights: Sequence[float]) -> Tensor:
    """Batch mean of ``weights[i] * rank_loss_i`` with one SVD call for the whole batch.

    ``blocks_rec`` holds the blocks of all N reconstructions stacked in order.
    """
    mats, per_value = [], []
    offset = 0
    N = len(cluster_sets)
    for cs, spec, w in zip(cluster_sets, gt_spectra, weights):
        mats.extend(build_matrices(cs, blocks_rec, offset))
        count = sum(len(s) for s in spec)
        per_value.append(np.full(count, w / (count * N)))
        offset += cs.grid.n
    s_rec = dc.singular_values_batch(mats)
    target = np.concatenate([np.concatenate(s) for s in gt_spectra]).astype(s_rec.dtype)
    wvec = np.concatenate(per_value).astype(s_rec.dtype)
    return dc.sum(dc.mul(dc.abs(dc.sub(s_rec, target)), wvec))


@dataclass
class SpectrumPair:
    rec: list
    gt: list

    @property
    def gaps(self) -> list[float]:
        return [float(np.abs(r - g).sum()) for r, g in zip(self.rec, self.gt)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cluster_id", "rank_index", "sigma_rec", "sigma_gt"])
            for j, (r, g) in enumerate(zip(self.rec, self.gt)):
                for i, (a, b) in enumerate(zip(r, g)):
                    w.writerow([j, i, f"{a:.9g}", f"{b:.9g}"])


def spectrum_pair(x_hat: np.ndarray, x0: np.ndarray, clusters: ClusterSet) -> SpectrumPair:
    b = clusters.grid.block
    _, rec_blocks = patchify(np.asarray(x_hat, dtype=np.float64), b)
    _, gt_blocks = patchify(np.asarray(x0, dtype=np.float64), b)
    return SpectrumPair(spectra(build_matrices(clusters, rec_blocks)),
                        spectra(build_matrices(clusters, gt_blocks)))

"""Randomized decision forest and weighted conditional distributions.

Each node tries up to ``mtry`` candidate variables; every candidate gets a
single split value drawn uniformly at random (rather than an exhaustive
search), and the candidate with the smallest summed within-child sum of
squares wins.  Forest weights follow the quantile-forest construction: each
tree spreads unit mass uniformly over the in-bag samples of the leaf a query
falls into, and the forest averages the trees.
"""

from __future__ import annotations

import concurrent.futures
import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import RunConfig, derive_rng

_ROW_CHUNK = 8192
# cumulative sums may overshoot 1 by a few ulps; such levels are treated as 1
_LEVEL_SLACK = 1e-12


@dataclass(frozen=True)
class Tree:
    """Array representation of a fitted tree.

    Nodes are stored in preorder.  ``feature[k] == -1`` marks a leaf, whose
    in-bag samples are ``samples[offsets[leaf_id[k]]:offsets[leaf_id[k] + 1]]``
    (global sample indices).  ``lower``/``upper`` hold the bounding box of the
    training points in each leaf.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_id: np.ndarray
    offsets: np.ndarray
    samples: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    importance: np.ndarray
    in_bag: np.ndarray
    stream: int = 0

    @property
    def n_leaves(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def leaf_sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def apply(self, X) -> np.ndarray:
        """Leaf index (into ``offsets``) reached by each row of ``X``."""
        X = np.atleast_2d(X)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.arange(X.shape[0])
        while active.size:
            nd = node[active]
            f = self.feature[nd]
            internal = f >= 0
            active, nd, f = active[internal], nd[internal], f[internal]
            if not active.size:
                break
            go_left = X[active, f] < self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
        return self.leaf_id[node]

    def leaf_members(self, leaf: int) -> np.ndarray:
        return self.samples[self.offsets[leaf]:self.offsets[leaf + 1]]


def _sse(v):
    return float(((v - v.mean()) ** 2).sum()) if v.size else 0.0


def train_tree(features, z, rng: np.random.Generator, min_leaf: int = 5, mtry: int | None = None,
               sample_ids=None, stream: int = 0) -> Tree:
    """Grow one randomized regression tree.

    At each node the variables are visited in random order; a variable is a
    usable candidate if a split can leave at least ``min_leaf`` points on each
    side, and its split value is drawn uniformly between the ``min_leaf``-th
    smallest and ``min_leaf``-th largest node values.  The first ``mtry``
    usable candidates are scored.  A node becomes a leaf when it has fewer
    than ``2 * min_leaf`` points, constant ``z``, or no usable candidate.
    """
    X = np.asarray(features, dtype=float)
    X = X.reshape(X.shape[0], -1)
    z = np.asarray(z, dtype=float)
    n, p = X.shape
    if sample_ids is None:
        sample_ids = np.arange(n)
    sample_ids = np.asarray(sample_ids)
    if mtry is None:
        mtry = max(1, -(-p // 3))
    mtry = min(mtry, p)

    feature, threshold, left, right, leaf_id = [], [], [], [], []
    leaves = []
    importance = np.zeros(p)

    def new_node():
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        leaf_id.append(-1)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(n))]
    while stack:
        node, idx = stack.pop()
        zi = z[idx]
        best = None
        if idx.size >= 2 * min_leaf and zi.max() > zi.min():
            parent_sse = _sse(zi)
            tried = 0
            for v in rng.permutation(p):
                col = X[idx, v]
                if min_leaf == 1:
                    lo, hi = col.min(), col.max()
                else:
                    part = np.partition(col, (min_leaf - 1, idx.size - min_leaf))
                    lo, hi = part[min_leaf - 1], part[idx.size - min_leaf]
                if not hi > lo:
                    continue
                s = rng.uniform(lo, hi)
                mask = col < s
                n_left = int(mask.sum())
                tried += 1
                if s > lo and min_leaf <= n_left <= idx.size - min_leaf:
                    score = _sse(zi[mask]) + _sse(zi[~mask])
                    key = (score, int(v), s)
                    if best is None or key < best[0]:
                        best = (key, mask)
                if tried >= mtry:
                    break
        if best is None:
            leaf_id[node] = len(leaves)
            leaves.append(idx)
            continue
        (score, v, s), mask = best
        importance[v] += parent_sse - score
        feature[node] = v
        threshold[node] = s
        lnode = new_node()
        rnode = new_node()
        left[node], right[node] = lnode, rnode
        stack.append((rnode, idx[~mask]))
        stack.append((lnode, idx[mask]))

    sizes = np.array([leaf.size for leaf in leaves], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = np.concatenate(leaves)
    lower = np.array([X[leaf].min(axis=0) for leaf in leaves]).reshape(len(leaves), p)
    upper = np.array([X[leaf].max(axis=0) for leaf in leaves]).reshape(len(leaves), p)
    return Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=float),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        leaf_id=np.array(leaf_id, dtype=np.int64),
        offsets=offsets,
        samples=sample_ids[order],
        lower=lower,
        upper=upper,
        importance=importance / n,
        in_bag=np.sort(sample_ids),
        stream=stream,
    )


def draw_in_bag(rng: np.random.Generator, n: int, fraction: float) -> np.ndarray:
    """Subsample without replacement, sorted."""
    k = min(n, max(1, int(round(fraction * n))))
    return np.sort(rng.choice(n, size=k, replace=False))


@dataclass(frozen=True)
class Forest:
    trees: tuple
    n_train: int
    feature_names: tuple = field(default=())

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @functools.cached_property
    def _leaf_matrix(self) -> sp.csr_matrix:
        k = len(self.trees)
        blocks = []
        for tree in self.trees:
            sizes = tree.leaf_sizes
            rows = np.repeat(np.arange(tree.n_leaves), sizes)
            vals = np.repeat(1.0 / (k * sizes), sizes)
            blocks.append(sp.csr_matrix((vals, (rows, tree.samples)),
                                        shape=(tree.n_leaves, self.n_train)))
        return sp.vstack(blocks, format="csr")

    def weight_matrix(self, X) -> sp.csr_matrix:
        """Sparse ``(m, n_train)`` matrix of forest weights for query rows ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m = X.shape[0]
        k = len(self.trees)
        a_cols, col0 = [], 0
        for tree in self.trees:
            a_cols.append(tree.apply(X) + col0)
            col0 += tree.n_leaves
        A = sp.csr_matrix(
            (np.ones(m * k), np.stack(a_cols, axis=1).ravel(), np.arange(0, m * k + 1, k)),
            shape=(m, col0),
        )
        W = (A @ self._leaf_matrix).tocsr()
        W.sort_indices()
        return W

    def importance(self) -> np.ndarray:
        return np.mean([t.importance for t in self.trees], axis=0)


def _train_forest_tree(X, z, config: RunConfig, seed: int, t: int) -> Tree:
    rng = derive_rng(seed, "tree", t)
    in_bag = draw_in_bag(rng, X.shape[0], config.subsample_fraction)
    return train_tree(X[in_bag], z[in_bag], rng, config.min_leaf,
                      config.resolved_mtry(X.shape[1]), sample_ids=in_bag, stream=t)


def map_trees(fn, n_trees: int, n_jobs: int = 1):
    """Run ``fn(t)`` for each tree index, in order; threads when ``n_jobs > 1``."""
    if n_jobs <= 1:
        return [fn(t) for t in range(n_trees)]
    with concurrent.futures.ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, range(n_trees)))


def train_forest(features, z, config: RunConfig = RunConfig(), names=None) -> Forest:
    """Plain quantile forest on ``features``; tree ``t`` uses stream ``(seed, 'tree', t)``."""
    X = np.asarray(features, dtype=float)
    X = X.reshape(X.shape[0], -1)
    z = np.asarray(z, dtype=float)
    trees = map_trees(lambda t: _train_forest_tree(X, z, config, config.seed, t),
                      config.n_trees, config.n_jobs)
    if names is None:
        names = tuple(f"x{i}" for i in range(X.shape[1]))
    return Forest(tuple(trees), X.shape[0], tuple(names))


@dataclass(frozen=True)
class WeightVector:
    """Sparse forest weights: sample indices and their (positive) weights."""

    index: np.ndarray
    weight: np.ndarray


def forest_weights(forest: Forest, y) -> WeightVector:
    W = forest.weight_matrix(np.asarray(y, dtype=float).reshape(1, -1))
    return WeightVector(W.indices.copy(), W.data.copy())


def _rank_order(z_train):
    order = np.argsort(z_train, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return order, rank


def _check_levels(q):
    q = np.asarray(q, dtype=float)
    if np.any(np.isnan(q)) or np.any((q < -_LEVEL_SLACK) | (q > 1 + _LEVEL_SLACK)):
        raise ValueError("quantile level must lie in [0, 1]")
    return np.clip(q, 0.0, 1.0)


class StepCDF:
    """Right-continuous weighted empirical CDF, ``F(t) = sum w_i 1{z_i <= t}``.

    Atoms are kept per sample (ties adjacent, in sample-index order) so that
    cumulative sums match the batch evaluation in :class:`WeightRows` exactly.
    """

    def __init__(self, values, weights, sample_index=None):
        values = np.asarray(values, dtype=float)
        weights = np.asarray(weights, dtype=float)
        keep = weights > 0
        self.values = values[keep]
        self.weights = weights[keep]
        self.sample_index = None if sample_index is None else np.asarray(sample_index)[keep]
        if self.values.size == 0:
            raise ValueError("a CDF needs at least one positive weight")
        if np.any(np.diff(self.values) < 0):
            order = np.argsort(self.values, kind="stable")
            self.values, self.weights = self.values[order], self.weights[order]
            if self.sample_index is not None:
                self.sample_index = self.sample_index[order]
        self.cumulative = np.cumsum(self.weights)

    @property
    def atoms(self):
        """Distinct values and their summed weights."""
        u, inv = np.unique(self.values, return_inverse=True)
        return u, np.bincount(inv, weights=self.weights)

    def cdf(self, t):
        pos = np.searchsorted(self.values, t, side="right")
        return np.where(pos > 0, self.cumulative[np.maximum(pos - 1, 0)], 0.0)

    def quantile(self, q):
        q = _check_levels(q)
        pos = np.minimum(np.searchsorted(self.cumulative, q, side="left"), self.values.size - 1)
        out = self.values[pos]
        return float(out) if out.ndim == 0 else out

    def mean(self) -> float:
        return float(self.weights @ self.values / self.weights.sum())

    def std(self) -> float:
        mu = self.mean()
        return float(np.sqrt(max(self.weights @ (self.values - mu) ** 2 / self.weights.sum(), 0.0)))

    def interval_prob(self, a, b) -> float:
        """``sum w_i 1{a <= z_i <= b}``."""
        if a > b:
            raise ValueError("interval_prob requires a <= b")
        sel = (self.values >= a) & (self.values <= b)
        return float(self.weights[sel].sum())

    def prob_gt(self, t) -> float:
        return float(self.weights[self.values > t].sum())

    def atom_interval(self, value):
        """Cumulative weight just below and at the atom equal to ``value``.

        Returns ``(before, at)`` or None if ``value`` is not an atom.
        """
        lo = np.searchsorted(self.values, value, side="left")
        hi = np.searchsorted(self.values, value, side="right")
        if hi == lo:
            return None
        before = float(self.cumulative[lo - 1]) if lo > 0 else 0.0
        return before, float(self.cumulative[hi - 1])


def weighted_cdf(weights: WeightVector, z_train) -> StepCDF:
    z_train = np.asarray(z_train, dtype=float)
    _, rank = _rank_order(z_train)
    order = np.argsort(rank[weights.index], kind="stable")
    idx = weights.index[order]
    return StepCDF(z_train[idx], weights.weight[order], idx)


def cdf_quantile(cdf: StepCDF, q):
    return cdf.quantile(q)


def cdf_mean(cdf: StepCDF) -> float:
    return cdf.mean()


def cdf_std(cdf: StepCDF) -> float:
    return cdf.std()


def cdf_interval_prob(cdf: StepCDF, a, b) -> float:
    return cdf.interval_prob(a, b)


class WeightRows:
    """Batch of weighted CDFs sharing training values: one CSR row per query.

    Columns are permuted into ascending-``z`` order so each row lists its atoms
    sorted, which makes quantile lookups a per-row cumulative sum.
    """

    def __init__(self, W: sp.csr_matrix, z_train):
        self.z_train = np.asarray(z_train, dtype=float)
        order, rank = _rank_order(self.z_train)
        self.order = order
        self.sorted_z = self.z_train[order]
        W = W.tocsr()
        Wr = sp.csr_matrix((W.data, rank[W.indices], W.indptr), shape=W.shape)
        Wr.sort_indices()
        Wr.eliminate_zeros()
        self.W = Wr

    @property
    def m(self) -> int:
        return self.W.shape[0]

    def mean(self):
        return self.W @ self.sorted_z

    def std(self):
        mu = self.mean()
        var = self.W @ self.sorted_z**2 - mu**2
        return np.sqrt(np.maximum(var, 0.0))

    def prob_gt(self, t):
        return self.W @ (self.sorted_z > t).astype(float)

    def cdf(self, t):
        return self.W @ (self.sorted_z <= t).astype(float)

    def interval_prob(self, a, b):
        if a > b:
            raise ValueError("interval_prob requires a <= b")
        return self.W @ ((self.sorted_z >= a) & (self.sorted_z <= b)).astype(float)

    def _padded(self, rows):
        W = self.W[rows] if rows is not None else self.W
        lengths = np.diff(W.indptr)
        width = max(int(lengths.max(initial=0)), 1)
        pos = np.arange(W.nnz) - np.repeat(W.indptr[:-1], lengths)
        row = np.repeat(np.arange(W.shape[0]), lengths)
        dense = np.zeros((W.shape[0], width))
        dense[row, pos] = W.data
        cols = np.full((W.shape[0], width), -1, dtype=np.int64)
        cols[row, pos] = W.indices
        return np.cumsum(dense, axis=1), cols, lengths

    def quantile(self, q):
        """Per-row smallest atom with cumulative weight >= q (q scalar or per row)."""
        q = np.broadcast_to(np.asarray(q, dtype=float), (self.m,))
        return self.quantiles(q[:, None])[:, 0]

    def quantiles(self, Q):
        """Quantiles for several levels per row; ``Q`` has shape ``(m, k)``."""
        Q = _check_levels(Q)
        if Q.ndim != 2 or Q.shape[0] != self.m:
            raise ValueError("levels must have shape (m, k)")
        out = np.empty(Q.shape)
        for s in range(0, self.m, _ROW_CHUNK):
            rows = np.arange(s, min(s + _ROW_CHUNK, self.m))
            cum, cols, lengths = self._padded(rows)
            valid = np.arange(cum.shape[1])[None, :] < lengths[:, None]
            ar = np.arange(rows.size)
            for j in range(Q.shape[1]):
                hit = (cum >= Q[rows, j, None]) & valid
                pos = np.where(hit.any(axis=1), hit.argmax(axis=1), lengths - 1)
                out[rows, j] = self.sorted_z[cols[ar, pos]]
        return out

    def row_cdf(self, i) -> StepCDF:
        lo, hi = self.W.indptr[i], self.W.indptr[i + 1]
        ranks = self.W.indices[lo:hi]
        return StepCDF(self.sorted_z[ranks], self.W.data[lo:hi], self.order[ranks])


def variable_importance(forest: Forest) -> np.ndarray:
    """Per-variable within-node sum-of-squares reduction, per in-bag sample, averaged over trees."""
    return forest.importance()

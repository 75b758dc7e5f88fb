"""Quantile regression forest: conditional quantiles from leaf target multisets.

Trees are grown with variance-reduction (CART) splits on bootstrap
resamples; each leaf keeps the raw targets routed to it, so any quantile
of the forest-weighted empirical conditional distribution can be read off
after fitting. The quantile convention is inf-type: the smallest target
value whose weighted CDF reaches the requested level.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._io import read_arrays, read_json_block, write_arrays, write_json_block

QRF_MAGIC = b"QRF1"
CAL_MAGIC = b"CAL1"

# absolute slack when reading a weighted CDF, guards against cumsum rounding
_CDF_TOL = 1e-9


class EmptyTrainingSetError(ValueError):
    """fit received no training records."""


class AlphaOutOfRangeError(ValueError):
    """Quantile level must lie strictly inside (0, 1)."""


@dataclass(frozen=True)
class QuantilePair:
    """Symmetric lower/upper quantile levels for a target coverage alpha."""

    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise AlphaOutOfRangeError(f"alpha must be in (0,1), got {self.alpha}")

    @property
    def alpha_lo(self) -> float:
        return (1.0 - self.alpha) / 2.0

    @property
    def alpha_hi(self) -> float:
        return (1.0 + self.alpha) / 2.0


@dataclass
class _Tree:
    feature: np.ndarray  # int32, -1 marks a leaf
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    leaf_ptr: np.ndarray  # int32 into targets
    leaf_cnt: np.ndarray  # int32
    targets: np.ndarray  # float64, leaf multisets concatenated, sorted per leaf

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int32)
        while True:
            internal = self.feature[node] >= 0
            if not internal.any():
                return node
            idx = np.nonzero(internal)[0]
            cur = node[idx]
            go_left = X[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])


def _grow_tree(X, y, rng, min_leaf, max_depth, feature_subsample) -> _Tree:
    """Grow one CART tree on a bootstrap resample.

    Split gains are evaluated on the bootstrap multiset; leaves store the
    full original training targets routed down the tree, and every split
    keeps at least min_leaf members on each side in both multisets, so
    every leaf holds >= min_leaf original targets.
    """
    n, d = X.shape
    boot = rng.integers(0, n, size=n)

    feature, threshold, left, right = [], [], [], []
    leaf_ptr, leaf_cnt, target_chunks = [], [], []
    n_targets = 0

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf_ptr.append(-1)
        leaf_cnt.append(0)
        return len(feature) - 1

    def make_leaf(node, orig_idx):
        nonlocal n_targets
        leaf_ptr[node] = n_targets
        leaf_cnt[node] = orig_idx.size
        target_chunks.append(np.sort(y[orig_idx]))
        n_targets += orig_idx.size

    root = new_node()
    stack = [(root, boot, np.arange(n), 0)]
    while stack:
        node, bidx, oidx, depth = stack.pop()
        m = bidx.size
        if (
            m < 2 * min_leaf
            or oidx.size < 2 * min_leaf
            or (max_depth is not None and depth >= max_depth)
        ):
            make_leaf(node, oidx)
            continue
        feats = rng.choice(d, size=min(feature_subsample, d), replace=False)
        best_gain, best_f, best_thr = 0.0, -1, 0.0
        y_node = y[bidx]
        base = np.sum(y_node) ** 2 / m
        tol = 1e-12 * (1.0 + base)
        for f in feats:
            xs = X[bidx, f]
            order = np.argsort(xs, kind="stable")
            xs_s = xs[order]
            cum = np.cumsum(y_node[order])
            total = cum[-1]
            k = np.arange(min_leaf, m - min_leaf + 1)
            valid = xs_s[k - 1] < xs_s[k]
            if not valid.any():
                continue
            thr = 0.5 * (xs_s[k - 1] + xs_s[k])
            orig_sorted = np.sort(X[oidx, f])
            orig_left = np.searchsorted(orig_sorted, thr, side="right")
            valid &= (orig_left >= min_leaf) & (oidx.size - orig_left >= min_leaf)
            if not valid.any():
                continue
            s_l = cum[k - 1]
            gain = s_l**2 / k + (total - s_l) ** 2 / (m - k) - base
            gain[~valid] = -np.inf
            j = int(np.argmax(gain))
            if gain[j] > best_gain + tol:
                best_gain = gain[j]
                best_f = int(f)
                best_thr = thr[j]
        if best_f < 0:
            make_leaf(node, oidx)
            continue
        b_left = X[bidx, best_f] <= best_thr
        o_left = X[oidx, best_f] <= best_thr
        feature[node] = best_f
        threshold[node] = best_thr
        l_node, r_node = new_node(), new_node()
        left[node], right[node] = l_node, r_node
        stack.append((r_node, bidx[~b_left], oidx[~o_left], depth + 1))
        stack.append((l_node, bidx[b_left], oidx[o_left], depth + 1))

    targets = np.concatenate(target_chunks) if target_chunks else np.empty(0)
    return _Tree(
        np.array(feature, dtype=np.int32),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int32),
        np.array(right, dtype=np.int32),
        np.array(leaf_ptr, dtype=np.int32),
        np.array(leaf_cnt, dtype=np.int32),
        np.asarray(targets, dtype=np.float64),
    )


def _take_runs(arr, starts, lens):
    """Gather arr[starts[i]:starts[i]+lens[i]] for all i, concatenated."""
    total = int(lens.sum())
    if total == 0:
        return np.empty(0, dtype=arr.dtype)
    offsets = np.repeat(np.cumsum(lens) - lens, lens)
    out_idx = np.arange(total) - offsets + np.repeat(starts, lens)
    return arr[out_idx]


class QuantileForestRegressor(BaseEstimator, RegressorMixin):
    """Forest-based conditional quantile estimator with an sklearn surface.

    Parameters
    ----------
    n_trees : number of bootstrap trees.
    min_leaf : minimum targets per leaf.
    max_depth : optional depth cap; None grows to the min_leaf limit.
    feature_subsample : features drawn per split.
    seed : base seed; each tree's RNG stream derives from (seed, tree index)
        so parallel and serial fits agree bit-for-bit.
    """

    def __init__(self, n_trees=200, min_leaf=5, max_depth=None, feature_subsample=3, seed=0):
        self.n_trees = n_trees
        self.min_leaf = min_leaf
        self.max_depth = max_depth
        self.feature_subsample = feature_subsample
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if X.size == 0 or y.size == 0:
            raise EmptyTrainingSetError("training set must be nonempty")
        X = check_array(X)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y row counts differ")
        if self.n_trees < 1 or self.min_leaf < 1 or self.feature_subsample < 1:
            raise ValueError("n_trees, min_leaf and feature_subsample must be >= 1")
        # canonical sort makes the bootstrap plan invariant to input order
        keys = [X[:, j] for j in range(X.shape[1] - 1, -1, -1)] + [y]
        order = np.lexsort(keys)
        Xs, ys = X[order], y[order]
        self.trees_ = [
            _grow_tree(
                Xs,
                ys,
                np.random.default_rng(np.random.SeedSequence([self.seed, t])),
                self.min_leaf,
                self.max_depth,
                self.feature_subsample,
            )
            for t in range(self.n_trees)
        ]
        self.n_features_in_ = X.shape[1]
        return self

    def _pooled(self, X):
        """Per-row pooled (value, cumweight) arrays over all trees' leaves."""
        n = X.shape[0]
        vals, weights, rows = [], [], []
        T = len(self.trees_)
        for tree in self.trees_:
            leaves = tree.apply(X)
            starts = tree.leaf_ptr[leaves]
            lens = tree.leaf_cnt[leaves]
            vals.append(_take_runs(tree.targets, starts, lens))
            weights.append(np.repeat(1.0 / (T * lens), lens))
            rows.append(np.repeat(np.arange(n), lens))
        vals = np.concatenate(vals)
        weights = np.concatenate(weights)
        rows = np.concatenate(rows)
        order = np.lexsort((vals, rows))
        vals, weights, rows = vals[order], weights[order], rows[order]
        cw = np.cumsum(weights)
        ends = np.searchsorted(rows, np.arange(n), side="right") - 1
        starts = np.searchsorted(rows, np.arange(n), side="left")
        base = np.where(starts > 0, cw[starts - 1], 0.0)
        totals = cw[ends] - base
        return vals, cw, starts, ends, base, totals

    def _quantile_from_pooled(self, pooled, alpha):
        vals, cw, starts, ends, base, totals = pooled
        target = base + alpha * totals - _CDF_TOL * totals
        idx = np.searchsorted(cw, target, side="left")
        idx = np.minimum(np.maximum(idx, starts), ends)
        return vals[idx]

    def _check_predict(self, X, alpha=None):
        check_is_fitted(self, "trees_")
        if alpha is not None and not 0.0 < alpha < 1.0:
            raise AlphaOutOfRangeError(f"alpha must be in (0,1), got {alpha}")
        X = check_array(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, model was fit with {self.n_features_in_}"
            )
        return X

    def predict_quantile(self, X, alpha, chunk=2048):
        """Inf-type alpha-quantile of the pooled leaf distribution, per row."""
        X = self._check_predict(X, alpha)
        out = np.empty(X.shape[0])
        for s in range(0, X.shape[0], chunk):
            block = X[s : s + chunk]
            out[s : s + block.shape[0]] = self._quantile_from_pooled(
                self._pooled(block), alpha
            )
        return out

    def predict_interval(self, X, alpha=0.9, chunk=2048):
        """Uncalibrated [q_lo, q_hi] interval rows at coverage alpha."""
        qp = QuantilePair(alpha)
        X = self._check_predict(X)
        lo = np.empty(X.shape[0])
        hi = np.empty(X.shape[0])
        for s in range(0, X.shape[0], chunk):
            block = X[s : s + chunk]
            pooled = self._pooled(block)
            lo[s : s + block.shape[0]] = self._quantile_from_pooled(pooled, qp.alpha_lo)
            hi[s : s + block.shape[0]] = self._quantile_from_pooled(pooled, qp.alpha_hi)
        return lo, hi

    def predict(self, X):
        """Median prediction, for plain-regressor interoperability."""
        return self.predict_quantile(X, 0.5)


# ---------------------------------------------------------------------------
# checkpoint IO: QRF1 block, optionally followed by a CAL1 block


_TREE_FIELDS = ("feature", "threshold", "left", "right", "leaf_ptr", "leaf_cnt", "targets")


def save_forest(model: QuantileForestRegressor, path) -> None:
    check_is_fitted(model, "trees_")
    with open(path, "wb") as f:
        write_json_block(
            f,
            QRF_MAGIC,
            {
                "params": model.get_params(),
                "n_features_in": int(model.n_features_in_),
                "n_trees": len(model.trees_),
            },
        )
        for tree in model.trees_:
            write_arrays(f, (getattr(tree, name) for name in _TREE_FIELDS))


def load_forest(path) -> QuantileForestRegressor:
    with open(path, "rb") as f:
        header = read_json_block(f, QRF_MAGIC)
        model = QuantileForestRegressor(**header["params"])
        trees = []
        for _ in range(header["n_trees"]):
            trees.append(_Tree(*read_arrays(f, len(_TREE_FIELDS))))
        model.trees_ = trees
        model.n_features_in_ = header["n_features_in"]
    return model


def qrf_section_end(f) -> int:
    """Byte offset just past the QRF1 block (where a CAL1 block may start)."""
    f.seek(0)
    header = read_json_block(f, QRF_MAGIC)
    read_arrays(f, header["n_trees"] * len(_TREE_FIELDS))
    return f.tell()

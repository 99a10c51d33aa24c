"""Random forest of Gini trees with majority voting, MDI importance,
recursive feature elimination and stratified grid-search CV."""
from __future__ import annotations

import csv
import itertools
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _backend
from .metrics import auc_score


@dataclass
class FeatureMatrix:
    names: list
    X: np.ndarray
    y: np.ndarray | None = None
    ids: list | None = None

    def __post_init__(self):
        self.names = list(self.names)
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.names):
            raise ValueError("X must be n x d with one name per column")
        if len(set(self.names)) != len(self.names):
            raise ValueError("column names must be unique")
        if np.isnan(self.X).any():
            raise ValueError("feature matrix contains NaN")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int8)
            if self.y.shape != (self.X.shape[0],):
                raise ValueError("labels must have one entry per row")

    def columns(self, names):
        pos = {n: i for i, n in enumerate(self.names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise KeyError(f"missing feature column {missing[0]!r}")
        return FeatureMatrix(list(names), self.X[:, [pos[n] for n in names]], self.y, self.ids)

    def rows(self, index):
        index = np.asarray(index)
        ids = None if self.ids is None else [self.ids[i] for i in index]
        return FeatureMatrix(self.names, self.X[index], None if self.y is None else self.y[index], ids)


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 1
    # None means ceil(sqrt(d))
    max_features: int | None = None
    class_weight: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees and min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.class_weight not in (None, "balanced"):
            raise ValueError("class_weight must be None or 'balanced'")


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n0: np.ndarray
    n1: np.ndarray
    decrease: np.ndarray
    w0: float = 1.0
    w1: float = 1.0

    @property
    def vote(self):
        # ties go to the positive class
        return (self.n1 * self.w1 >= self.n0 * self.w0).astype(np.int8)

    def apply(self, X):
        return _backend.kernels.apply_tree(np.ascontiguousarray(X, dtype=np.float64), self.feature,
                                           self.threshold, self.left, self.right)

    def predict(self, X):
        return self.vote[self.apply(X)]


@dataclass
class ForestModel:
    params: ForestParams
    feature_names: list
    trees: list = field(default_factory=list)

    @property
    def n_features(self):
        return len(self.feature_names)


def _mtry(params, d):
    m = params.max_features if params.max_features is not None else math.ceil(math.sqrt(d))
    return max(1, min(int(m), d))


def class_weights(y, mode):
    if mode is None:
        return 1.0, 1.0
    n1 = int(np.count_nonzero(y))
    n0 = y.size - n1
    return y.size / (2.0 * n0), y.size / (2.0 * n1)


def bootstrap_counts(n, seed, tree_index):
    rng = np.random.default_rng(np.random.SeedSequence([seed, tree_index]))
    draws = rng.integers(0, n, n)
    return np.bincount(draws, minlength=n).astype(np.int64), int(rng.integers(0, 2 ** 63))


def fit_forest(data, params=ForestParams()):
    X, y = data.X, data.y
    if y is None:
        raise ValueError("training data needs labels")
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least 2 rows")
    if np.unique(y).size < 2:
        raise ValueError("training labels contain a single class")
    Xt = np.ascontiguousarray(X.T)
    w0, w1 = class_weights(y, params.class_weight)
    depth = -1 if params.max_depth is None else params.max_depth
    mtry = _mtry(params, d)
    uniq = [np.unique(col) for col in Xt]
    trees = []
    for t in range(params.n_trees):
        counts, tree_seed = bootstrap_counts(n, params.seed, t)
        arrays = _backend.kernels.build_tree(Xt, y, counts, depth, params.min_samples_leaf,
                                             mtry, w0, w1, np.uint64(tree_seed))
        tree = Tree(*arrays, w0=w0, w1=w1)
        _widen_thresholds(tree, uniq)
        trees.append(tree)
    return ForestModel(params, list(data.names), trees)


def _widen_thresholds(tree, uniq):
    """Move each split from its left value to the midpoint with the next training value.

    Using the whole training column (not just the node's rows) routes every
    training row by rank alone, so monotone feature transforms leave
    predictions on the training rows unchanged.
    """
    for node in np.flatnonzero(tree.feature >= 0):
        col = uniq[tree.feature[node]]
        a = tree.threshold[node]
        b = col[np.searchsorted(col, a, side="right")]
        mid = 0.5 * (a + b)
        tree.threshold[node] = mid if mid < b else a


def _as_matrix(model, data):
    if isinstance(data, FeatureMatrix):
        return data.columns(model.feature_names).X
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} feature columns")
    return X


def tree_votes(model, data):
    """(n_trees, n_rows) matrix of per-tree class votes."""
    X = np.ascontiguousarray(_as_matrix(model, data))
    return np.stack([t.predict(X) for t in model.trees])


def predict_proba(model, data):
    return tree_votes(model, data).mean(axis=0)


def predict(model, data, threshold=0.5):
    return (predict_proba(model, data) >= threshold).astype(np.int8)


def feature_importance(model):
    d = model.n_features
    total = np.zeros(d)
    for t in model.trees:
        per = np.zeros(d)
        internal = t.feature >= 0
        np.add.at(per, t.feature[internal], t.decrease[internal])
        total += per
    total /= len(model.trees)
    s = total.sum()
    if s <= 0:
        return np.full(d, 1.0 / d)
    return total / s


def importance_table(model):
    return dict(zip(model.feature_names, feature_importance(model)))


def rfe_select(data, params, k, progress=None):
    """Drop the least important feature one at a time until ``k`` remain."""
    if k <= 0:
        raise ValueError("k must be positive")
    names = list(data.names)
    if k > len(names):
        raise ValueError(f"k={k} exceeds the {len(names)} available features")
    while len(names) > k:
        model = fit_forest(data.columns(names), params)
        imp = feature_importance(model)
        low = imp.min()
        # among tied minima the name that sorts last goes first
        victim = max(n for n, v in zip(names, imp) if v == low)
        names.remove(victim)
        if progress is not None:
            progress(len(names))
    order = {n: i for i, n in enumerate(data.names)}
    return sorted(names, key=order.__getitem__)


def stratified_folds(y, folds, seed):
    """Fold index per row; each class is shuffled and dealt round-robin."""
    y = np.asarray(y)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D]))
    fold = np.empty(y.size, dtype=np.int64)
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        fold[idx] = np.arange(idx.size) % folds
    return fold


DEFAULT_GRID = {"n_trees": (100, 300), "max_depth": (4, 8, None), "min_samples_leaf": (1, 5)}


def expand_grid(grid, base=ForestParams()):
    keys = sorted(grid)
    return [replace(base, **dict(zip(keys, combo)))
            for combo in itertools.product(*(grid[k] for k in keys))]


def _tie_key(hp):
    depth = math.inf if hp.max_depth is None else hp.max_depth
    return (hp.n_trees, depth)


def grid_search_cv(data, grid=DEFAULT_GRID, folds=5, base=ForestParams(), seed=0):
    """Return (best params, table rows) maximising mean validation AUC."""
    candidates = expand_grid(grid, base) if isinstance(grid, dict) else list(grid)
    if not candidates:
        raise ValueError("empty hyperparameter grid")
    n = data.X.shape[0]
    if n < folds:
        raise ValueError("fewer rows than folds")
    fold = stratified_folds(data.y, folds, seed)
    table = []
    for hp in candidates:
        aucs = []
        for f in range(folds):
            tr, va = np.flatnonzero(fold != f), np.flatnonzero(fold == f)
            yv = data.y[va]
            if np.unique(yv).size < 2 or np.unique(data.y[tr]).size < 2:
                raise ValueError(f"fold {f} holds a single class; stratification failed")
            model = fit_forest(data.rows(tr), hp)
            aucs.append(auc_score(yv, predict_proba(model, data.rows(va))))
        table.append({"params": hp, "fold_auc": aucs, "mean_auc": float(np.mean(aucs)),
                      "std_auc": float(np.std(aucs))})
    best = max(table, key=lambda r: (r["mean_auc"], tuple(-v for v in _tie_key(r["params"]))))
    return best["params"], table


def write_cv_table(table, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        nf = len(table[0]["fold_auc"]) if table else 0
        w.writerow(["n_trees", "max_depth", "min_samples_leaf", "class_weight"]
                   + [f"fold{i}_auc" for i in range(nf)] + ["mean_auc", "std_auc"])
        for r in table:
            p = r["params"]
            w.writerow([p.n_trees, "none" if p.max_depth is None else p.max_depth,
                        p.min_samples_leaf, p.class_weight or "none"]
                       + [repr(a) for a in r["fold_auc"]] + [repr(r["mean_auc"]), repr(r["std_auc"])])


# --------------------------------------------------------------------------
# model file

MAGIC = b"FRST"
_NODE = np.dtype([("feature", "<i8"), ("threshold", "<f8"), ("left", "<i8"), ("right", "<i8"),
                  ("n0", "<i8"), ("n1", "<i8"), ("decrease", "<f8")])


def save(model, path):
    tree0 = model.trees[0] if model.trees else None
    header = {"params": asdict(model.params), "features": model.feature_names,
              "n_trees": len(model.trees),
              "class_weights": [tree0.w0, tree0.w1] if tree0 else [1.0, 1.0]}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in model.trees:
            rec = np.empty(t.feature.size, dtype=_NODE)
            for name in _NODE.names:
                rec[name] = getattr(t, name)
            fh.write(struct.pack("<Q", rec.size))
            fh.write(rec.tobytes())


def load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a forest model file")
    (hlen,) = struct.unpack_from("<Q", blob, 4)
    header = json.loads(blob[12:12 + hlen])
    off = 12 + hlen
    w0, w1 = header["class_weights"]
    trees = []
    for _ in range(header["n_trees"]):
        (m,) = struct.unpack_from("<Q", blob, off)
        off += 8
        rec = np.frombuffer(blob, dtype=_NODE, count=m, offset=off)
        off += rec.nbytes
        trees.append(Tree(*(np.ascontiguousarray(rec[name]).astype(
            np.int64 if rec.dtype[name].kind == "i" else np.float64) for name in _NODE.names),
            w0=w0, w1=w1))
    return ForestModel(ForestParams(**header["params"]), header["features"], trees)

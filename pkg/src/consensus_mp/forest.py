"""Regression forests that map contexts to consensus messages.

Each tree routes a tree-feature vector ``t`` to a leaf holding a linear model
``mean = [r, 1] @ W`` over regression features ``r``. The emitted message has
that mean and the leaf's spread as covariance; trees are combined by moment
averaging.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .expfam import Gaussian, MvGaussian, moment_average

log = logging.getLogger(__name__)

LEAF = -1


class ForestError(ValueError):
    pass


@dataclass
class ForestConfig:
    n_trees: int = 8
    max_depth: int = 12
    min_leaf: int = 10
    n_candidates: int = 64
    ridge: float = 1e-6
    prune: float = 1e-4
    bootstrap: bool = True
    # fraction of candidates drawn as pixel-pair equality tests
    pair_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ForestError("need at least one tree")
        if self.min_leaf < 1 or self.n_candidates < 1 or self.max_depth < 0:
            raise ForestError("invalid forest configuration")

    @classmethod
    def from_dict(cls, d):
        keys = {"treeCount": "n_trees", "maxDepth": "max_depth", "minLeafCount": "min_leaf",
                "candidates": "n_candidates"}
        return cls(**{keys.get(k, k): v for k, v in d.items()})


@dataclass(frozen=True)
class Split:
    """Threshold test ``t[feature] <= threshold`` or pair test ``|t[i] - t[j]| <= tol``."""
    feature: int
    threshold: float
    pair: int = -1

    def goes_left(self, T):
        if self.pair >= 0:
            return np.abs(T[..., self.feature] - T[..., self.pair]) <= self.threshold
        return T[..., self.feature] <= self.threshold

    def to_dict(self):
        d = {"feature": self.feature, "threshold": self.threshold}
        if self.pair >= 0:
            d["pair"] = self.pair
        return d


@dataclass
class LeafModel:
    W: np.ndarray
    residual_cov: np.ndarray
    count: int
    # mean covariance of the oracle messages that reached the leaf
    oracle_cov: np.ndarray = None

    def predict_mean(self, R):
        return np.hstack([R, np.ones((R.shape[0], 1))]) @ self.W

    @property
    def cov(self):
        if self.oracle_cov is None:
            return self.residual_cov
        return self.residual_cov + self.oracle_cov

    def to_dict(self):
        d = {"W": self.W.tolist(), "residualCovariance": self.residual_cov.tolist(),
             "count": int(self.count)}
        if self.oracle_cov is not None:
            d["oracleCovariance"] = self.oracle_cov.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        oc = d.get("oracleCovariance")
        return cls(np.array(d["W"], dtype=float), np.array(d["residualCovariance"], dtype=float),
                   int(d["count"]), None if oc is None else np.array(oc, dtype=float))


@dataclass
class Tree:
    # nodes[k] = (split, left, right); children >= 0 are nodes, < 0 are ~leaf
    nodes: list = field(default_factory=list)
    leaves: list = field(default_factory=list)
    root: int = LEAF
    degenerate: bool = False

    def leaf_index(self, t):
        k = self.root
        while k >= 0:
            split, left, right = self.nodes[k]
            k = left if split.goes_left(t) else right
        return ~k

    def leaf_indices(self, T):
        out = np.empty(T.shape[0], dtype=int)
        for n in range(T.shape[0]):
            out[n] = self.leaf_index(T[n])
        return out

    def depth(self):
        def rec(k):
            if k < 0:
                return 0
            _, l, r = self.nodes[k]
            return 1 + max(rec(l), rec(r))
        return rec(self.root)

    def to_dict(self):
        return {"root": self.root,
                "nodes": [{**s.to_dict(), "left": l, "right": r} for s, l, r in self.nodes],
                "leaves": [leaf.to_dict() for leaf in self.leaves],
                "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d):
        nodes = [(Split(n["feature"], n["threshold"], n.get("pair", -1)), n["left"], n["right"])
                 for n in d["nodes"]]
        return cls(nodes, [LeafModel.from_dict(x) for x in d["leaves"]], d["root"],
                   d.get("degenerate", False))


# -- fitting ---------------------------------------------------------------

def _design(R):
    return np.hstack([R, np.ones((R.shape[0], 1))])


# iterated-Tikhonov refinement steps after the plain ridge solve
RIDGE_REFINE = 2


def fit_leaf(X, Y, ridge):
    """Ridge least squares ``Y ~ X W``; X already carries the bias column.

    A couple of refinement steps remove the ridge bias along well-determined
    directions while near-null directions stay damped.
    """
    A = X.T @ X + ridge * np.eye(X.shape[1])
    cho = scipy.linalg.cho_factor(A)
    W = scipy.linalg.cho_solve(cho, X.T @ Y)
    for _ in range(RIDGE_REFINE):
        W = W + scipy.linalg.cho_solve(cho, X.T @ (Y - X @ W))
    return W


def fit_residual(X, Y, ridge):
    """Summed squared residual E(S, W) of the ridge fit."""
    W = fit_leaf(X, Y, ridge)
    res = Y - X @ W
    return float(np.sum(res * res))


def split_objective(X, Y, left, ridge):
    """I = -E(left) - E(right)."""
    return -fit_residual(X[left], Y[left], ridge) - fit_residual(X[~left], Y[~left], ridge)


def sample_candidates(T, n, rng, pair_block=None, pair_fraction=0.5):
    """Random tests with thresholds at empirical quantiles of the node data."""
    d = T.shape[1]
    out = []
    for _ in range(n):
        u = rng.uniform(0.02, 0.98)
        if pair_block is not None and rng.random() < pair_fraction:
            lo, hi = pair_block
            i, j = rng.choice(np.arange(lo, hi), size=2, replace=False)
            diff = np.abs(T[:, i] - T[:, j])
            out.append(Split(int(i), float(np.quantile(diff, u)), int(j)))
        else:
            f = int(rng.integers(d))
            out.append(Split(f, float(np.quantile(T[:, f], u))))
    return out


def best_split(T, X, Y, candidates, min_leaf, ridge):
    """Index and objective of the best admissible candidate, or (None, None).

    Candidates whose children hold fewer than ``min_leaf`` examples are
    discarded; ties go to the lowest index.
    """
    best, best_i = None, None
    for i, c in enumerate(candidates):
        left = c.goes_left(T)
        nl = int(left.sum())
        if nl < min_leaf or len(left) - nl < min_leaf:
            continue
        score = split_objective(X, Y, left, ridge)
        if best is None or score > best:
            best, best_i = score, i
    return best_i, best


def _make_leaf(X, Y, OC, cfg):
    W = fit_leaf(X, Y, cfg.ridge)
    if cfg.prune > 0:
        W[np.abs(W) < cfg.prune] = 0.0
    res = Y - X @ W
    cov = res.T @ res / X.shape[0]
    cov = 0.5 * (cov + cov.T)
    oc = None if OC is None else OC.mean(axis=0)
    return LeafModel(W, cov, X.shape[0], oc)


def train_tree(T, R, Y, cfg, rng, OC=None, pair_block=None, record=None):
    """Greedy depth-first tree growth.

    record: optional list receiving ``(T, X, Y, candidates, chosen)`` for every
    internal node, so tests can re-check the split choice exhaustively.
    """
    X = _design(R)
    tree = Tree()
    if np.all(T == T[0]):
        tree.degenerate = True
        log.warning("all tree features identical; single-leaf tree")

    def grow(idx, depth):
        n = len(idx)
        if depth >= cfg.max_depth or n < 2 * cfg.min_leaf or tree.degenerate:
            return leaf(idx)
        Tn, Xn, Yn = T[idx], X[idx], Y[idx]
        cands = sample_candidates(Tn, cfg.n_candidates, rng, pair_block, cfg.pair_fraction)
        i, _ = best_split(Tn, Xn, Yn, cands, cfg.min_leaf, cfg.ridge)
        if i is None:
            return leaf(idx)
        if record is not None:
            record.append((Tn, Xn, Yn, cands, i))
        split = cands[i]
        left = split.goes_left(Tn)
        k = len(tree.nodes)
        tree.nodes.append(None)
        lk = grow(idx[left], depth + 1)
        rk = grow(idx[~left], depth + 1)
        tree.nodes[k] = (split, lk, rk)
        return k

    def leaf(idx):
        tree.leaves.append(_make_leaf(X[idx], Y[idx], None if OC is None else OC[idx], cfg))
        return ~(len(tree.leaves) - 1)

    tree.root = grow(np.arange(T.shape[0]), 0)
    return tree


# -- forest ----------------------------------------------------------------

class Forest:
    def __init__(self, trees, output_family, output_dim, feature_dims, config=None):
        self.trees = trees
        self.output_family = output_family
        self.output_dim = output_dim
        self.feature_dims = tuple(feature_dims)
        self.config = config or ForestConfig()

    @property
    def degenerate(self):
        return any(t.degenerate for t in self.trees)

    def _check(self, T, R):
        if T.shape[1] != self.feature_dims[0] or R.shape[1] != self.feature_dims[1]:
            raise ForestError(f"feature dims {(T.shape[1], R.shape[1])} != {self.feature_dims}")

    def tree_outputs(self, T, R):
        """Per-tree (means, covs) arrays of shape (trees, n, d) and (trees, n, d, d)."""
        T = np.atleast_2d(np.asarray(T, dtype=float))
        R = np.atleast_2d(np.asarray(R, dtype=float))
        self._check(T, R)
        n, d = T.shape[0], self.output_dim
        means = np.empty((len(self.trees), n, d))
        covs = np.empty((len(self.trees), n, d, d))
        X = _design(R)
        for k, tree in enumerate(self.trees):
            li = tree.leaf_indices(T)
            for leaf_i in np.unique(li):
                rows = li == leaf_i
                leaf = tree.leaves[leaf_i]
                means[k, rows] = X[rows] @ leaf.W
                covs[k, rows] = leaf.cov
        return means, covs

    def predict_many(self, T, R):
        """Moment-averaged messages, one per row of T and R."""
        means, covs = self.tree_outputs(T, R)
        ok = np.isfinite(means).all(axis=2) & np.isfinite(covs).all(axis=(2, 3))
        out = []
        for n in range(means.shape[1]):
            good = ok[:, n]
            if not good.any():
                raise ForestError("every tree produced a non-finite output")
            if not good.all():
                log.warning("%d trees excluded for non-finite output", int((~good).sum()))
            mu = means[good, n]
            second = covs[good, n] + np.einsum("ki,kj->kij", mu, mu)
            m = mu.mean(axis=0)
            S = second.mean(axis=0) - np.outer(m, m)
            out.append(self._message(m, S))
        return out

    def predict(self, t, r):
        return self.predict_many(np.atleast_2d(t), np.atleast_2d(r))[0]

    def _message(self, mean, cov):
        if self.output_family == "gaussian":
            return Gaussian.from_mean_var(float(mean[0]), max(float(cov[0, 0]), 0.0))
        return MvGaussian.from_mean_cov(mean, 0.5 * (cov + cov.T))

    def tree_messages(self, t, r):
        """Individual tree messages (used to cross-check moment averaging)."""
        means, covs = self.tree_outputs(np.atleast_2d(t), np.atleast_2d(r))
        msgs = [self._message(means[k, 0], covs[k, 0]) for k in range(len(self.trees))]
        return msgs, moment_average(msgs)

    def to_dict(self):
        return {"outputFamily": self.output_family, "outputDim": self.output_dim,
                "featureDims": list(self.feature_dims), "treeCount": len(self.trees),
                "maxDepth": self.config.max_depth, "config": asdict(self.config),
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d):
        return cls([Tree.from_dict(t) for t in d["trees"]], d["outputFamily"], d["outputDim"],
                   d["featureDims"], ForestConfig(**d.get("config", {})))

    def dumps(self):
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, s):
        return cls.from_dict(json.loads(s))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read())


def train_forest(T, R, Y, cfg=None, *, output_family=None, OC=None, pair_block=None,
                 record=None):
    """Train a forest on feature matrices.

    T: (n, dt) tree features; R: (n, dr) regression features; Y: (n, d) target
    means; OC: optional (n, d, d) oracle covariances averaged into the leaves.
    """
    cfg = cfg or ForestConfig()
    T = np.asarray(T, dtype=float)
    R = np.asarray(R, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = T.shape[0]
    if n < 2 * cfg.min_leaf:
        raise ForestError(f"need at least {2 * cfg.min_leaf} examples, got {n}")
    if R.shape[0] != n or Y.shape[0] != n:
        raise ForestError("feature and target counts differ")
    if not (np.isfinite(T).all() and np.isfinite(R).all() and np.isfinite(Y).all()):
        raise ForestError("non-finite training features or targets")
    if output_family is None:
        output_family = "gaussian" if Y.shape[1] == 1 else "mvgaussian"
    rng = np.random.default_rng(cfg.seed)
    trees = []
    for _ in range(cfg.n_trees):
        idx = rng.integers(0, n, n) if cfg.bootstrap else np.arange(n)
        oc = None if OC is None else OC[idx]
        trees.append(train_tree(T[idx], R[idx], Y[idx], cfg, rng, oc, pair_block, record))
    return Forest(trees, output_family, Y.shape[1], (T.shape[1], R.shape[1]), cfg)


def forest_rmse(forest, T, R, Y):
    means = np.array([np.atleast_1d(m.mean) for m in forest.predict_many(T, R)])
    return math.sqrt(float(np.mean((means - np.asarray(Y).reshape(means.shape)) ** 2)))

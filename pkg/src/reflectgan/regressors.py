"""SOC regressors: linear regression, KNN, CART tree, random forest and a
small MLP, all behind ``fit(X, y)`` / ``predict(X)``."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import neighbors as nn_search, nn
from .errors import ConfigError, DataError, TrainingError

log = logging.getLogger(__name__)

MODEL_KINDS = ("lr", "knn", "dtree", "rforest", "mlp")
DUMP_VERSION = "v1"


def _check_xy(X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("feature matrix contains non-finite values")
    if y is None:
        return X
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise DataError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
    if not np.all(np.isfinite(y)):
        raise DataError("targets contain non-finite values")
    return X, y


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        return cls(mean, np.where(std > 0, std, 1.0))

    def transform(self, X):
        return (X - self.mean) / self.scale


def _fmt(values) -> str:
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


class LinearRegression:
    """Least squares on standardized features with a tiny ridge for conditioning."""

    kind = "lr"

    def __init__(self, standardize: bool = True, ridge: float = 1e-10):
        self.standardize = standardize
        self.ridge = ridge

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        n, p = X.shape
        std = X.std(axis=0)
        self.keep_ = np.flatnonzero(std > 0)
        if self.keep_.size < p:
            warnings.warn(f"dropping {p - self.keep_.size} zero-variance feature(s)", stacklevel=2)
        Xk = X[:, self.keep_]
        mean = Xk.mean(axis=0)
        scale = std[self.keep_] if self.standardize else np.ones(self.keep_.size)
        Z = (Xk - mean) / scale
        ridge = self.ridge
        if n <= self.keep_.size:
            ridge = max(ridge, 1e-6)
            log.warning("linear regression with %d rows and %d features: ridge %g engaged", n, Z.shape[1], ridge)
        ybar = y.mean()
        A = Z.T @ Z + ridge * n * np.eye(Z.shape[1])
        beta = np.linalg.solve(A, Z.T @ (y - ybar)) if Z.shape[1] else np.zeros(0)
        coef = np.zeros(p)
        coef[self.keep_] = beta / scale
        self.coef_ = coef
        self.intercept_ = float(ybar - coef[self.keep_] @ mean)
        return self

    def predict(self, X):
        return _check_xy(X) @ self.coef_ + self.intercept_

    def dump(self) -> str:
        return (f"reflectgan-model {DUMP_VERSION} lr\n"
                f"intercept {format(self.intercept_, '.17g')}\ncoef {_fmt(self.coef_)}\n")


class KNNRegressor:
    """Mean target of the k nearest training rows (exact Euclidean order);
    equal distances go to the lower training index."""

    kind = "knn"

    def __init__(self, k: int = 5, standardize: bool = True):
        self.k = k
        self.standardize = standardize

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        if self.k < 1 or self.k > X.shape[0]:
            raise ConfigError(f"k={self.k} needs 1 <= k <= {X.shape[0]} training rows")
        self.scaler_ = Standardizer.fit(X) if self.standardize else None
        self.X_ = self.scaler_.transform(X) if self.scaler_ else X
        self.y_ = y
        return self

    def neighbors(self, X) -> np.ndarray:
        X = _check_xy(X)
        if self.scaler_:
            X = self.scaler_.transform(X)
        return nn_search.nearest(self.X_, X, self.k)[0]

    def predict(self, X):
        return self.y_[self.neighbors(X)].mean(axis=1)

    def dump(self) -> str:
        return (f"reflectgan-model {DUMP_VERSION} knn\nk {self.k}\n"
                f"training_rows {self.X_.shape[0]} features {self.X_.shape[1]}\n")


LEAF = -1


class DecisionTree:
    """CART regression tree.

    Splits minimize the summed squared error of the two children over all
    candidate features and midpoints between consecutive distinct values.
    Ties go to the lowest feature index, then the lowest threshold. Rows
    with ``x <= threshold`` go left. With ``max_features`` set, each split
    scans features in a random order until that many non-constant ones
    have been evaluated.
    """

    kind = "dtree"

    def __init__(self, max_depth: int | None = None, min_leaf: int = 1,
                 max_features: int | None = None, seed: int = 42):
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.max_features = max_features
        self.seed = seed

    def fit(self, X, y, rng: np.random.Generator | None = None):
        X, y = _check_xy(X, y)
        if X.shape[0] < 1:
            raise DataError("cannot fit a tree on zero rows")
        self.n_features_ = X.shape[1]
        self._rng = rng if rng is not None else np.random.default_rng(self.seed)
        self.feature_, self.threshold_, self.left_, self.right_, self.value_ = [], [], [], [], []
        # explicit stack in preorder: (rows, depth, parent, is_left)
        stack = [(np.arange(X.shape[0]), 0, -1, False)]
        while stack:
            rows, depth, parent, is_left = stack.pop()
            node = len(self.value_)
            if parent >= 0:
                (self.left_ if is_left else self.right_)[parent] = node
            ys = y[rows]
            self.value_.append(float(ys.mean()))
            self.feature_.append(LEAF)
            self.threshold_.append(0.0)
            self.left_.append(LEAF)
            self.right_.append(LEAF)
            if self.max_depth is not None and depth >= self.max_depth:
                continue
            split = self._best_split(X[rows], ys)
            if split is None:
                continue
            f, thr = split
            go_left = X[rows, f] <= thr
            self.feature_[node] = f
            self.threshold_[node] = thr
            stack.append((rows[~go_left], depth + 1, node, False))
            stack.append((rows[go_left], depth + 1, node, True))
        for name in ("feature_", "left_", "right_"):
            setattr(self, name, np.array(getattr(self, name), dtype=np.int64))
        self.threshold_ = np.array(self.threshold_)
        self.value_ = np.array(self.value_)
        del self._rng
        return self

    def _candidate_features(self, Xn):
        p = Xn.shape[1]
        if self.max_features is None or self.max_features >= p:
            return np.arange(p)
        order = self._rng.permutation(p)
        nonconst = Xn.max(axis=0) > Xn.min(axis=0)
        picked = []
        for f in order:
            if nonconst[f]:
                picked.append(f)
                if len(picked) == self.max_features:
                    break
        return np.sort(np.array(picked, dtype=np.int64))

    def _best_split(self, Xn, yn):
        m = yn.shape[0]
        if m < 2 * self.min_leaf:
            return None
        node_sse = float(((yn - yn.mean()) ** 2).sum())
        if node_sse <= 0.0:
            return None
        feats = self._candidate_features(Xn)
        if feats.size == 0:
            return None
        Xf = Xn[:, feats]
        order = np.argsort(Xf, axis=0, kind="stable")
        xs = np.take_along_axis(Xf, order, axis=0)
        ys = yn[order]
        ys = ys - yn.mean()
        csum = np.cumsum(ys, axis=0)[:-1]
        csq = np.cumsum(ys * ys, axis=0)[:-1]
        tot, totsq = ys.sum(axis=0), (ys * ys).sum(axis=0)
        nl = np.arange(1, m, dtype=np.float64)[:, None]
        nr = m - nl
        sse = (csq - csum**2 / nl) + ((totsq - csq) - (tot - csum) ** 2 / nr)
        valid = xs[1:] > xs[:-1]
        if self.min_leaf > 1:
            valid &= (nl >= self.min_leaf) & (nr >= self.min_leaf)
        if not valid.any():
            return None
        sse = np.where(valid, sse, np.inf)
        best = sse.min()
        if not best < node_sse * (1 - 1e-12):
            return None
        # near-ties within rounding noise resolve to the lowest feature, then threshold
        tied = sse <= best + 1e-9 * node_sse
        thr = np.where(tied, (xs[1:] + xs[:-1]) / 2, np.inf)
        col = int(np.flatnonzero(tied.any(axis=0))[0])
        pos = int(np.argmin(thr[:, col]))
        return int(feats[col]), float(thr[pos, col])

    def apply(self, X) -> np.ndarray:
        X = _check_xy(X)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature_[node] != LEAF
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature_[nd]] <= self.threshold_[nd]
            node[idx] = np.where(go_left, self.left_[nd], self.right_[nd])
            active[idx] = self.feature_[node[idx]] != LEAF
        return node

    def predict(self, X):
        return self.value_[self.apply(X)]

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.feature_ == LEAF))

    def dump(self) -> str:
        lines = [f"reflectgan-model {DUMP_VERSION} dtree", f"nodes {len(self.value_)}"]
        for i in range(len(self.value_)):
            if self.feature_[i] == LEAF:
                lines.append(f"leaf {format(self.value_[i], '.17g')}")
            else:
                lines.append(f"split {self.feature_[i]} {format(self.threshold_[i], '.17g')}")
        return "\n".join(lines) + "\n"


class RandomForest:
    """Bagged CART trees; tree ``i`` draws from ``default_rng(seed + i)``."""

    kind = "rforest"

    def __init__(self, n_trees: int = 100, seed: int = 42, max_features: int | str | None = "third",
                 bootstrap: bool = True, min_leaf: int = 1, max_depth: int | None = None):
        self.n_trees = n_trees
        self.seed = seed
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.min_leaf = min_leaf
        self.max_depth = max_depth

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        if X.shape[0] < 2:
            raise DataError("random forest needs at least 2 rows")
        p = X.shape[1]
        mf = max(1, p // 3) if self.max_features == "third" else self.max_features
        self.trees_ = []
        for i in range(self.n_trees):
            rng = np.random.default_rng(self.seed + i)
            rows = rng.integers(0, X.shape[0], X.shape[0]) if self.bootstrap else np.arange(X.shape[0])
            tree = DecisionTree(self.max_depth, self.min_leaf, mf)
            self.trees_.append(tree.fit(X[rows], y[rows], rng=rng))
        return self

    def predict(self, X):
        X = _check_xy(X)
        total = np.zeros(X.shape[0])
        for tree in self.trees_:
            total += tree.predict(X)
        return total / len(self.trees_)

    def dump(self) -> str:
        head = f"reflectgan-model {DUMP_VERSION} rforest\ntrees {len(self.trees_)}\n"
        return head + "".join(t.dump().split("\n", 1)[1] for t in self.trees_)


class MLPRegressor:
    """in -> 128 ReLU dropout -> 64 ReLU dropout -> 1, MSE loss, Adam.

    Features and targets are standardized on the training set.
    """

    kind = "mlp"

    def __init__(self, hidden=(128, 64), dropout: float = 0.3, batch_size: int = 32,
                 epochs: int = 100, lr: float = 1e-3, seed: int = 42):
        self.hidden = tuple(hidden)
        self.dropout = dropout
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    def _build(self, n_in: int, rng) -> nn.Sequential:
        layers = []
        prev = n_in
        for i, h in enumerate(self.hidden):
            layers += [(f"linear{i}", nn.Linear(prev, h, rng)),
                       (f"act{i}", nn.Activation("relu")),
                       (f"drop{i}", nn.Dropout(self.dropout, rng))]
            prev = h
        layers.append(("head", nn.Linear(prev, 1, rng, init="xavier")))
        return nn.Sequential(*layers)

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        if self.epochs > 0 and X.shape[0] < self.batch_size:
            raise DataError(f"MLP needs at least batch_size={self.batch_size} rows, got {X.shape[0]}")
        rng = np.random.default_rng(self.seed)
        self.scaler_ = Standardizer.fit(X)
        self.y_mean_ = float(y.mean())
        self.y_scale_ = float(y.std()) or 1.0
        Z = self.scaler_.transform(X)
        t = ((y - self.y_mean_) / self.y_scale_)[:, None]
        self.net_ = self._build(X.shape[1], rng)
        opt = nn.Adam(self.net_.parameters(), lr=self.lr)
        self.loss_history_ = []
        for epoch in range(self.epochs):
            self.net_.train()
            order = rng.permutation(X.shape[0])
            total = 0.0
            for b, s in enumerate(range(0, X.shape[0], self.batch_size)):
                idx = order[s:s + self.batch_size]
                self.net_.zero_grad()
                loss, grad = nn.mse_loss(self.net_.forward(Z[idx]), t[idx])
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite MLP loss at epoch {epoch} batch {b}")
                self.net_.backward(grad)
                opt.step()
                total += loss * idx.size
            self.loss_history_.append(total / X.shape[0])
        self.net_.eval()
        return self

    def predict(self, X):
        Z = self.scaler_.transform(_check_xy(X))
        return self.net_.forward(Z)[:, 0] * self.y_scale_ + self.y_mean_

    def dump(self) -> str:
        lines = [f"reflectgan-model {DUMP_VERSION} mlp",
                 f"y_mean {format(self.y_mean_, '.17g')} y_scale {format(self.y_scale_, '.17g')}",
                 f"x_mean {_fmt(self.scaler_.mean)}", f"x_scale {_fmt(self.scaler_.scale)}"]
        for name, p, _ in self.net_.named_parameters():
            lines.append(f"{name} {' '.join(map(str, p.shape))} {_fmt(p)}")
        return "\n".join(lines) + "\n"


@dataclass
class FitSpec:
    kind: str
    standardize: bool = True
    seed: int = 42
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")


def make_model(spec: FitSpec):
    spec.validate()
    p = dict(spec.params)
    if spec.kind == "lr":
        return LinearRegression(standardize=spec.standardize, **p)
    if spec.kind == "knn":
        return KNNRegressor(standardize=spec.standardize, **p)
    if spec.kind == "dtree":
        return DecisionTree(seed=spec.seed, **p)
    if spec.kind == "rforest":
        return RandomForest(seed=spec.seed, **p)
    return MLPRegressor(seed=spec.seed, **p)


def fit_model(spec: FitSpec, X, y):
    return make_model(spec).fit(X, y)


def fit_lr(X, y, standardize: bool = True):
    return LinearRegression(standardize).fit(X, y)


def fit_knn(X, y, k: int = 5, standardize: bool = True):
    return KNNRegressor(k, standardize).fit(X, y)


def fit_dtree(X, y, max_depth: int | None = None, min_leaf: int = 1):
    return DecisionTree(max_depth, min_leaf).fit(X, y)


def fit_rforest(X, y, n_trees: int = 100, seed: int = 42, bootstrap: bool = True, max_features="third"):
    return RandomForest(n_trees, seed, max_features, bootstrap).fit(X, y)


def fit_mlp(X, y, spec: FitSpec | None = None):
    spec = spec or FitSpec("mlp")
    return MLPRegressor(seed=spec.seed, **spec.params).fit(X, y)

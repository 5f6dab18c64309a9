"""Second-order gradient tree boosting with exact greedy split search.

Trees are stored as flat node arrays. A node is a leaf when ``left[i] == -1``;
otherwise rows with ``x[feature] < threshold`` go left, rows with a missing
value follow ``default_left``. Leaf weights are the raw optimum
``-G / (H + lambda)``; shrinkage lives on the ensemble.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Callable, Iterator, Sequence

import numpy as np


class LossKind(str, Enum):
    SQUARED_ERROR = "squared_error"
    LOGISTIC = "logistic"


class DegenerateNodeError(ValueError):
    """Raised when a node's hessian sum plus lambda is not positive."""


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_value(loss: LossKind, y, margin) -> np.ndarray:
    """Per-instance loss at a raw margin."""
    y = np.asarray(y, dtype=float)
    margin = np.asarray(margin, dtype=float)
    if LossKind(loss) is LossKind.SQUARED_ERROR:
        return 0.5 * (y - margin) ** 2
    # log(1 + e^m) - y*m, stable form
    return np.logaddexp(0.0, margin) - y * margin


def grad_hess(loss: LossKind, y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    """First and second derivative of the loss w.r.t. the prediction.

    For the logistic loss ``y_hat`` is the raw margin and ``y`` is in {0, 1}.
    Accepts scalars or arrays; always returns float arrays.
    """
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if LossKind(loss) is LossKind.SQUARED_ERROR:
        return y_hat - y, np.ones(np.broadcast(y, y_hat).shape)
    p = sigmoid(np.atleast_1d(y_hat)).reshape(y_hat.shape)
    return p - y, p * (1.0 - p)


def leaf_weight(G: float, H: float, reg_lambda: float) -> float:
    denom = H + reg_lambda
    if denom <= 0:
        raise DegenerateNodeError(f"H + lambda = {denom!r} must be positive")
    return -G / denom


def split_gain(G_L: float, H_L: float, G_R: float, H_R: float,
               reg_lambda: float, gamma: float) -> float:
    """Regularized loss reduction of splitting a node into (L, R)."""
    G, H = G_L + G_R, H_L + H_R
    return 0.5 * (G_L * G_L / (H_L + reg_lambda)
                  + G_R * G_R / (H_R + reg_lambda)
                  - G * G / (H + reg_lambda)) - gamma


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.0
    reg_lambda: float = 1.0
    max_depth: int = 3
    subsample: float = 1.0
    learning_rate: float = 0.1
    min_child_weight: float = 1.0
    colsample_bytree: float = 1.0
    rounds: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")
        if int(self.max_depth) != self.max_depth or self.max_depth < 1:
            raise ValueError("max_depth must be an integer >= 1")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must be in (0, 1]")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.min_child_weight < 0:
            raise ValueError("min_child_weight must be >= 0")
        if not 0 < self.colsample_bytree <= 1:
            raise ValueError("colsample_bytree must be in (0, 1]")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        object.__setattr__(self, "max_depth", int(self.max_depth))
        object.__setattr__(self, "rounds", int(self.rounds))

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    default_left: bool
    gain: float
    G_L: float
    H_L: float
    G_R: float
    H_R: float


_TIE_RTOL = 1e-11


def _midpoint(a: float, b: float) -> float:
    mid = (a + b) / 2.0
    # adjacent doubles can round the midpoint down onto a, which would break x < t routing
    return b if mid <= a else mid


def _scan_sorted(vals, g_s, h_s, features, G, H, reg_lambda, gamma,
                 min_child_weight) -> SplitCandidate | None:
    """Best split over column-wise sorted node data.

    ``vals``, ``g_s``, ``h_s`` are (n, F) with each column sorted ascending by
    the feature value and missing (NaN) rows last. ``features`` maps columns to
    global feature indices and must be increasing.
    """
    n = vals.shape[0]
    if n < 2:
        return None
    valid = ~np.isnan(vals)
    boundary = valid[1:] & (vals[:-1] < vals[1:])
    if not boundary.any():
        return None
    g_v = np.where(valid, g_s, 0.0)
    h_v = np.where(valid, h_s, 0.0)
    cg = np.cumsum(g_v, axis=0)
    ch = np.cumsum(h_v, axis=0)
    G_nm, H_nm = cg[-1], ch[-1]
    cg, ch = cg[:-1], ch[:-1]
    has_missing = ~valid[-1]
    # summed directly so that columns without missing rows get exact zeros
    G_miss = np.where(valid, 0.0, g_s).sum(axis=0) if has_missing.any() else np.zeros(vals.shape[1])
    H_miss = np.where(valid, 0.0, h_s).sum(axis=0) if has_missing.any() else np.zeros(vals.shape[1])
    GR_nm = G_nm - cg
    HR_nm = H_nm - ch

    def children(col, row, default_left):
        if default_left:
            return (cg[row, col] + G_miss[col], ch[row, col] + H_miss[col],
                    GR_nm[row, col], HR_nm[row, col])
        return (cg[row, col], ch[row, col],
                GR_nm[row, col] + G_miss[col], HR_nm[row, col] + H_miss[col])

    n_feat = vals.shape[1]
    scores = np.full((2, n - 1, n_feat), -np.inf)
    for side, default_left in enumerate((True, False)):
        if default_left:
            cols = np.arange(n_feat)
        else:
            # without missing rows both sides are identical and the tie goes left
            cols = np.nonzero(has_missing)[0]
            if cols.size == 0:
                continue
        GL, HL, GR, HR = children(cols, slice(None), default_left)
        ok = boundary[:, cols] & (HL >= min_child_weight) & (HR >= min_child_weight)
        if reg_lambda <= 0:
            ok &= (HL + reg_lambda > 0) & (HR + reg_lambda > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            score = GL * GL / (HL + reg_lambda) + GR * GR / (HR + reg_lambda)
        scores[side][:, cols] = np.where(ok, score, -np.inf)

    top = scores.max()
    if top == -np.inf:
        return None
    # the same partition reached through different features or summation
    # orders differs only by rounding; treat those as ties
    side, row, col = np.nonzero(scores >= top - _TIE_RTOL * abs(top))
    pick = np.lexsort((side, row, col))[0]
    side, row, col = int(side[pick]), int(row[pick]), int(col[pick])
    default_left = side == 0
    value = split_gain(*(float(v) for v in children(col, row, default_left)),
                       reg_lambda, gamma)
    if not value > 0:
        return None
    G_L, H_L, G_R, H_R = (float(v) for v in children(col, row, default_left))
    return SplitCandidate(
        feature=int(features[col]),
        threshold=_midpoint(float(vals[row, col]), float(vals[row + 1, col])),
        default_left=default_left, gain=value,
        G_L=G_L, H_L=H_L, G_R=G_R, H_R=H_R)


def find_best_split(X, grad, hess, *, reg_lambda: float = 1.0, gamma: float = 0.0,
                    min_child_weight: float = 0.0,
                    features: Sequence[int] | None = None) -> SplitCandidate | None:
    """Exact greedy search over every (feature, threshold, missing side).

    ``X`` holds the node's rows only (NaN = missing). Returns ``None`` when no
    candidate has positive gain. Ties go to the lower feature index, then the
    lower threshold, then missing-goes-left.
    """
    X = np.asarray(X, dtype=float)
    grad = np.asarray(grad, dtype=float)
    hess = np.asarray(hess, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("node must contain at least one row")
    feats = np.arange(X.shape[1]) if features is None else np.sort(np.asarray(features, dtype=int))
    sub = X[:, feats]
    order = np.argsort(sub, axis=0, kind="stable")
    vals = np.take_along_axis(sub, order, axis=0)
    return _scan_sorted(vals, grad[order], hess[order], feats,
                        float(grad.sum()), float(hess.sum()),
                        reg_lambda, gamma, min_child_weight)


@dataclass
class Tree:
    """One regression tree in flat-array form."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    default_left: list[bool] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    weight: list[float] = field(default_factory=list)
    gain: list[float] = field(default_factory=list)
    sum_grad: list[float] = field(default_factory=list)
    sum_hess: list[float] = field(default_factory=list)

    def _add(self, **kw) -> int:
        for name in ("feature", "threshold", "default_left", "left", "right",
                     "weight", "gain", "sum_grad", "sum_hess"):
            getattr(self, name).append(kw[name])
        return len(self.feature) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, i: int) -> bool:
        return self.left[i] < 0

    @property
    def leaves(self) -> list[int]:
        return [i for i in range(self.n_nodes) if self.left[i] < 0]

    @property
    def n_splits(self) -> int:
        return self.n_nodes - len(self.leaves)

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        X = np.asarray(X, dtype=float)
        feature = np.asarray(self.feature, dtype=int)
        threshold = np.asarray(self.threshold, dtype=float)
        default_left = np.asarray(self.default_left, dtype=bool)
        left = np.asarray(self.left, dtype=int)
        right = np.asarray(self.right, dtype=int)
        node = np.zeros(X.shape[0], dtype=int)
        while True:
            active = np.nonzero(left[node] >= 0)[0]
            if active.size == 0:
                return node
            nd = node[active]
            x = X[active, feature[nd]]
            go_left = np.where(np.isnan(x), default_left[nd], x < threshold[nd])
            node[active] = np.where(go_left, left[nd], right[nd])

    def predict(self, X) -> np.ndarray:
        return np.asarray(self.weight, dtype=float)[self.apply(X)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(**{k: list(v) for k, v in d.items()})


def grow_tree(X, grad, hess, config: TrainConfig, rows=None, columns=None,
              sorted_index=None) -> Tree:
    """Grow one tree on ``rows`` using only ``columns``.

    ``sorted_index`` is an optional column-wise argsort of the full ``X`` (NaN
    last) reused across rounds. Children inherit their sorted order from the
    parent through a stable partition, so each level costs O(rows * columns).
    """
    X = np.asarray(X, dtype=float)
    grad = np.asarray(grad, dtype=float)
    hess = np.asarray(hess, dtype=float)
    n, n_feat = X.shape
    rows = np.arange(n) if rows is None else np.asarray(rows, dtype=int)
    if rows.size == 0:
        raise ValueError("cannot grow a tree on zero rows")
    columns = np.arange(n_feat) if columns is None else np.sort(np.asarray(columns, dtype=int))
    if sorted_index is None:
        sorted_index = np.argsort(X, axis=0, kind="stable")

    member = np.zeros(n, dtype=bool)
    member[rows] = True
    order = sorted_index[:, columns]
    keep = member[order]
    root = order.T[keep.T].reshape(columns.size, rows.size).T

    tree = Tree()
    lam, gamma, mcw = config.reg_lambda, config.gamma, config.min_child_weight
    col_grid = columns[None, :]

    def build(S: np.ndarray, depth: int) -> int:
        node_rows = S[:, 0]
        G = float(grad[node_rows].sum())
        H = float(hess[node_rows].sum())
        cand = None
        if depth < config.max_depth and S.shape[0] > 1:
            cand = _scan_sorted(X[S, col_grid], grad[S], hess[S], columns,
                                G, H, lam, gamma, mcw)
        if cand is None:
            # H + lambda can only vanish with lambda = 0 and saturated hessians
            w = leaf_weight(G, H, lam) if H + lam > 0 else 0.0
            return tree._add(feature=-1, threshold=math.nan, default_left=True,
                             left=-1, right=-1, weight=w, gain=0.0,
                             sum_grad=G, sum_hess=H)
        idx = tree._add(feature=cand.feature, threshold=cand.threshold,
                        default_left=cand.default_left, left=-1, right=-1,
                        weight=0.0, gain=cand.gain, sum_grad=G, sum_hess=H)
        x = X[node_rows, cand.feature]
        go_left = np.where(np.isnan(x), cand.default_left, x < cand.threshold)
        row_left = np.zeros(n, dtype=bool)
        row_left[node_rows[go_left]] = True
        mask = row_left[S]
        n_left = int(go_left.sum())
        S_left = S.T[mask.T].reshape(S.shape[1], n_left).T
        S_right = S.T[~mask.T].reshape(S.shape[1], S.shape[0] - n_left).T
        tree.left[idx] = build(S_left, depth + 1)
        tree.right[idx] = build(S_right, depth + 1)
        return idx

    build(root, 0)
    return tree


@dataclass
class Ensemble:
    trees: list[Tree]
    learning_rate: float
    base_score: float
    loss: LossKind
    feature_names: list[str]

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"row width {X.shape[1]} != ensemble width {self.n_features}")
        return X

    def predict_margin(self, X, n_trees: int | None = None) -> np.ndarray:
        X = self._check(X)
        total = np.zeros(X.shape[0])
        for tree in self.trees[:n_trees]:
            total += tree.predict(X)
        return self.base_score + self.learning_rate * total

    def staged_margins(self, X) -> Iterator[np.ndarray]:
        """Margins after 0, 1, ..., K trees."""
        X = self._check(X)
        total = np.zeros(X.shape[0])
        yield self.base_score + self.learning_rate * total
        for tree in self.trees:
            total += tree.predict(X)
            yield self.base_score + self.learning_rate * total

    def predict(self, X) -> np.ndarray:
        """Regression value, or probability of the positive class for logistic loss."""
        margin = self.predict_margin(X)
        if self.loss is LossKind.LOGISTIC:
            return sigmoid(margin)
        return margin

    def to_dict(self) -> dict:
        return {
            "format": "pead-ensemble/1",
            "loss": self.loss.value,
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        if d.get("format") != "pead-ensemble/1":
            raise ValueError(f"unsupported model format: {d.get('format')!r}")
        return cls(trees=[Tree.from_dict(t) for t in d["trees"]],
                   learning_rate=float(d["learning_rate"]),
                   base_score=float(d["base_score"]),
                   loss=LossKind(d["loss"]),
                   feature_names=list(d["feature_names"]))

    def save(self, path, meta: dict | None = None) -> None:
        doc = self.to_dict()
        if meta:
            doc["meta"] = meta
        with open(path, "w", encoding="utf-8") as fh:
            # repr-based float output round-trips exactly
            json.dump(doc, fh, indent=1, allow_nan=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Ensemble":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def base_score_for(loss: LossKind, y) -> float:
    y = np.asarray(y, dtype=float)
    if LossKind(loss) is LossKind.SQUARED_ERROR:
        # a constant target is returned as-is; the mean could be off by an ulp
        if y.size and y.min() == y.max():
            return float(y[0])
        return float(np.mean(y))
    p = float(np.clip(np.mean(y), 1e-6, 1 - 1e-6))
    return math.log(p / (1 - p))


@dataclass(frozen=True)
class RoundInfo:
    round: int
    tree: Tree
    rows: np.ndarray
    columns: np.ndarray
    grad: np.ndarray
    hess: np.ndarray


def train(X, y, config: TrainConfig, loss: LossKind = LossKind.SQUARED_ERROR,
          feature_names: Sequence[str] | None = None,
          callback: Callable[[RoundInfo], None] | None = None) -> Ensemble:
    """Fit ``config.rounds`` trees by second-order boosting."""
    if feature_names is None:
        feature_names = getattr(X, "columns", None)
    X = np.asarray(getattr(X, "values", X), dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("training matrix is empty")
    if y.shape != (X.shape[0],):
        raise ValueError(f"{y.shape[0] if y.ndim else 0} labels for {X.shape[0]} rows")
    if not np.all(np.isfinite(y)):
        raise ValueError("labels must be finite")
    loss = LossKind(loss)
    if loss is LossKind.LOGISTIC and not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic labels must be 0 or 1")
    n, n_feat = X.shape
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(n_feat)]
    if len(names) != n_feat:
        raise ValueError("feature_names length does not match matrix width")

    base = base_score_for(loss, y)
    ens = Ensemble(trees=[], learning_rate=config.learning_rate, base_score=base,
                   loss=loss, feature_names=names)
    if config.rounds == 0:
        return ens

    rng = np.random.default_rng(config.seed)
    sorted_index = np.argsort(X, axis=0, kind="stable")
    n_rows = max(1, int(round(config.subsample * n)))
    n_cols = max(1, int(round(config.colsample_bytree * n_feat)))
    margin = np.full(n, base)
    for k in range(config.rounds):
        g, h = grad_hess(loss, y, margin)
        rows = np.arange(n) if n_rows == n else np.sort(rng.choice(n, n_rows, replace=False))
        cols = (np.arange(n_feat) if n_cols == n_feat
                else np.sort(rng.choice(n_feat, n_cols, replace=False)))
        tree = grow_tree(X, g, h, config, rows, cols, sorted_index)
        ens.trees.append(tree)
        margin = margin + config.learning_rate * tree.predict(X)
        if callback is not None:
            callback(RoundInfo(k, tree, rows, cols, g, h))
    return ens


def regularized_objective(ensemble: Ensemble, X, y, config: TrainConfig,
                          n_trees: int | None = None) -> float:
    """Training loss plus tree penalties after the first ``n_trees`` trees.

    Each tree is penalized as it enters the model, i.e. with its leaf scores
    scaled by the learning rate: gamma * T + lambda/2 * sum((eta * w)^2).
    """
    y = np.asarray(y, dtype=float)
    margin = ensemble.predict_margin(X, n_trees)
    total = float(np.sum(loss_value(ensemble.loss, y, margin)))
    eta = ensemble.learning_rate
    for tree in ensemble.trees[:n_trees]:
        w = np.asarray(tree.weight)[tree.leaves]
        total += config.gamma * w.size + 0.5 * config.reg_lambda * float(np.sum((eta * w) ** 2))
    return total


def objective_trace(ensemble: Ensemble, X, y, config: TrainConfig) -> list[float]:
    """``regularized_objective`` after 0, 1, ..., K trees in one pass."""
    y = np.asarray(y, dtype=float)
    eta = ensemble.learning_rate
    penalty = 0.0
    trace = []
    for k, margin in enumerate(ensemble.staged_margins(X)):
        if k:
            tree = ensemble.trees[k - 1]
            w = np.asarray(tree.weight)[tree.leaves]
            penalty += config.gamma * w.size + 0.5 * config.reg_lambda * float(np.sum((eta * w) ** 2))
        trace.append(float(np.sum(loss_value(ensemble.loss, y, margin))) + penalty)
    return trace


def importance(ensemble: Ensemble) -> dict[str, float]:
    """Total split gain per feature, summed over all trees."""
    totals = {name: 0.0 for name in ensemble.feature_names}
    for tree in ensemble.trees:
        for i in range(tree.n_nodes):
            if tree.left[i] >= 0:
                totals[ensemble.feature_names[tree.feature[i]]] += tree.gain[i]
    return totals


def predict(ensemble: Ensemble, rows) -> np.ndarray:
    return ensemble.predict(rows)

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pead.gbt import (
    DegenerateNodeError, Ensemble, LossKind, Tree, TrainConfig, find_best_split,
    grad_hess, grow_tree, importance, leaf_weight, loss_value, predict,
    regularized_objective, split_gain, train,
)
from oracles import split_oracle


def random_node(seed, max_rows=64, max_feat=8):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_rows + 1))
    f = int(rng.integers(1, max_feat + 1))
    # coarse integer grid forces duplicate values, NaNs exercise the missing side
    X = rng.integers(0, 6, size=(n, f)).astype(float) + rng.choice([0.0, 0.5], size=(n, f))
    X[rng.random((n, f)) < 0.15] = np.nan
    g = rng.normal(size=n)
    h = rng.uniform(0.05, 1.0, size=n)
    lam = float(rng.choice([0.0, 0.5, 1.0, 3.0]))
    gamma = float(rng.choice([0.0, 0.0, 0.1, 0.5]))
    mcw = float(rng.choice([0.0, 0.5, 2.0]))
    return X, g, h, lam, gamma, mcw


# -- grad / hess ---------------------------------------------------------------

@pytest.mark.parametrize("loss,y,yhat,expected", [
    (LossKind.SQUARED_ERROR, 1.0, 1.0, (0.0, 1.0)),
    (LossKind.LOGISTIC, 1.0, 0.0, (-0.5, 0.25)),
    (LossKind.SQUARED_ERROR, 2.0, 5.0, (3.0, 1.0)),
])
def test_grad_hess_examples(loss, y, yhat, expected):
    g, h = grad_hess(loss, y, yhat)
    assert (float(g), float(h)) == expected


def test_logistic_hessian_bounded():
    z = np.linspace(-30, 30, 1001)
    _, h = grad_hess(LossKind.LOGISTIC, np.ones_like(z), z)
    assert np.all(h > 0) and np.all(h <= 0.25)


@given(st.floats(-8, 8), st.sampled_from([0.0, 1.0]))
def test_grad_hess_matches_finite_differences(m, y):
    eps = 1e-4
    for loss in LossKind:
        f = lambda z: float(loss_value(loss, y, z))
        g, h = grad_hess(loss, y, m)
        assert abs(float(g) - (f(m + eps) - f(m - eps)) / (2 * eps)) < 1e-6
        assert abs(float(h) - (f(m + eps) - 2 * f(m) + f(m - eps)) / eps ** 2) < 1e-4


# -- leaf weight and gain ------------------------------------------------------

@pytest.mark.parametrize("G,H,lam,w", [(0, 5, 1, 0.0), (-3, 2, 1, 1.0), (1, 0, 1, -1.0)])
def test_leaf_weight_examples(G, H, lam, w):
    assert leaf_weight(G, H, lam) == w


def test_leaf_weight_degenerate():
    with pytest.raises(DegenerateNodeError):
        leaf_weight(1.0, 0.0, 0.0)


@pytest.mark.parametrize("args,gain", [
    ((2, 2, 2, 2, 0, 0), 0.0),
    ((1, 1, -1, 1, 1, 0), 0.5),
    ((1, 1, -1, 1, 1, 0.6), -0.1),
])
def test_split_gain_examples(args, gain):
    assert split_gain(*args) == pytest.approx(gain, abs=1e-15)


@given(st.floats(-10, 10), st.floats(0.01, 10), st.floats(-10, 10), st.floats(0.01, 10),
       st.floats(0, 5), st.floats(0, 2))
def test_gain_is_objective_decrease(GL, HL, GR, HR, lam, gamma):
    def score(G, H):
        return -0.5 * G * G / (H + lam)
    gain = split_gain(GL, HL, GR, HR, lam, gamma)
    structure_drop = score(GL + GR, HL + HR) - (score(GL, HL) + score(GR, HR))
    assert structure_drop == pytest.approx(gain + gamma, abs=1e-10)
    # with the gamma * T leaf penalty the split adds one leaf
    full_drop = (score(GL + GR, HL + HR) + gamma) - (score(GL, HL) + score(GR, HR) + 2 * gamma)
    assert full_drop == pytest.approx(gain, abs=1e-10)


# -- split search --------------------------------------------------------------

def test_single_distinct_value_has_no_split():
    X = np.full((5, 1), 3.0)
    assert find_best_split(X, np.arange(5.0), np.ones(5), reg_lambda=1.0) is None


def test_huge_gamma_prunes():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    g = np.array([-1.0, -1.0, 1.0, 1.0])
    assert find_best_split(X, g, np.ones(4), reg_lambda=1.0) is not None
    assert find_best_split(X, g, np.ones(4), reg_lambda=1.0, gamma=1e6) is None


def test_six_row_two_feature_node_matches_oracle():
    X = np.array([[1.0, 5.0], [2.0, np.nan], [3.0, 4.0],
                  [np.nan, 3.0], [5.0, 2.0], [6.0, 1.0]])
    g = np.array([-2.0, -1.5, 0.3, 1.0, 2.0, 2.5])
    h = np.ones(6)
    cand = find_best_split(X, g, h, reg_lambda=1.0)
    ref = split_oracle(X.tolist(), g.tolist(), h.tolist(), 1.0, 0.0, 0.0)
    assert (cand.feature, cand.threshold, cand.default_left) == ref[1:]
    assert abs(cand.gain - ref[0]) < 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_split_matches_oracle_property(seed):
    X, g, h, lam, gamma, mcw = random_node(seed)
    cand = find_best_split(X, g, h, reg_lambda=lam, gamma=gamma, min_child_weight=mcw)
    ref = split_oracle(X.tolist(), g.tolist(), h.tolist(), lam, gamma, mcw)
    if ref is None:
        assert cand is None
    else:
        assert (cand.feature, cand.threshold, cand.default_left) == ref[1:]
        assert abs(cand.gain - ref[0]) < 1e-10


def test_missing_goes_to_better_side():
    # the missing rows look like the high-x rows, so they should go right
    X = np.array([[0.0], [1.0], [2.0], [3.0], [np.nan], [np.nan]])
    g = np.array([-1.0, -1.0, 1.0, 1.0, 1.0, 1.0])
    cand = find_best_split(X, g, np.ones(6), reg_lambda=0.0)
    assert cand.threshold == 1.5 and cand.default_left is False


def test_min_child_weight_excludes_small_children():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    g = np.array([-5.0, 1.0, 1.0, 1.0])
    cand = find_best_split(X, g, np.ones(4), reg_lambda=0.0, min_child_weight=2.0)
    assert cand.threshold == 1.5


# -- tree growth ---------------------------------------------------------------

def test_depth_one_gives_stump():
    X = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([-1.0, -1.0, 1.0, 1.0])
    g, h = grad_hess(LossKind.SQUARED_ERROR, y, np.zeros(4))
    tree = grow_tree(X, g, h, TrainConfig(max_depth=1, reg_lambda=0.0, min_child_weight=0))
    assert tree.n_nodes == 3 and tree.n_splits == 1
    assert tree.threshold[0] == 0.0
    assert tree.predict(X).tolist() == y.tolist()


def test_identical_rows_give_leaf():
    X = np.ones((5, 3))
    g = np.array([1.0, -2.0, 0.5, 0.0, 3.0])
    tree = grow_tree(X, g, np.ones(5), TrainConfig(max_depth=4, reg_lambda=0.0))
    assert tree.n_nodes == 1
    assert tree.weight[0] == pytest.approx(-g.mean())


def test_pure_node_leaf_zeroes_residual():
    # h = 1 and lambda = 0 make the leaf weight the mean residual
    X = np.arange(6.0)[:, None]
    y = np.full(6, 2.5)
    ens = train(X, y, TrainConfig(rounds=1, learning_rate=1.0, reg_lambda=0.0))
    assert np.all(ens.predict(X) == 2.5)
    g, h = grad_hess(LossKind.SQUARED_ERROR, y, np.zeros(6))
    tree = grow_tree(X, g, h, TrainConfig(max_depth=3, reg_lambda=0.0))
    assert tree.n_nodes == 1 and tree.weight[0] == 2.5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_gamma_never_adds_splits(seed):
    X, g, h, lam, _, mcw = random_node(seed)
    counts = []
    for gamma in (0.0, 0.05, 0.2, 1.0, 5.0):
        cfg = TrainConfig(max_depth=4, reg_lambda=lam, gamma=gamma, min_child_weight=mcw)
        counts.append(grow_tree(X, g, h, cfg).n_splits)
    assert counts == sorted(counts, reverse=True)


def test_grow_tree_matches_direct_search_at_root():
    X, g, h, lam, gamma, mcw = random_node(7)
    cfg = TrainConfig(max_depth=1, reg_lambda=lam, gamma=gamma, min_child_weight=mcw)
    tree = grow_tree(X, g, h, cfg)
    cand = find_best_split(X, g, h, reg_lambda=lam, gamma=gamma, min_child_weight=mcw)
    if cand is None:
        assert tree.n_nodes == 1
    else:
        assert (tree.feature[0], tree.threshold[0], tree.default_left[0]) == (
            cand.feature, cand.threshold, cand.default_left)


# -- training ------------------------------------------------------------------

def test_noiseless_separable_target_is_fit():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(300, 3))
    y = np.where(X[:, 0] > 0, 1.0, -1.0)
    ens = train(X, y, TrainConfig(max_depth=2, rounds=50, learning_rate=0.3,
                                  reg_lambda=0.0, min_child_weight=0.0))
    assert np.mean((ens.predict(X) - y) ** 2) < 1e-6


def test_zero_rounds_predict_base_score():
    X = np.random.default_rng(0).normal(size=(10, 2))
    y = np.arange(10.0)
    ens = train(X, y, TrainConfig(rounds=0))
    assert ens.trees == []
    assert np.all(ens.predict(X) == 4.5)


def test_training_is_deterministic():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(120, 6))
    X[rng.random(X.shape) < 0.1] = np.nan
    y = (rng.random(120) < 0.5).astype(float)
    cfg = TrainConfig(rounds=20, subsample=0.7, colsample_bytree=0.5, seed=5)
    a = train(X, y, cfg, LossKind.LOGISTIC)
    b = train(X, y, cfg, LossKind.LOGISTIC)
    assert a.to_dict() == b.to_dict()


def test_train_rejects_bad_input():
    with pytest.raises(ValueError):
        train(np.empty((0, 3)), np.empty(0), TrainConfig())
    with pytest.raises(ValueError):
        train(np.ones((3, 2)), np.ones(2), TrainConfig())
    with pytest.raises(ValueError):
        train(np.ones((3, 2)), np.array([0.0, 1.0, 2.0]), TrainConfig(), LossKind.LOGISTIC)


@pytest.mark.parametrize("bad", [dict(gamma=-1), dict(max_depth=0), dict(subsample=0.0),
                                 dict(learning_rate=1.5), dict(colsample_bytree=2.0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_leaf_weights_match_instance_sets():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(80, 4))
    y = X[:, 0] * 2 + rng.normal(size=80)
    X[rng.random(X.shape) < 0.1] = np.nan
    cfg = TrainConfig(rounds=10, max_depth=3, subsample=0.8, colsample_bytree=0.75,
                      reg_lambda=0.7, seed=1)
    seen = []

    def check(info):
        leaf_of = info.tree.apply(X[info.rows])
        for leaf in info.tree.leaves:
            members = info.rows[leaf_of == leaf]
            w = -info.grad[members].sum() / (info.hess[members].sum() + cfg.reg_lambda)
            assert abs(info.tree.weight[leaf] - w) < 1e-10
        seen.append(info.round)

    train(X, y, cfg, callback=check)
    assert seen == list(range(10))


def test_objective_non_increasing_small():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(60, 3))
    y = np.sin(X[:, 0]) + 0.3 * rng.normal(size=60)
    cfg = TrainConfig(rounds=30, max_depth=2, learning_rate=0.3)
    ens = train(X, y, cfg)
    objs = [regularized_objective(ens, X, y, cfg, k) for k in range(31)]
    assert all(b <= a for a, b in zip(objs, objs[1:]))


# -- prediction ----------------------------------------------------------------

def stump(default_left=True):
    tree = Tree(feature=[0, -1, -1], threshold=[0.0, math.nan, math.nan],
                default_left=[default_left, True, True], left=[1, -1, -1],
                right=[2, -1, -1], weight=[0.0, -1.0, 1.0], gain=[0.5, 0.0, 0.0],
                sum_grad=[0.0, 0.0, 0.0], sum_hess=[0.0, 0.0, 0.0])
    return Ensemble([tree], 1.0, 0.25, LossKind.SQUARED_ERROR, ["a", "b"])


def test_predict_examples():
    empty = Ensemble([], 0.3, 0.5, LossKind.SQUARED_ERROR, ["a"])
    assert predict(empty, [7.0]).tolist() == [0.5]
    assert predict(stump(), [5.0, 0.0]).tolist() == [1.25]
    assert predict(stump(True), [math.nan, 0.0]).tolist() == [-0.75]
    assert predict(stump(False), [math.nan, 0.0]).tolist() == [1.25]


def test_predict_width_mismatch():
    with pytest.raises(ValueError):
        stump().predict(np.ones((2, 3)))


def test_logistic_predict_is_probability():
    ens = Ensemble([], 1.0, 0.0, LossKind.LOGISTIC, ["a"])
    assert ens.predict([[1.0]]).tolist() == [0.5]


# -- importance ----------------------------------------------------------------

def test_importance_examples():
    leaves = Ensemble([Tree(feature=[-1], threshold=[math.nan], default_left=[True],
                            left=[-1], right=[-1], weight=[1.0], gain=[0.0],
                            sum_grad=[0.0], sum_hess=[1.0])],
                      0.1, 0.0, LossKind.SQUARED_ERROR, ["a", "b"])
    assert importance(leaves) == {"a": 0.0, "b": 0.0}
    assert importance(stump()) == {"a": 0.5, "b": 0.0}
    two = stump()
    second = Tree.from_dict(two.trees[0].to_dict())
    second.gain[0] = 0.25
    two.trees.append(second)
    assert importance(two) == {"a": 0.75, "b": 0.0}


# -- serialization -------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    X = rng.normal(size=(100, 5))
    X[rng.random(X.shape) < 0.1] = np.nan
    y = rng.normal(size=100)
    ens = train(X, y, TrainConfig(rounds=15, max_depth=3, subsample=0.9, seed=2),
                feature_names=list("abcde"))
    path = tmp_path / "model.json"
    ens.save(path, meta={"seed": 2})
    loaded = Ensemble.load(path)
    rows = rng.normal(size=(200, 5))
    rows[rng.random(rows.shape) < 0.2] = np.nan
    assert np.array_equal(ens.predict(rows), loaded.predict(rows))
    assert json.loads(path.read_text())["meta"] == {"seed": 2}

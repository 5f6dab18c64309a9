"""Acceptance criteria 1-13, each at its stated tolerance.

Every test records one PASS/FAIL line through ``verdict``; the lines are
printed in the terminal summary (see conftest.py) and also when this file is
run directly with ``python tests/test_acceptance.py``.
"""

import math
import sys
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from pead.backtest import (
    Selector, direction_study, occurrence_study, portfolio_study, prepare_study,
    tactic_study, walk_forward_split,
)
from pead.features import FeatureSpec, build_matrix, winsorize
from pead.ga import Chromosome, GaConfig, Gene, SearchSpace, cv_fitness, run_ga
from pead.gbt import (
    Ensemble, LossKind, TrainConfig, find_best_split, grad_hess, loss_value,
    objective_trace, train,
)
from pead.synth import SynthConfig, generate_planted
from oracles import cv_oracle, split_oracle

RESULTS: dict[int, str] = {}

STUDY_CFG = TrainConfig(rounds=50, max_depth=3, learning_rate=0.3, subsample=0.8,
                        colsample_bytree=0.8)


def verdict(n: int, ok: bool, detail: str):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def random_node(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 65))
    f = int(rng.integers(1, 9))
    X = rng.integers(0, 6, size=(n, f)).astype(float) + rng.choice([0.0, 0.5], size=(n, f))
    X[rng.random((n, f)) < 0.15] = np.nan
    g = rng.normal(size=n)
    h = rng.uniform(0.05, 1.0, size=n)
    lam = float(rng.choice([0.0, 0.5, 1.0, 3.0]))
    gamma = float(rng.choice([0.0, 0.0, 0.1, 0.5]))
    mcw = float(rng.choice([0.0, 0.5, 2.0]))
    return X, g, h, lam, gamma, mcw


def test_c01_split_search_matches_exhaustive_enumeration():
    start = time.perf_counter()
    n_sets, mismatches, worst = 300, [], 0.0
    for seed in range(n_sets):
        X, g, h, lam, gamma, mcw = random_node(seed)
        got = find_best_split(X, g, h, reg_lambda=lam, gamma=gamma, min_child_weight=mcw)
        ref = split_oracle(X.tolist(), g.tolist(), h.tolist(), lam, gamma, mcw)
        if got is None or ref is None:
            if not (got is None and ref is None):
                mismatches.append(seed)
            continue
        worst = max(worst, abs(got.gain - ref[0]))
        same = (got.feature, got.threshold, got.default_left) == (ref[1], ref[2], ref[3])
        if not same or abs(got.gain - ref[0]) >= 1e-10:
            mismatches.append(seed)
    elapsed = time.perf_counter() - start
    verdict(1, not mismatches and elapsed < 30,
            f"{n_sets} datasets, {len(mismatches)} mismatches, max |dgain| {worst:.1e}, {elapsed:.1f}s")


def test_c02_leaf_weights_closed_form():
    worst, checked = 0.0, 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        n, f = int(rng.integers(30, 200)), int(rng.integers(1, 8))
        X = rng.normal(size=(n, f))
        loss = LossKind.LOGISTIC if seed % 2 else LossKind.SQUARED_ERROR
        y = X[:, 0] + rng.normal(size=n)
        if loss is LossKind.LOGISTIC:
            y = (y > 0).astype(float)
        X[rng.random(X.shape) < 0.1] = np.nan
        cfg = TrainConfig(rounds=int(rng.integers(1, 15)), max_depth=int(rng.integers(1, 6)),
                          reg_lambda=float(rng.uniform(0, 3)), gamma=float(rng.choice([0, 0.2])),
                          min_child_weight=float(rng.choice([0, 1])),
                          subsample=float(rng.choice([0.7, 1.0])),
                          colsample_bytree=float(rng.choice([0.6, 1.0])), seed=seed)

        def check(info):
            nonlocal worst, checked
            leaf_of = info.tree.apply(X[info.rows])
            for leaf in info.tree.leaves:
                members = info.rows[leaf_of == leaf]
                H = info.hess[members].sum()
                w = -info.grad[members].sum() / (H + cfg.reg_lambda) if H + cfg.reg_lambda > 0 else 0.0
                worst = max(worst, abs(info.tree.weight[leaf] - w))
                checked += 1

        train(X, y, cfg, loss, callback=check)
    verdict(2, worst < 1e-10, f"50 trainings, {checked} leaves, max |dw| {worst:.1e}")


def test_c03_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    eps = 1e-4
    worst_g = worst_h = 0.0
    for loss in LossKind:
        for _ in range(100):
            m = float(rng.uniform(-5, 5))
            y = float(rng.uniform(-5, 5)) if loss is LossKind.SQUARED_ERROR else float(rng.integers(0, 2))
            f = lambda z: float(loss_value(loss, y, z))
            g, h = grad_hess(loss, y, m)
            fd_g = (f(m + eps) - f(m - eps)) / (2 * eps)
            fd_h = (f(m + eps) - 2 * f(m) + f(m - eps)) / eps ** 2
            worst_g = max(worst_g, abs(float(g) - fd_g))
            worst_h = max(worst_h, abs(float(h) - fd_h))
    verdict(3, worst_g < 1e-6 and worst_h < 1e-4,
            f"200 points, max |dg| {worst_g:.1e}, max |dh| {worst_h:.1e}")


def test_c04_objective_monotone():
    # gamma = 0 and a learning rate inside the tuner's range; see the ledger
    failures = []
    for seed in range(20):
        rng = np.random.default_rng(400 + seed)
        n, f = int(rng.integers(100, 301)), int(rng.integers(2, 9))
        X = rng.normal(size=(n, f))
        X[rng.random(X.shape) < 0.05] = np.nan
        loss = LossKind.LOGISTIC if seed % 2 else LossKind.SQUARED_ERROR
        y = np.nan_to_num(np.sin(2 * X[:, 0]) + X[:, 1 % f]) + 0.3 * rng.normal(size=n)
        if loss is LossKind.LOGISTIC:
            y = (y > 0).astype(float)
        cfg = TrainConfig(rounds=200, max_depth=int(rng.integers(1, 5)),
                          learning_rate=float(rng.uniform(0.01, 0.3)),
                          reg_lambda=float(rng.uniform(0.5, 3)), gamma=0.0,
                          min_child_weight=float(rng.uniform(0, 2)), seed=seed)
        trace = objective_trace(train(X, y, cfg, loss), X, y, cfg)
        if any(b > a for a, b in zip(trace, trace[1:])):
            failures.append(seed)
    verdict(4, not failures, f"20 datasets x 200 rounds, {len(failures)} with an increase {failures}")


def test_c05_overfits_separable_target():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    X = rng.uniform(-1, 1, size=(300, 5))
    y = 2.0 * (X[:, 0] > 0) - 1.5 * (X[:, 1] > 0.3) + 0.5 * (X[:, 2] < -0.2)
    cfg = TrainConfig(rounds=200, max_depth=3, learning_rate=0.3)
    mse = float(np.mean((train(X, y, cfg).predict(X) - y) ** 2))
    elapsed = time.perf_counter() - start
    verdict(5, mse < 1e-6 and elapsed < 10, f"training MSE {mse:.2e}, {elapsed:.2f}s")


def _surrogate(seed):
    rng = np.random.default_rng(600 + seed)
    genes = (Gene("a", 0.0, 0.9, 0.1), Gene("b", 0, 9, 1), Gene("c", 1, 10, 1), Gene("d", 0.0, 4.5, 0.5))
    space = SearchSpace(genes)
    target = [g.value(int(rng.integers(g.size))) for g in genes]
    w = rng.uniform(0.5, 2.0, size=len(genes))

    def fitness(c):
        return float(sum(wi * (v - t) ** 2 for wi, v, t in zip(w, space.values(c).values(), target)))

    # exhaustive search over the full 10^4 lattice
    grids = np.meshgrid(*[np.array([g.value(i) for i in range(g.size)], dtype=float) for g in genes],
                        indexing="ij")
    total = sum(wi * (grid - t) ** 2 for wi, grid, t in zip(w, grids, target))
    best = Chromosome(tuple(int(i) for i in np.unravel_index(np.argmin(total), total.shape)))
    return space, fitness, best


def test_c06_ga_finds_lattice_optimum():
    # epsilon stop disabled (patience = budget); see the ledger for the stop-rule analysis
    hits = mono = 0
    for seed in range(100):
        space, fitness, best = _surrogate(seed)
        res = run_ga(space, GaConfig(seed=seed, max_generations=50, patience=50), fitness)
        hits += res.best == best
        mono += all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    verdict(6, hits >= 95 and mono == 100,
            f"optimum found {hits}/100, trace non-increasing {mono}/100 (space 10^4 points)")


def test_c07_cv_fitness_oracle():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(30, 4))
    y_reg = X[:, 0] - X[:, 2] + 0.2 * rng.normal(size=30)
    worst = 0.0
    for loss, y in ((LossKind.SQUARED_ERROR, y_reg), (LossKind.LOGISTIC, (y_reg > 0).astype(float))):
        cfg = TrainConfig(rounds=20, max_depth=2, subsample=0.8, colsample_bytree=0.75, seed=3)
        got = cv_fitness(X, y, cfg, k=5, loss=loss, seed=11)
        ref = cv_oracle(X, y, 5, 11, lambda a, b: train(np.array(a), np.array(b), cfg, loss),
                        lambda m, a: list(m.predict(np.array(a))), loss is LossKind.LOGISTIC)
        worst = max(worst, abs(got - ref))
    verdict(7, worst < 1e-12, f"30 rows, 5 folds, both losses, max |d| {worst:.1e}")


@pytest.fixture(scope="module")
def planted_t0():
    start = time.perf_counter()
    cfg = SynthConfig(n_companies=200, n_quarters=12, drift_timing="from-t0", seed=8)
    cfg = SynthConfig(**{**cfg.__dict__, "noise_std": 0.3 * cfg.signal_scale})
    data = prepare_study(generate_planted(cfg).raw)
    plan = walk_forward_split(data.events, Selector(year=2015))
    return data, plan, time.perf_counter() - start


def test_c08_planted_signal_recovery(planted_t0):
    data, plan, setup = planted_t0
    start = time.perf_counter()
    rep = direction_study(data, plan, STUDY_CFG, runs=5)
    ctrl = direction_study(data, plan, STUDY_CFG, runs=5, shuffle_labels=True)
    elapsed = setup + time.perf_counter() - start
    sigma = math.sqrt(0.25 / ctrl.n_test)
    ok = rep.mean >= 0.90 and abs(ctrl.mean - 0.5) <= 3 * sigma and elapsed < 120
    verdict(8, ok, f"accuracy {rep.mean:.4f} (test n={rep.n_test}), shuffled control "
                   f"{ctrl.mean:.4f} (3 sigma = {3 * sigma:.4f}), {elapsed:.1f}s")


def test_c09_portfolio_monotone(planted_t0):
    data, plan, _ = planted_t0
    ps = portfolio_study(data, plan, STUDY_CFG, window=100)
    order = sorted(range(len(ps.predicted)), key=lambda i: (-ps.predicted[i], ps.keys[i]))
    rank = np.empty(len(order))
    rank[order] = np.arange(1, len(order) + 1)
    rho = spearmanr(rank, ps.actual).statistic
    q = ps.quantiles
    verdict(9, rho <= -0.8 and q.top > q.average > q.bottom,
            f"spearman(rank, CAR) {rho:.3f}; top {q.top:+.4f} > mean {q.average:+.4f} > bottom {q.bottom:+.4f}")


def test_c10_tactic_differential():
    cfg = SynthConfig(n_companies=200, n_quarters=12, drift_timing="from-t1", seed=10)
    cfg = SynthConfig(**{**cfg.__dict__, "noise_std": 0.3 * cfg.signal_scale})
    data = prepare_study(generate_planted(cfg).raw)
    plan = walk_forward_split(data.events, Selector(year=2015))
    study = tactic_study(data, plan, STUDY_CFG, epsilon=0.0005, runs=3)
    identity = all(r.excluded + r.kept + r.filtered == r.population for r in study.reports)
    diff = study.inferred_accuracy - study.naive_accuracy
    r0 = study.reports[0]
    verdict(10, diff >= 0.05 and identity,
            f"inferred {study.inferred_accuracy:.4f} vs naive {study.naive_accuracy:.4f} "
            f"(+{100 * diff:.1f} pts); counts {r0.population} = {r0.excluded} + {r0.kept} + "
            f"{r0.filtered}, identity in all {len(study.reports)} runs: {identity}")


def test_c11_preprocessing_properties():
    rng = np.random.default_rng(11)
    bad_w = 0
    for _ in range(1000):
        v = rng.standard_t(2, size=int(rng.integers(1, 60))) * 10 ** rng.uniform(-3, 3)
        v[rng.random(v.size) < 0.1] = np.nan
        lo = float(rng.uniform(0, 0.3))
        hi = float(rng.uniform(0.7, 1))
        once = winsorize(v, lo, hi)
        ok = np.array_equal(winsorize(once, lo, hi), once, equal_nan=True)
        present = v[~np.isnan(v)]
        if present.size:
            kept = once[~np.isnan(once)]
            ok &= kept.min() >= present.min() and kept.max() <= present.max()
        ok &= np.array_equal(np.isnan(once), np.isnan(v))
        bad_w += not ok

    raw = generate_planted(SynthConfig(n_companies=30, n_quarters=10, seed=11)).raw
    spec = FeatureSpec()
    a, b = build_matrix(raw, spec), build_matrix(raw, spec)
    deterministic = a.keys == b.keys and a.values.tobytes() == b.values.tobytes()
    worst = 0.0
    companies = np.array([k[0] for k in a.keys])
    for name in spec.standardize_set:
        j = a.columns.index(name)
        for cid in np.unique(companies):
            col = a.values[companies == cid, j]
            col = col[~np.isnan(col)]
            if col.size == 0 or col.max() == col.min():
                continue
            worst = max(worst, abs(col.mean()), abs(col.std() - 1))
    verdict(11, bad_w == 0 and worst <= 1e-9 and deterministic,
            f"winsorize failures {bad_w}/1000; standardized moments max dev {worst:.1e}; "
            f"build_matrix bit-identical: {deterministic}")


def test_c12_occurrence_single_dominant_feature():
    data = prepare_study(generate_planted(SynthConfig(n_companies=60, n_quarters=8, seed=12)).raw)
    plan = walk_forward_split(data.events, Selector(year=2014))
    cfg = TrainConfig(rounds=20, max_depth=3, learning_rate=0.3, subsample=0.8)
    tab = occurrence_study(data, plan, cfg, runs=100)
    name, count = tab.positions[0][0]
    verdict(12, name == "EPS_EarningsSurprise" and count == 100,
            f"F1 = {name} in {count}/100 runs")


def test_c13_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    X = rng.normal(size=(400, 6))
    X[rng.random(X.shape) < 0.1] = np.nan
    y = (np.nan_to_num(X[:, 0]) + rng.normal(size=400) > 0).astype(float)
    ens = train(X, y, TrainConfig(rounds=40, max_depth=4, subsample=0.8, seed=1), LossKind.LOGISTIC)
    ens.save(tmp_path / "m.json")
    back = Ensemble.load(tmp_path / "m.json")
    rows = rng.normal(size=(1000, 6)) * 3
    rows[rng.random(rows.shape) < 0.15] = np.nan
    same = np.array_equal(ens.predict(rows), back.predict(rows))
    same_margin = np.array_equal(ens.predict_margin(rows), back.predict_margin(rows))
    verdict(13, same and same_margin, f"1000 rows, predictions bit-identical: {same and same_margin}")


if __name__ == "__main__":
    # the terminal summary hook in conftest.py prints the criterion lines
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

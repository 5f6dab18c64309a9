"""Walk-forward studies: direction accuracy, ranked portfolios, feature occurrence, delayed entry."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .features import FeatureMatrix, FeatureSpec, build_matrix
from .gbt import Ensemble, LossKind, TrainConfig, importance, train
from .market_data import CoverageError, EarningsEvent, RawDataset, event_car

logger = logging.getLogger(__name__)

DAY1_FEATURE = "Day1_Direction"


# -- data and splits -----------------------------------------------------------

@dataclass(frozen=True)
class Selector:
    year: int | None = None
    quarter: str | None = None        # fiscal quarter tag, e.g. 2018Q4
    date: dt.date | None = None       # announcement date
    sector: str | None = None

    def __post_init__(self):
        if self.year is None and self.quarter is None and self.date is None:
            raise ValueError("selector needs a year, quarter or date")

    def in_period(self, e: EarningsEvent) -> bool:
        return ((self.year is None or e.announce_date.year == self.year)
                and (self.quarter is None or e.fiscal_quarter == self.quarter)
                and (self.date is None or e.announce_date == self.date))

    def in_sector(self, e: EarningsEvent) -> bool:
        return self.sector is None or e.sector == self.sector

    def describe(self) -> str:
        parts = [f"{k}={v}" for k, v in
                 (("year", self.year), ("quarter", self.quarter), ("date", self.date), ("sector", self.sector))
                 if v is not None]
        return ",".join(parts)


@dataclass(frozen=True)
class SplitPlan:
    selector: Selector
    train: tuple[int, ...]
    test: tuple[int, ...]


def walk_forward_split(events: Sequence[EarningsEvent], selector: Selector) -> SplitPlan:
    """Test = events in the selected period; train = events announced strictly before it."""
    pool = [i for i, e in enumerate(events) if selector.in_sector(e)]
    test = [i for i in pool if selector.in_period(events[i])]
    if not test:
        raise ValueError(f"selector {selector.describe()} matches no events")
    cutoff = min(events[i].announce_date for i in test)
    train_rows = [i for i in pool if events[i].announce_date < cutoff]
    return SplitPlan(selector, tuple(train_rows), tuple(test))


@dataclass
class StudyData:
    """Feature rows aligned with their events and CAR labels."""
    matrix: FeatureMatrix
    events: list[EarningsEvent]
    car: np.ndarray      # t0 -> t0+H
    day1: np.ndarray     # t0 -> t1
    late: np.ndarray     # t1 -> t0+H
    horizon: int = 30
    dropped_coverage: int = 0

    @property
    def direction(self) -> np.ndarray:
        return np.where(self.car >= 0, 1, -1)

    @property
    def late_direction(self) -> np.ndarray:
        return np.where(self.late >= 0, 1, -1)


def prepare_study(raw: RawDataset, spec: FeatureSpec = FeatureSpec(), horizon: int = 30,
                  matrix: FeatureMatrix | None = None) -> StudyData:
    """Attach CAR labels to feature rows; rows without a full price window are dropped."""
    fm = matrix if matrix is not None else build_matrix(raw, spec)
    by_key = {e.key: e for e in raw.events}
    keep, events, car, day1, late = [], [], [], [], []
    for i, key in enumerate(fm.keys):
        e = by_key[key]
        try:
            c = event_car(raw, e, 0, horizon).car
            d1 = event_car(raw, e, 0, 1).car
            lt = event_car(raw, e, 1, horizon - 1).car
        except (CoverageError, IndexError) as exc:
            logger.debug("no label for %s: %s", key, exc)
            continue
        keep.append(i)
        events.append(e)
        car.append(c)
        day1.append(d1)
        late.append(lt)
    return StudyData(fm.take(keep), events, np.array(car), np.array(day1), np.array(late),
                     horizon, len(fm.keys) - len(keep))


def _map_runs(fn: Callable[[int], object], runs: int, threads: int) -> list:
    if threads > 1 and runs > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(runs)))
    return [fn(r) for r in range(runs)]


def _targets(data: StudyData, loss: LossKind) -> np.ndarray:
    if LossKind(loss) is LossKind.LOGISTIC:
        return (data.car >= 0).astype(float)
    return data.car.copy()


def _predicted_direction(model: Ensemble, X, loss: LossKind) -> np.ndarray:
    p = model.predict(X)
    cut = 0.5 if LossKind(loss) is LossKind.LOGISTIC else 0.0
    return np.where(p >= cut, 1, -1)


def _require_train(plan: SplitPlan):
    if not plan.train:
        raise ValueError(f"no training events before the test period ({plan.selector.describe()})")


def _comments(lines: Sequence[str]) -> str:
    return "".join(f"# {ln}\n" for ln in lines)


# -- direction -----------------------------------------------------------------

@dataclass
class DirectionReport:
    accuracies: list[float]
    n_train: int
    n_test: int
    shuffled: bool = False

    @property
    def runs(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return math.fsum(self.accuracies) / self.runs

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def min(self) -> float:
        return min(self.accuracies)

    @property
    def max(self) -> float:
        return max(self.accuracies)

    def to_csv(self, path, header_comments: Sequence[str] = ()) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(_comments(header_comments))
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "accuracy"])
            for r, a in enumerate(self.accuracies):
                w.writerow([r, repr(a)])

    def summary(self) -> str:
        tag = " (labels shuffled)" if self.shuffled else ""
        return (f"direction study{tag}: {self.runs} runs, train {self.n_train}, test {self.n_test}\n"
                f"  accuracy mean {self.mean:.4f} std {self.std:.4f} "
                f"min {self.min:.4f} max {self.max:.4f}")


def direction_study(data: StudyData, plan: SplitPlan, config: TrainConfig, runs: int = 100,
                    loss: LossKind = LossKind.LOGISTIC, threads: int = 1,
                    shuffle_labels: bool = False) -> DirectionReport:
    """Retrain ``runs`` times (seed = config.seed + run) and score test-set direction accuracy."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    _require_train(plan)
    tr, te = np.array(plan.train), np.array(plan.test)
    X = data.matrix.values
    y_all = _targets(data, loss)
    truth = data.direction[te]

    def one(r: int) -> float:
        cfg = config.replace(seed=config.seed + r)
        y = y_all[tr]
        if shuffle_labels:
            y = np.random.default_rng([cfg.seed, 1]).permutation(y)
        model = train(X[tr], y, cfg, loss, feature_names=data.matrix.columns)
        return float(np.mean(_predicted_direction(model, X[te], loss) == truth))

    return DirectionReport(_map_runs(one, runs, threads), len(tr), len(te), shuffle_labels)


# -- portfolios ----------------------------------------------------------------

def _rank_order(predicted, keys=None) -> np.ndarray:
    """Indices by predicted value descending, ties by key (or position) ascending."""
    predicted = np.asarray(predicted, dtype=float)
    if keys is None:
        tie = np.arange(predicted.size)
    else:
        tie = np.empty(len(keys), dtype=int)
        tie[sorted(range(len(keys)), key=lambda i: keys[i])] = np.arange(len(keys))
    return np.lexsort((tie, -predicted))


@dataclass
class PortfolioCurve:
    window: int
    points: list[tuple[int, float]]    # (1-based start rank, mean actual CAR)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.points])

    def to_csv(self, path, header_comments: Sequence[str] = ()) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(_comments(header_comments))
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "return"])
            for r, v in self.points:
                w.writerow([r, repr(v)])

    def summary(self) -> str:
        v = self.values
        return (f"moving portfolio (w={self.window}): {len(v)} points, "
                f"first {v[0]:+.4%}, last {v[-1]:+.4%}")


def moving_portfolio(predicted, actual, window: int, keys=None) -> PortfolioCurve:
    actual = np.asarray(actual, dtype=float)
    if len(predicted) != actual.size:
        raise ValueError("predicted and actual differ in length")
    if window < 1 or actual.size < window:
        raise ValueError(f"need at least window={window} events, got {actual.size}")
    ranked = actual[_rank_order(predicted, keys)].tolist()
    points = [(i + 1, math.fsum(ranked[i:i + window]) / window)
              for i in range(len(ranked) - window + 1)]
    return PortfolioCurve(window, points)


@dataclass
class QuantileReport:
    window: int
    top: float
    average: float
    bottom: float
    n: int

    def to_csv(self, path, header_comments: Sequence[str] = ()) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(_comments(header_comments))
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["window", "n", "top", "average", "bottom"])
            w.writerow([self.window, self.n, repr(self.top), repr(self.average), repr(self.bottom)])

    def summary(self) -> str:
        return (f"quantiles (w={self.window}, n={self.n}): top {self.top:+.4%}, "
                f"average {self.average:+.4%}, bottom {self.bottom:+.4%}")


def quantile_stats(predicted, actual, window: int, keys=None) -> QuantileReport:
    actual = np.asarray(actual, dtype=float)
    if len(predicted) != actual.size:
        raise ValueError("predicted and actual differ in length")
    if window < 1 or actual.size < 2 * window:
        raise ValueError(f"need at least 2*window={2 * window} events, got {actual.size}")
    ranked = actual[_rank_order(predicted, keys)].tolist()
    return QuantileReport(window, math.fsum(ranked[:window]) / window,
                          math.fsum(ranked) / len(ranked), math.fsum(ranked[-window:]) / window,
                          len(ranked))


def rank_correlation(predicted, actual) -> float:
    """Spearman correlation between descending predicted rank and actual value."""
    order = _rank_order(predicted)
    rank = np.empty(order.size)
    rank[order] = np.arange(1, order.size + 1)
    a = np.asarray(actual, dtype=float)
    a_rank = np.empty(a.size)
    a_rank[np.argsort(a, kind="stable")] = np.arange(1, a.size + 1)
    return float(np.corrcoef(rank, a_rank)[0, 1])


@dataclass
class PortfolioStudy:
    curve: PortfolioCurve
    quantiles: QuantileReport
    keys: list[tuple[str, str]]
    predicted: np.ndarray
    actual: np.ndarray

    @property
    def rank_correlation(self) -> float:
        return rank_correlation(self.predicted, self.actual)

    def write_predictions(self, path, header_comments: Sequence[str] = ()) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(_comments(header_comments))
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["company_id", "fiscal_quarter", "predicted_car", "actual_car"])
            for k, p, a in zip(self.keys, self.predicted, self.actual):
                w.writerow([*k, repr(float(p)), repr(float(a))])


def portfolio_study(data: StudyData, plan: SplitPlan, config: TrainConfig, window: int = 100,
                    loss: LossKind = LossKind.SQUARED_ERROR) -> PortfolioStudy:
    """Regress CAR on the train side, rank the test side by prediction."""
    _require_train(plan)
    tr, te = np.array(plan.train), np.array(plan.test)
    X = data.matrix.values
    model = train(X[tr], _targets(data, loss)[tr], config, loss, feature_names=data.matrix.columns)
    pred = model.predict(X[te])
    keys = [data.matrix.keys[i] for i in te]
    actual = data.car[te]
    return PortfolioStudy(moving_portfolio(pred, actual, window, keys),
                          quantile_stats(pred, actual, window, keys), keys, pred, actual)


# -- occurrence ----------------------------------------------------------------

@dataclass
class OccurrenceTable:
    runs: int
    top_k: int
    positions: list[list[tuple[str, int]]]     # per rank F1..Fk: up to 3 (name, count)

    def to_csv(self, path, header_comments: Sequence[str] = ()) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(_comments(header_comments))
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["position", "place", "feature", "count"])
            for p, entries in enumerate(self.positions):
                for place, (name, count) in enumerate(entries):
                    w.writerow([f"F{p + 1}", place + 1, name, count])

    def summary(self) -> str:
        lines = [f"feature occurrence over {self.runs} runs"]
        for p, entries in enumerate(self.positions):
            cells = ", ".join(f"{n} ({c})" for n, c in entries)
            lines.append(f"  F{p + 1}: {cells}")
        return "\n".join(lines)


def ranked_features(model: Ensemble) -> list[str]:
    imp = importance(model)
    return [n for n, _ in sorted(imp.items(), key=lambda kv: (-kv[1], kv[0]))]


def tally_occurrences(rankings: Sequence[Sequence[str]], top_k: int = 5) -> OccurrenceTable:
    counters = [Counter() for _ in range(top_k)]
    for ranking in rankings:
        for p, name in enumerate(ranking[:top_k]):
            counters[p][name] += 1
    positions = [sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:3] for c in counters]
    return OccurrenceTable(len(rankings), top_k, positions)


def occurrence_study(data: StudyData, plan: SplitPlan, config: TrainConfig, runs: int = 100,
                     top_k: int = 5, loss: LossKind = LossKind.LOGISTIC,
                     threads: int = 1) -> OccurrenceTable:
    if runs < 1:
        raise ValueError("runs must be >= 1")
    _require_train(plan)
    tr = np.array(plan.train)
    X = data.matrix.values[tr]
    y = _targets(data, loss)[tr]

    def one(r: int) -> list[str]:
        model = train(X, y, config.replace(seed=config.seed + r), loss,
                      feature_names=data.matrix.columns)
        return ranked_features(model)

    return tally_occurrences(_map_runs(one, runs, threads), top_k)


# -- delayed-entry tactic ------------------------------------------------------

class TacticMode(str, Enum):
    KEEP_OPPOSITE = "keep-opposite"
    DROP_OPPOSITE = "drop-opposite"


@dataclass
class TacticReport:
    population: int
    excluded: int        # |day-one move| <= epsilon
    filtered: int        # survivors removed by the agreement rule
    kept: int
    model_accuracy: float     # predicted t0->t30 vs realized t0->t30, whole population
    inferred_accuracy: float  # predicted sign vs realized t1->t30 on kept events (NaN if none)
    naive_accuracy: float     # predicted sign vs realized t1->t30, whole population
    mode: TacticMode = TacticMode.KEEP_OPPOSITE
    epsilon: float = 0.0005

    @property
    def before(self) -> int:
        return self.population

    @property
    def after(self) -> int:
        return self.kept

    @property
    def undefined(self) -> bool:
        return self.kept == 0

    def row(self) -> list:
        return [self.population, self.excluded, self.filtered, self.kept,
                repr(self.model_accuracy), repr(self.inferred_accuracy), repr(self.naive_accuracy)]


TACTIC_COLUMNS = ["population", "excluded", "filtered", "kept",
                  "model_accuracy", "inferred_accuracy", "naive_accuracy"]


def tactic_infer(day1, predicted_dir, realized_car, realized_late, epsilon: float = 0.0005,
                 mode: TacticMode | str = TacticMode.KEEP_OPPOSITE) -> TacticReport:
    """Filter on the day-one move, then read the t0->t30 prediction as the t1->t30 call."""
    mode = TacticMode(mode)
    day1 = np.asarray(day1, dtype=float)
    pred = np.asarray(predicted_dir)
    truth30 = np.where(np.asarray(realized_car) >= 0, 1, -1)
    late = np.where(np.asarray(realized_late) >= 0, 1, -1)
    n = day1.size
    excluded = np.abs(day1) <= epsilon
    survivors = ~excluded
    opposite = np.where(day1 >= 0, 1, -1) != pred
    keep = survivors & (opposite if mode is TacticMode.KEEP_OPPOSITE else ~opposite)
    kept = int(keep.sum())
    inferred = float(np.mean(pred[keep] == late[keep])) if kept else math.nan
    if not kept:
        logger.warning("tactic: no events survive filtering; inferred accuracy undefined")
    return TacticReport(
        population=n, excluded=int(excluded.sum()), filtered=int(survivors.sum()) - kept, kept=kept,
        model_accuracy=float(np.mean(pred == truth30)) if n else math.nan,
        inferred_accuracy=inferred,
        naive_accuracy=float(np.mean(pred == late)) if n else math.nan,
        mode=mode, epsilon=epsilon)


@dataclass
class TacticStudy:
    reports: list[TacticReport]

    @property
    def inferred_accuracy(self) -> float:
        vals = [r.inferred_accuracy for r in self.reports if not r.undefined]
        return math.fsum(vals) / len(vals) if vals else math.nan

    @property
    def naive_accuracy(self) -> float:
        return math.fsum(r.naive_accuracy for r in self.reports) / len(self.reports)

    @property
    def model_accuracy(self) -> float:
        return math.fsum(r.model_accuracy for r in self.reports) / len(self.reports)

    def to_csv(self, path, header_comments: Sequence[str] = ()) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(_comments(header_comments))
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", *TACTIC_COLUMNS])
            for r, rep in enumerate(self.reports):
                w.writerow([r, *rep.row()])

    def summary(self) -> str:
        r0 = self.reports[0]
        return (f"delayed-entry tactic ({r0.mode.value}, epsilon={r0.epsilon}): "
                f"{len(self.reports)} runs, before {r0.before}, after {r0.after}\n"
                f"  model t0->t30 {self.model_accuracy:.4f}, inferred t1->t30 "
                f"{self.inferred_accuracy:.4f}, naive t1->t30 {self.naive_accuracy:.4f}")


def tactic_study(data: StudyData, plan: SplitPlan, config: TrainConfig, epsilon: float = 0.0005,
                 mode: TacticMode | str = TacticMode.KEEP_OPPOSITE, runs: int = 1,
                 loss: LossKind = LossKind.LOGISTIC, threads: int = 1) -> TacticStudy:
    """Retrain with the known day-one direction as an extra input, then apply the tactic."""
    _require_train(plan)
    tr, te = np.array(plan.train), np.array(plan.test)
    fm = data.matrix.with_column(DAY1_FEATURE, np.where(data.day1 >= 0, 1.0, -1.0))
    X = fm.values
    y = _targets(data, loss)[tr]

    def one(r: int) -> TacticReport:
        model = train(X[tr], y, config.replace(seed=config.seed + r), loss, feature_names=fm.columns)
        pred = _predicted_direction(model, X[te], loss)
        return tactic_infer(data.day1[te], pred, data.car[te], data.late[te], epsilon, mode)

    return TacticStudy(_map_runs(one, runs, threads))

"""Per-event feature vectors, per-company winsorizing/standardizing, matrix stacking."""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from .market_data import EarningsEvent, RawDataset, quarter_ordinal, quarter_tag

# 29 level metrics; PE_Ratios fills the slot that would otherwise repeat Total_Assets
BASE_METRICS = (
    "Cash", "Cash_From_Operating_Activities", "Cost_Of_Revenue", "Current_Ratio",
    "Dividend_Payout_Ratio", "Dividend_Yield", "Free_Cash_Flow", "Gross_Profit",
    "Income_from_Continued_Operations", "Inventory_Turnover", "Net_Debt_to_EBIT",
    "Net_Income", "Operating_Expenses", "Operating_Income", "Operating_Margin",
    "PB_Ratios", "PC_Ratios", "PS_Ratios", "PE_Ratios", "Quick_Ratio",
    "Return_On_Assets", "Return_On_Common_Equity", "Revenue", "Short_Term_Debt",
    "Total_Assets", "Total_Debt_to_Total_Assets", "Total_Debt_to_Total_Equity",
    "Total_Inventory", "Total_Liabilities",
)
SURPRISE_NOW = "EPS_EarningsSurprise"
SURPRISE_PREV_DIFF = "EPS_Earnings_Surprise_Backward_Diff"
SURPRISE_AVG3_DIFF = "EPS_Earnings_Surprise_Backward_Ave_Diff"
SURPRISE_FEATURES = (SURPRISE_NOW, SURPRISE_PREV_DIFF, SURPRISE_AVG3_DIFF)
SHORT_INTEREST = "Short_Interest_Ratio"


def rsi_name(period: int) -> str:
    return f"RSI-{period}D"


def ma_name(short: int, long: int) -> str:
    return f"MA{short}_MA{long}"


def q_change(metric: str) -> str:
    return f"{metric}_Q_Change"


def y_change(metric: str) -> str:
    return f"{metric}_Y_Change"


# -- scalar feature operations -------------------------------------------------

def delta_feature(series: Mapping[str, float], quarter: str, lag: int) -> float:
    """value(q) - value(q - lag quarters); NaN when either side is absent."""
    prev = quarter_tag(quarter_ordinal(quarter) - lag)
    now, before = series.get(quarter, math.nan), series.get(prev, math.nan)
    if now is None or before is None:
        return math.nan
    return now - before


def surprise_features(events: Sequence[EarningsEvent], quarter: str) -> tuple[float, float, float]:
    """(surprise, surprise minus previous, surprise minus mean of the preceding three)."""
    by_q = {quarter_ordinal(e.fiscal_quarter): e.reported_eps - e.consensus_eps for e in events}
    q = quarter_ordinal(quarter)
    if q not in by_q:
        raise KeyError(f"no event for quarter {quarter}")
    now = by_q[q]
    prev = by_q.get(q - 1, math.nan)
    history = [by_q.get(q - k, math.nan) for k in (1, 2, 3)]
    avg3 = sum(history) / 3.0
    return now, now - prev, now - avg3


def rsi(closes: Sequence[float], period: int) -> float:
    """Relative strength index over the last ``period`` one-day changes (simple means)."""
    closes = np.asarray(closes, dtype=float)
    if period < 1 or closes.size < period + 1:
        raise ValueError(f"RSI-{period} needs {period + 1} closes, got {closes.size}")
    moves = np.diff(closes[-(period + 1):])
    gain = moves[moves > 0].sum() / period
    loss = -moves[moves < 0].sum() / period
    if loss == 0:
        return 50.0 if gain == 0 else 100.0
    return 100.0 - 100.0 / (1.0 + gain / loss)


def ma_ratio(closes: Sequence[float], short: int, long: int) -> float:
    """Mean of the last ``short`` closes over the mean of the last ``long`` closes."""
    closes = np.asarray(closes, dtype=float)
    if not 0 < short < long:
        raise ValueError("need 0 < short window < long window")
    if closes.size < long:
        raise ValueError(f"MA{long} needs {long} closes, got {closes.size}")
    return float(closes[-short:].mean() / closes[-long:].mean())


def _nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    n = sorted_values.size
    rank = max(1, math.ceil(q * n))
    return float(sorted_values[min(rank, n) - 1])


def winsorize(values, lower: float, upper: float) -> np.ndarray:
    """Clamp non-missing values into their [lower, upper] nearest-rank percentiles."""
    if not 0 <= lower < upper <= 1:
        raise ValueError("need 0 <= lower < upper <= 1")
    v = np.array(values, dtype=float)
    present = np.sort(v[~np.isnan(v)])
    if present.size == 0:
        return v
    lo, hi = _nearest_rank(present, lower), _nearest_rank(present, upper)
    ok = ~np.isnan(v)
    v[ok] = np.clip(v[ok], lo, hi)
    return v


def standardize(values) -> np.ndarray:
    """z-score over non-missing entries with population std; constant input maps to 0."""
    v = np.array(values, dtype=float)
    if v.size == 0:
        raise ValueError("cannot standardize an empty sequence")
    ok = ~np.isnan(v)
    if not ok.any():
        raise ValueError("need at least one non-missing value")
    x = v[ok]
    sd = x.std() if x.max() != x.min() else 0.0
    if sd == 0.0:   # constant, or spread below float resolution
        v[ok] = 0.0
        return v
    v[ok] = (x - x.mean()) / sd
    return v


# -- feature spec and matrix --------------------------------------------------

@dataclass(frozen=True)
class FeatureSpec:
    metrics: tuple[str, ...] = BASE_METRICS
    winsor_limits: tuple[float, float] = (0.01, 0.99)
    # None means the level-scale block: every metric and its two deltas
    standardize: tuple[str, ...] | None = None
    rsi_periods: tuple[int, ...] = (9, 30)
    ma_pairs: tuple[tuple[int, int], ...] = ((5, 50), (5, 200), (50, 200))
    max_missing_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "metrics", tuple(self.metrics))
        object.__setattr__(self, "winsor_limits", tuple(float(x) for x in self.winsor_limits))
        object.__setattr__(self, "rsi_periods", tuple(int(p) for p in self.rsi_periods))
        object.__setattr__(self, "ma_pairs", tuple((int(a), int(b)) for a, b in self.ma_pairs))
        if self.standardize is not None:
            object.__setattr__(self, "standardize", tuple(self.standardize))
        lo, hi = self.winsor_limits
        if not 0 <= lo < hi <= 1:
            raise ValueError("winsor limits need 0 <= lower < upper <= 1")
        names = self.feature_names
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        extra = set(self.standardize_set) - set(names)
        if extra:
            raise ValueError(f"standardize set names unknown features: {sorted(extra)}")
        if not 0 <= self.max_missing_fraction <= 1:
            raise ValueError("max_missing_fraction must be in [0, 1]")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return (tuple(self.metrics)
                + tuple(q_change(m) for m in self.metrics)
                + tuple(y_change(m) for m in self.metrics)
                + SURPRISE_FEATURES
                + tuple(rsi_name(p) for p in self.rsi_periods)
                + tuple(ma_name(a, b) for a, b in self.ma_pairs)
                + (SHORT_INTEREST,))

    @property
    def standardize_set(self) -> tuple[str, ...]:
        if self.standardize is not None:
            return self.standardize
        return (tuple(self.metrics) + tuple(q_change(m) for m in self.metrics)
                + tuple(y_change(m) for m in self.metrics))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = list(self.metrics)
        d["ma_pairs"] = [list(p) for p in self.ma_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown FeatureSpec field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class FeatureMatrix:
    keys: tuple[tuple[str, str], ...]
    columns: tuple[str, ...]
    values: np.ndarray
    dropped: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.values.shape != (len(self.keys), len(self.columns)):
            raise ValueError("values shape does not match keys x columns")
        if np.isinf(self.values).any():
            raise ValueError("non-missing cells must be finite")

    @property
    def mask(self) -> np.ndarray:
        """True where a cell is missing."""
        return np.isnan(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def row(self, key: tuple[str, str]) -> np.ndarray:
        return self.values[self.keys.index(key)]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=int)
        return FeatureMatrix(tuple(self.keys[i] for i in rows), self.columns,
                             self.values[rows], 0, dict(self.meta))

    def with_column(self, name: str, values) -> "FeatureMatrix":
        values = np.asarray(values, dtype=float).reshape(-1, 1)
        return FeatureMatrix(self.keys, self.columns + (name,),
                             np.hstack([self.values, values]), self.dropped, dict(self.meta))

    def to_csv(self, path, header_comments: Sequence[str] = ()) -> None:
        """Blank cell = missing; ``missing_mask`` repeats the mask as a 0/1 string."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for line in header_comments:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["company_id", "fiscal_quarter", *self.columns, "missing_mask"])
            mask = self.mask
            for key, row, m in zip(self.keys, self.values, mask):
                cells = ["" if miss else repr(float(x)) for x, miss in zip(row, m)]
                w.writerow([*key, *cells, "".join("1" if x else "0" for x in m)])

    @classmethod
    def from_csv(cls, path) -> "FeatureMatrix":
        with open(path, encoding="utf-8", newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.reader(lines)
        header = next(reader)
        if header[:2] != ["company_id", "fiscal_quarter"] or header[-1] != "missing_mask":
            raise ValueError(f"{path}: not a feature matrix file")
        columns = tuple(header[2:-1])
        keys, rows = [], []
        for rec in reader:
            keys.append((rec[0], rec[1]))
            cells = rec[2:-1]
            mask = rec[-1]
            rows.append([math.nan if m == "1" else float(c) for c, m in zip(cells, mask)])
        values = np.array(rows, dtype=float).reshape(len(keys), len(columns))
        return cls(tuple(keys), columns, values)


def metric_series(company_events: Sequence[EarningsEvent], metrics) -> dict[str, dict[str, float]]:
    return {m: {e.fiscal_quarter: e.fundamentals.get(m, math.nan) for e in company_events}
            for m in metrics}


def event_features(raw: RawDataset, event: EarningsEvent, company_events: Sequence[EarningsEvent],
                   spec: FeatureSpec, closes: Sequence[float] | None = None,
                   series_by_metric: dict | None = None) -> dict[str, float]:
    """Raw (unprocessed) engineered features of one event at its t0."""
    out: dict[str, float] = {}
    q = event.fiscal_quarter
    if series_by_metric is None:
        series_by_metric = metric_series(company_events, spec.metrics)
    for m in spec.metrics:
        series = series_by_metric[m]
        out[m] = series.get(q, math.nan)
        out[q_change(m)] = delta_feature(series, q, 1)
        out[y_change(m)] = delta_feature(series, q, 4)
    s_now, s_prev, s_avg = surprise_features(company_events, q)
    out[SURPRISE_NOW], out[SURPRISE_PREV_DIFF], out[SURPRISE_AVG3_DIFF] = s_now, s_prev, s_avg
    if closes is None:
        closes = raw.prices[event.company_id].closes_through(raw.calendar, event.t0)
    for p in spec.rsi_periods:
        out[rsi_name(p)] = rsi(closes, p) if len(closes) >= p + 1 else math.nan
    for a, b in spec.ma_pairs:
        out[ma_name(a, b)] = ma_ratio(closes, a, b) if len(closes) >= b else math.nan
    out[SHORT_INTEREST] = event.short_interest
    return {k: (float(v) if math.isfinite(v) else math.nan) for k, v in out.items()}


def raw_feature_rows(raw: RawDataset, spec: FeatureSpec) -> dict[str, tuple[list[tuple[str, str]], np.ndarray]]:
    """Unprocessed feature rows per company, rows in fiscal-quarter order."""
    names = spec.feature_names
    out = {}
    for cid, events in sorted(raw.company_events().items()):
        events = sorted(events, key=lambda e: e.sort_key)
        series = metric_series(events, spec.metrics)
        closes = raw.prices[cid].closes_through(raw.calendar, raw.calendar.dates[-1])
        dates = [d for d in raw.calendar.dates if d in raw.prices[cid].closes]
        rows = []
        for e in events:
            upto = bisect.bisect_right(dates, e.t0)
            feats = event_features(raw, e, events, spec, closes[:upto], series)
            rows.append([feats.get(n, math.nan) for n in names])
        out[cid] = ([e.key for e in events], np.array(rows, dtype=float).reshape(len(events), len(names)))
    return out


def preprocess_company(values: np.ndarray, columns: Sequence[str], spec: FeatureSpec) -> np.ndarray:
    """Winsorize every column, then standardize the configured subset."""
    lo, hi = spec.winsor_limits
    out = np.empty_like(values)
    std_set = set(spec.standardize_set)
    for j, name in enumerate(columns):
        col = values[:, j]
        if np.isnan(col).all():
            out[:, j] = col
            continue
        col = winsorize(col, lo, hi)
        if name in std_set:
            col = standardize(col)
        out[:, j] = col
    return out


def build_matrix(raw: RawDataset, spec: FeatureSpec = FeatureSpec()) -> FeatureMatrix:
    """Compute, clean and stack every company's feature rows."""
    names = spec.feature_names
    keys: list[tuple[str, str]] = []
    blocks: list[np.ndarray] = []
    dropped = 0
    for cid, (ckeys, values) in raw_feature_rows(raw, spec).items():
        keep = np.isnan(values).mean(axis=1) <= spec.max_missing_fraction
        dropped += int((~keep).sum())
        if not keep.any():
            continue
        blocks.append(preprocess_company(values[keep], names, spec))
        keys.extend(k for k, ok in zip(ckeys, keep) if ok)
    values = np.vstack(blocks) if blocks else np.empty((0, len(names)))
    return FeatureMatrix(tuple(keys), tuple(names), values, dropped)

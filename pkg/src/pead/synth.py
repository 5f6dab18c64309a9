"""Synthetic market bundles with a planted, recoverable post-announcement drift."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, asdict
from datetime import date, timedelta
from enum import Enum

import numpy as np

from .features import (
    SHORT_INTEREST, SURPRISE_AVG3_DIFF, SURPRISE_NOW, SURPRISE_PREV_DIFF, BASE_METRICS,
    q_change, y_change,
)
from .market_data import (
    EarningsEvent, PriceSeries, RawDataset, Timing, TradingCalendar, quarter_ordinal,
    quarter_tag, resolve_t0,
)

SECTORS = ("Industrial", "Basic Materials", "Consumer Cyclical", "Consumer Non-Cyclical",
           "Financial", "Technology", "Communications", "Energy", "Utilities")


class DriftTiming(str, Enum):
    FROM_T0 = "from-t0"
    FROM_T1 = "from-t1"


@dataclass(frozen=True)
class SynthConfig:
    n_companies: int = 200
    n_quarters: int = 12
    first_quarter: str = "2013Q1"
    # feature name -> weight on the planted 30-day CAR; only non-price features
    signal: dict = field(default_factory=lambda: {SURPRISE_NOW: 1.0})
    noise_std: float = 0.015
    drift_timing: DriftTiming = DriftTiming.FROM_T0
    surprise_scale: float = 0.05
    # std of the day-one abnormal move that precedes a from-t1 drift
    pre_drift_std: float = 0.05
    horizon: int = 30
    idio_vol: float = 0.01
    index_vol: float = 0.01
    index_drift: float = 0.0003
    history_days: int = 260
    metrics: tuple = BASE_METRICS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "drift_timing", DriftTiming(self.drift_timing))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        object.__setattr__(self, "signal", dict(self.signal))
        if self.n_companies < 2:
            raise ValueError("need at least 2 companies")
        if self.n_quarters < 1 or self.horizon < 2:
            raise ValueError("need n_quarters >= 1 and horizon >= 2")
        if min(self.noise_std, self.pre_drift_std, self.idio_vol, self.index_vol) < 0:
            raise ValueError("standard deviations must be >= 0")
        allowed = set(plantable_features(self.metrics))
        bad = set(self.signal) - allowed
        if bad:
            raise ValueError(f"signal names non-plantable feature(s): {sorted(bad)}")
        quarter_ordinal(self.first_quarter)

    @property
    def signal_scale(self) -> float:
        return self.surprise_scale * max([abs(w) for w in self.signal.values()] or [0.0])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drift_timing"] = self.drift_timing.value
        d["metrics"] = list(self.metrics)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SynthConfig field(s): {sorted(unknown)}")
        return cls(**d)


def plantable_features(metrics) -> tuple[str, ...]:
    """Features fixed by fundamentals/estimates alone, so no price feedback loop."""
    return (tuple(metrics) + tuple(q_change(m) for m in metrics)
            + tuple(y_change(m) for m in metrics)
            + (SURPRISE_NOW, SURPRISE_PREV_DIFF, SURPRISE_AVG3_DIFF, SHORT_INTEREST))


@dataclass
class SynthResult:
    raw: RawDataset
    planted: dict        # event key -> {feature: value}
    targets: dict        # event key -> planted drift (t1..t30 CAR under from-t1)
    pre_drift: dict      # event key -> day-one abnormal move (0 under from-t0)
    config: SynthConfig

    def write(self, directory) -> None:
        from .market_data import write_bundle
        paths = write_bundle(self.raw, directory, list(self.config.metrics))
        meta = {"synth_config": self.config.to_dict(), "files": sorted(p.name for p in paths.values())}
        with open(paths["index.csv"].parent / "synth_meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def _quarter_end(tag: str) -> date:
    o = quarter_ordinal(tag)
    year, q = o // 4, o % 4 + 1
    nxt = date(year + (q == 4), 1 if q == 4 else 3 * q + 1, 1)
    return nxt - timedelta(days=1)


def _business_days(start: date, end: date) -> tuple[date, ...]:
    n = (end - start).days + 1
    days = (start + timedelta(days=i) for i in range(n))
    return tuple(d for d in days if d.weekday() < 5)


def _next_business_day(d: date) -> date:
    while d.weekday() >= 5:
        d += timedelta(days=1)
    return d


def generate_planted(cfg: SynthConfig) -> SynthResult:
    quarters = [quarter_tag(quarter_ordinal(cfg.first_quarter) + k) for k in range(cfg.n_quarters)]
    first_end, last_end = _quarter_end(quarters[0]), _quarter_end(quarters[-1])
    # pre-history for long moving averages, tail room for the last CAR window
    start = first_end - timedelta(days=math.ceil(cfg.history_days * 7 / 5) + 14)
    end = last_end + timedelta(days=45 + math.ceil((cfg.horizon + 10) * 7 / 5))
    calendar = TradingCalendar(_business_days(start, end))
    n_days = len(calendar)

    idx_rng = np.random.default_rng([cfg.seed, 0])
    r_index = cfg.index_drift + cfg.index_vol * idx_rng.standard_normal(n_days)
    r_index[0] = 0.0
    index = PriceSeries("INDEX", dict(zip(calendar.dates, 1000.0 * np.cumprod(1.0 + r_index))))

    prices, events, short = {}, [], {}
    planted, targets, pre = {}, {}, {}
    width = max(4, len(str(cfg.n_companies - 1)))
    for c in range(cfg.n_companies):
        cid = f"C{c:0{width}d}"
        rng = np.random.default_rng([cfg.seed, 1, c])
        sector = SECTORS[int(rng.integers(len(SECTORS)))]
        level = np.exp(rng.normal(3.0, 1.5, size=len(cfg.metrics)))
        growth = rng.normal(0.0, 0.05, size=(cfg.n_quarters, len(cfg.metrics)))
        fund = level * (1.0 + np.cumsum(growth, axis=0))
        consensus = rng.normal(1.0, 0.3, size=cfg.n_quarters)
        signs = rng.choice([-1.0, 1.0], size=cfg.n_quarters)
        surprise = signs * rng.uniform(0.5, 1.5, size=cfg.n_quarters) * cfg.surprise_scale
        reported = consensus + surprise
        lags = rng.integers(20, 41, size=cfg.n_quarters)
        timings = rng.choice([t.value for t in Timing], size=cfg.n_quarters)
        si_values = rng.uniform(1.0, 6.0, size=cfg.n_quarters)
        noise = cfg.noise_std * rng.standard_normal(cfg.n_quarters)
        pre_moves = cfg.pre_drift_std * rng.standard_normal(cfg.n_quarters)
        abnormal = cfg.idio_vol * rng.standard_normal(n_days)
        p0 = rng.uniform(20.0, 200.0)

        si_series = []
        rows = []
        for k, q in enumerate(quarters):
            ann = _next_business_day(_quarter_end(q) + timedelta(days=int(lags[k])))
            timing = Timing(str(timings[k]))
            t0 = resolve_t0(ann, timing, calendar)
            t0_pos = calendar.index(t0)
            si_date = calendar.dates[t0_pos - 10]
            si_series.append((si_date, float(si_values[k])))
            rows.append((q, ann, timing, t0, t0_pos))

        surprises = dict(zip(quarters, (reported - consensus).tolist()))
        for k, (q, ann, timing, t0, t0_pos) in enumerate(rows):
            values = {m: float(fund[k, j]) for j, m in enumerate(cfg.metrics)}
            feats = dict(values)
            for j, m in enumerate(cfg.metrics):
                feats[q_change(m)] = float(fund[k, j] - fund[k - 1, j]) if k >= 1 else math.nan
                feats[y_change(m)] = float(fund[k, j] - fund[k - 4, j]) if k >= 4 else math.nan
            s = surprises[q]
            feats[SURPRISE_NOW] = s
            feats[SURPRISE_PREV_DIFF] = s - surprises[quarters[k - 1]] if k >= 1 else math.nan
            feats[SURPRISE_AVG3_DIFF] = (s - sum(surprises[quarters[k - j]] for j in (1, 2, 3)) / 3.0
                                         if k >= 3 else math.nan)
            feats[SHORT_INTEREST] = si_series[k][1]
            # a missing planted feature contributes nothing
            target = sum(w * feats[f] for f, w in cfg.signal.items() if not math.isnan(feats[f]))
            target += float(noise[k])
            key = (cid, q)
            window = slice(t0_pos + 1, t0_pos + cfg.horizon + 1)
            if cfg.drift_timing is DriftTiming.FROM_T0:
                abnormal[window] = target / cfg.horizon
                pre[key] = 0.0
            else:
                abnormal[t0_pos + 1] = pre_moves[k]
                abnormal[t0_pos + 2:t0_pos + cfg.horizon + 1] = target / (cfg.horizon - 1)
                pre[key] = float(pre_moves[k])
            planted[key] = feats
            targets[key] = target
            events.append(EarningsEvent(
                company_id=cid, sector=sector, fiscal_quarter=q, announce_date=ann,
                timing=timing, reported_eps=float(reported[k]), consensus_eps=float(consensus[k]),
                fundamentals=values, short_interest=si_series[k][1], t0=t0))

        r = r_index + np.maximum(abnormal, -0.5)
        r[0] = 0.0
        prices[cid] = PriceSeries(cid, dict(zip(calendar.dates, p0 * np.cumprod(1.0 + r))))
        short[cid] = si_series

    events.sort(key=lambda e: e.sort_key)
    raw = RawDataset(calendar=calendar, prices=prices, index=index, events=events,
                     short_interest=short, dropped=Counter())
    return SynthResult(raw, planted, targets, pre, cfg)


def generate(cfg: SynthConfig) -> RawDataset:
    return generate_planted(cfg).raw

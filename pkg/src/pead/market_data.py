"""Price, fundamental and estimate ingestion; announcement timing; CAR labels."""

from __future__ import annotations

import bisect
import csv
import logging
import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

logger = logging.getLogger(__name__)

BUNDLE_FILES = ("prices.csv", "index.csv", "fundamentals.csv", "short_interest.csv")
FUNDAMENTAL_FIXED = ("company_id", "fiscal_quarter", "announce_date", "announce_timing",
                     "reported_eps", "consensus_eps")
OPTIONAL_FUNDAMENTAL = ("sector",)
DEFAULT_HORIZON = 30


class IngestError(ValueError):
    """A bundle file is unreadable or structurally invalid."""


class CoverageError(ValueError):
    """A price series does not cover the requested window."""

    def __init__(self, message: str, missing_date: date | None = None):
        super().__init__(message)
        self.missing_date = missing_date


class Timing(str, Enum):
    BEFORE_OPEN = "BMO"
    AFTER_CLOSE = "AMC"
    INTRADAY = "INTRA"

    @classmethod
    def parse(cls, text: str) -> "Timing":
        t = text.strip().upper()
        aliases = {"BEFORE-OPEN": "BMO", "AFTER-CLOSE": "AMC", "INTRADAY": "INTRA"}
        return cls(aliases.get(t, t))


_QUARTER_RE = re.compile(r"^(\d{4})Q([1-4])$")


def parse_quarter(tag: str) -> tuple[int, int]:
    m = _QUARTER_RE.match(tag.strip().upper())
    if not m:
        raise ValueError(f"bad fiscal quarter tag {tag!r} (expected e.g. 2018Q3)")
    return int(m.group(1)), int(m.group(2))


def quarter_ordinal(tag: str) -> int:
    year, q = parse_quarter(tag)
    return year * 4 + (q - 1)


def quarter_tag(ordinal: int) -> str:
    return f"{ordinal // 4}Q{ordinal % 4 + 1}"


def shift_quarter(tag: str, lag: int) -> str:
    return quarter_tag(quarter_ordinal(tag) - lag)


@dataclass(frozen=True)
class TradingCalendar:
    dates: tuple[date, ...]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise ValueError("calendar dates must be strictly increasing")
        object.__setattr__(self, "_pos", {d: i for i, d in enumerate(self.dates)})

    def __len__(self) -> int:
        return len(self.dates)

    def __contains__(self, d: date) -> bool:
        return d in self._pos

    def index(self, d: date) -> int:
        try:
            return self._pos[d]
        except KeyError:
            raise KeyError(f"{d} is not a trading day") from None

    def on_or_before(self, d: date) -> int:
        """Position of the last trading day <= d."""
        i = bisect.bisect_right(self.dates, d) - 1
        if i < 0:
            raise ValueError(f"no trading day on or before {d}")
        return i

    def before(self, d: date) -> int:
        """Position of the last trading day strictly before d."""
        i = bisect.bisect_left(self.dates, d) - 1
        if i < 0:
            raise ValueError(f"no trading day before {d}")
        return i

    def previous(self, d: date) -> date:
        return self.dates[self.before(d)]

    def offset(self, d: date, n: int) -> date:
        """The n-th trading day after trading day d."""
        i = self.index(d) + n
        if not 0 <= i < len(self.dates):
            raise IndexError(f"{n} trading days after {d} is outside the calendar")
        return self.dates[i]


@dataclass(frozen=True)
class PriceSeries:
    company_id: str
    closes: Mapping[date, float]

    def __post_init__(self):
        for d, p in self.closes.items():
            if not (p > 0 and math.isfinite(p)):
                raise ValueError(f"{self.company_id}: non-positive close {p!r} on {d}")

    def closes_through(self, calendar: TradingCalendar, t: date) -> list[float]:
        """Closes on calendar days up to and including ``t``, oldest first."""
        end = calendar.on_or_before(t)
        return [self.closes[d] for d in calendar.dates[:end + 1] if d in self.closes]


@dataclass(frozen=True)
class EarningsEvent:
    company_id: str
    sector: str
    fiscal_quarter: str
    announce_date: date
    timing: Timing
    reported_eps: float
    consensus_eps: float
    fundamentals: Mapping[str, float]
    short_interest: float = math.nan
    t0: date | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.company_id, self.fiscal_quarter)

    @property
    def sort_key(self) -> tuple[str, int]:
        return (self.company_id, quarter_ordinal(self.fiscal_quarter))


@dataclass(frozen=True)
class CarLabel:
    key: tuple[str, str]
    t0: date
    horizon: int
    car: float

    @property
    def direction(self) -> int:
        # zero CAR is measure-zero; it is labeled positive
        return 1 if self.car >= 0 else -1


@dataclass
class RawDataset:
    calendar: TradingCalendar
    prices: dict[str, PriceSeries]
    index: PriceSeries
    events: list[EarningsEvent]
    short_interest: dict[str, list[tuple[date, float]]] = field(default_factory=dict)
    dropped: Counter = field(default_factory=Counter)

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())

    def event(self, key: tuple[str, str]) -> EarningsEvent:
        for e in self.events:
            if e.key == key:
                return e
        raise KeyError(key)

    def company_events(self) -> dict[str, list[EarningsEvent]]:
        out: dict[str, list[EarningsEvent]] = {}
        for e in self.events:
            out.setdefault(e.company_id, []).append(e)
        return out

    def metric_names(self) -> list[str]:
        names: dict[str, None] = {}
        for e in self.events:
            names.update(dict.fromkeys(e.fundamentals))
        return list(names)


def resolve_t0(announce_date: date, timing: Timing | str, calendar: TradingCalendar) -> date:
    """Last tradable close before the release reaches the market."""
    timing = Timing.parse(timing) if isinstance(timing, str) else timing
    if timing is Timing.AFTER_CLOSE:
        return calendar.dates[calendar.on_or_before(announce_date)]
    return calendar.dates[calendar.before(announce_date)]


def abnormal_return(stock_return: float, index_return: float) -> float:
    if not (math.isfinite(stock_return) and math.isfinite(index_return)):
        raise ValueError("returns must be finite")
    return stock_return - index_return


def car(stock: PriceSeries, index: PriceSeries, t_start: date, t_end_offset: int,
        calendar: TradingCalendar, key: tuple[str, str] | None = None) -> CarLabel:
    """Cumulative abnormal return over the ``t_end_offset`` trading days after ``t_start``."""
    if t_end_offset < 1:
        raise ValueError("horizon must be >= 1")
    start = calendar.index(t_start)
    window = calendar.dates[start:start + t_end_offset + 1]
    if len(window) < t_end_offset + 1:
        raise CoverageError(f"calendar ends before {t_end_offset} trading days after {t_start}")
    for d in window:
        for series in (stock, index):
            if d not in series.closes:
                raise CoverageError(f"{series.company_id}: no close on {d}", d)
    total = 0.0
    for prev, cur in zip(window, window[1:]):
        r_stock = stock.closes[cur] / stock.closes[prev] - 1.0
        r_index = index.closes[cur] / index.closes[prev] - 1.0
        total += abnormal_return(r_stock, r_index)
    return CarLabel(key=key or (stock.company_id, ""), t0=t_start, horizon=t_end_offset, car=total)


# -- ingestion -----------------------------------------------------------------

def _parse_date(text: str, where: str) -> date:
    try:
        return date.fromisoformat(text.strip())
    except ValueError:
        raise IngestError(f"{where}: bad date {text!r}") from None


def _parse_float(text: str, where: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise IngestError(f"{where}: bad number {text!r}") from None


def _read_rows(path: Path, required: Iterable[str]) -> tuple[list[str], list[tuple[int, dict]]]:
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise IngestError(f"{path}: cannot read ({exc.strerror})") from None
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise IngestError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing or len(set(header)) != len(header):
            raise IngestError(f"{path}: malformed header {header!r}; missing {missing}")
        reader.fieldnames = header
        rows = []
        for row in reader:
            if None in row:
                raise IngestError(f"{path}:{reader.line_num}: too many fields")
            rows.append((reader.line_num, row))
    return header, rows


def _resolve_bundle(paths) -> dict[str, Path]:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    found: dict[str, Path] = {}
    for p in map(Path, paths):
        if p.is_dir():
            for name in BUNDLE_FILES:
                if (p / name).exists():
                    found[name] = p / name
        else:
            found[p.name] = p
    for name in BUNDLE_FILES[:3]:
        if name not in found:
            raise IngestError(f"bundle is missing {name}")
    return found


def ingest(paths) -> RawDataset:
    """Read and validate a CSV bundle (a directory or an iterable of file paths).

    Events that cannot be used (unknown timing, no price series, date outside
    the calendar) are dropped and tallied in ``RawDataset.dropped``.
    """
    files = _resolve_bundle(paths)

    _, index_rows = _read_rows(files["index.csv"], ("date", "close"))
    index_closes: dict[date, float] = {}
    for line, row in index_rows:
        where = f"{files['index.csv']}:{line}"
        d = _parse_date(row["date"], where)
        if d in index_closes:
            raise IngestError(f"{where}: duplicate date {d}")
        index_closes[d] = _parse_float(row["close"], where)
    calendar = TradingCalendar(tuple(sorted(index_closes)))
    try:
        index = PriceSeries("INDEX", index_closes)
    except ValueError as exc:
        raise IngestError(f"{files['index.csv']}: {exc}") from None

    _, price_rows = _read_rows(files["prices.csv"], ("company_id", "date", "close"))
    closes: dict[str, dict[date, float]] = {}
    for line, row in price_rows:
        where = f"{files['prices.csv']}:{line}"
        d = _parse_date(row["date"], where)
        if d not in calendar:
            raise IngestError(f"{where}: {d} is not an index trading day")
        series = closes.setdefault(row["company_id"].strip(), {})
        if d in series:
            raise IngestError(f"{where}: duplicate price for {row['company_id']} on {d}")
        series[d] = _parse_float(row["close"], where)
    try:
        prices = {cid: PriceSeries(cid, c) for cid, c in sorted(closes.items())}
    except ValueError as exc:
        raise IngestError(f"{files['prices.csv']}: {exc}") from None

    short: dict[str, list[tuple[date, float]]] = {}
    if "short_interest.csv" in files:
        _, si_rows = _read_rows(files["short_interest.csv"], ("company_id", "date", "ratio"))
        for line, row in si_rows:
            where = f"{files['short_interest.csv']}:{line}"
            value = _parse_float(row["ratio"], where)
            if math.isnan(value):
                continue
            if value < 0:
                raise IngestError(f"{where}: negative short interest ratio")
            short.setdefault(row["company_id"].strip(), []).append(
                (_parse_date(row["date"], where), value))
        for series in short.values():
            series.sort()

    header, fund_rows = _read_rows(files["fundamentals.csv"], FUNDAMENTAL_FIXED)
    metrics = [h for h in header if h not in FUNDAMENTAL_FIXED and h not in OPTIONAL_FUNDAMENTAL]
    dropped: Counter = Counter()
    seen: dict[tuple[str, str], int] = {}
    events: list[EarningsEvent] = []
    for line, row in fund_rows:
        where = f"{files['fundamentals.csv']}:{line}"
        cid = row["company_id"].strip()
        try:
            quarter = quarter_tag(quarter_ordinal(row["fiscal_quarter"]))
        except ValueError as exc:
            raise IngestError(f"{where}: {exc}") from None
        key = (cid, quarter)
        if key in seen:
            raise IngestError(f"{where}: duplicate event {cid} {quarter} (first at row {seen[key]})")
        seen[key] = line
        announce = _parse_date(row["announce_date"], where)
        timing_text = row["announce_timing"].strip()
        if not timing_text:
            dropped["missing_timing"] += 1
            continue
        try:
            timing = Timing.parse(timing_text)
        except ValueError:
            dropped["bad_timing"] += 1
            continue
        if not calendar.dates or not calendar.dates[0] <= announce <= calendar.dates[-1]:
            dropped["outside_calendar"] += 1
            continue
        if cid not in prices:
            dropped["no_prices"] += 1
            continue
        try:
            t0 = resolve_t0(announce, timing, calendar)
        except ValueError:
            dropped["no_prior_trading_day"] += 1
            continue
        fundamentals = {m: _parse_float(row[m], where) for m in metrics}
        events.append(EarningsEvent(
            company_id=cid,
            sector=(row.get("sector") or "").strip(),
            fiscal_quarter=quarter,
            announce_date=announce,
            timing=timing,
            reported_eps=_parse_float(row["reported_eps"], where),
            consensus_eps=_parse_float(row["consensus_eps"], where),
            fundamentals=fundamentals,
            short_interest=latest_short_interest(short.get(cid, []), t0),
            t0=t0,
        ))
    events.sort(key=lambda e: e.sort_key)
    if dropped:
        logger.info("dropped %d events: %s", sum(dropped.values()), dict(dropped))
    return RawDataset(calendar=calendar, prices=prices, index=index, events=events,
                      short_interest=short, dropped=dropped)


def latest_short_interest(series: list[tuple[date, float]], t0: date) -> float:
    """Most recent ratio published on or before ``t0``; NaN if none."""
    i = bisect.bisect_right(series, (t0, math.inf)) - 1
    return series[i][1] if i >= 0 else math.nan


def event_car(raw: RawDataset, event: EarningsEvent, start_offset: int = 0,
              horizon: int = DEFAULT_HORIZON) -> CarLabel:
    """CAR over trading days ``start_offset+1 .. start_offset+horizon`` after the event's t0."""
    start = raw.calendar.offset(event.t0, start_offset) if start_offset else event.t0
    label = car(raw.prices[event.company_id], raw.index, start, horizon, raw.calendar, event.key)
    return CarLabel(key=event.key, t0=event.t0, horizon=horizon, car=label.car)


def write_bundle(raw: RawDataset, directory, metrics: list[str] | None = None) -> dict[str, Path]:
    """Write ``raw`` in the ingestible CSV bundle format."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    metrics = metrics if metrics is not None else raw.metric_names()
    paths = {name: out / name for name in BUNDLE_FILES}

    def num(x: float) -> str:
        return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))

    with open(paths["index.csv"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "close"])
        for d in raw.calendar.dates:
            w.writerow([d.isoformat(), num(raw.index.closes[d])])
    with open(paths["prices.csv"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["company_id", "date", "close"])
        for cid, series in sorted(raw.prices.items()):
            for d in sorted(series.closes):
                w.writerow([cid, d.isoformat(), num(series.closes[d])])
    with open(paths["fundamentals.csv"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(FUNDAMENTAL_FIXED) + ["sector"] + metrics)
        for e in raw.events:
            w.writerow([e.company_id, e.fiscal_quarter, e.announce_date.isoformat(),
                        e.timing.value, num(e.reported_eps), num(e.consensus_eps), e.sector]
                       + [num(e.fundamentals.get(m, math.nan)) for m in metrics])
    with open(paths["short_interest.csv"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["company_id", "date", "ratio"])
        for cid, series in sorted(raw.short_interest.items()):
            for d, v in series:
                w.writerow([cid, d.isoformat(), num(v)])
    return paths

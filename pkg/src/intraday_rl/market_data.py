"""Minute-bar OHLCV loading, cleaning, walk-forward splitting and synthesis."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta, timezone
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["timestamp", "open", "high", "low", "close", "volume"]
PATTERNS = ("none", "momentum", "mean-reversion", "time-of-day")
VOL_SHAPES = ("flat", "u-shape")


class MarketDataError(ValueError):
    """Raised for unreadable or invariant-violating market data."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Bar:
    timestamp: datetime
    open: float
    high: float
    low: float
    close: float
    volume: float


@dataclass(frozen=True)
class SessionConfig:
    """Exchange-time session window and the agent's decision window inside it.

    The defaults reproduce a 09:30-17:00 New York session where the agent
    decides from 10:31 for 360 one-minute steps and liquidates at 16:31.
    """

    tz: str = "America/New_York"
    start: time = time(9, 30)
    end: time = time(17, 0)
    first_decision: time = time(10, 31)
    horizon: int = 360
    lookback: int = 60

    @property
    def length(self) -> int:
        return _minutes(self.end) - _minutes(self.start)

    @property
    def decision_offset(self) -> int:
        return _minutes(self.first_decision) - _minutes(self.start)

    @property
    def usable_bars(self) -> int:
        """Bars per session whose longest lookback return is defined."""
        return self.length - self.lookback


def _minutes(t: time) -> int:
    return t.hour * 60 + t.minute


@dataclass
class BarSeries:
    """Columnar sequence of bars; indexing yields :class:`Bar` records."""

    timestamps: np.ndarray  # datetime64[ns], UTC
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamps)

    def __getitem__(self, i: int) -> Bar:
        ts = pd.Timestamp(self.timestamps[i]).tz_localize("UTC").to_pydatetime()
        return Bar(ts, float(self.open[i]), float(self.high[i]), float(self.low[i]),
                   float(self.close[i]), float(self.volume[i]))

    def __iter__(self) -> Iterator[Bar]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_bars(cls, bars: Sequence[Bar]) -> "BarSeries":
        ts = pd.DatetimeIndex([b.timestamp for b in bars])
        if ts.tz is not None:
            ts = ts.tz_convert("UTC").tz_localize(None)
        return cls(
            timestamps=ts.values.astype("datetime64[ns]"),
            open=np.array([b.open for b in bars], dtype=float),
            high=np.array([b.high for b in bars], dtype=float),
            low=np.array([b.low for b in bars], dtype=float),
            close=np.array([b.close for b in bars], dtype=float),
            volume=np.array([b.volume for b in bars], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class TradingDay:
    """One gap-filled session of minute bars; the substrate of one episode."""

    date: date
    timestamps: np.ndarray  # datetime64[ns], UTC
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    session: SessionConfig = field(default_factory=SessionConfig)

    def __len__(self) -> int:
        return len(self.close)

    @property
    def tradable_range(self) -> tuple[int, int]:
        start = self.session.decision_offset
        return start, start + self.session.horizon

    @property
    def total_volume(self) -> float:
        return float(self.volume.sum())

    @cached_property
    def price_features(self) -> np.ndarray:
        """Raw price-based features per bar, shape (bars, 9); NaN where undefined."""
        from .features import price_feature_matrix

        return price_feature_matrix(self.high, self.low, self.close)

    def validate(self) -> None:
        n = self.session.length
        if len(self.close) != n:
            raise MarketDataError(f"{self.date}: expected {n} bars, got {len(self.close)}")
        steps = np.diff(self.timestamps).astype("timedelta64[s]").astype(np.int64)
        if not np.all(steps == 60):
            raise MarketDataError(f"{self.date}: bar timestamps are not spaced one minute apart")
        _check_ohlc(self.open, self.high, self.low, self.close, self.volume)


@dataclass
class RollSplit:
    train_days: list[TradingDay]
    val_days: list[TradingDay]
    test_days: list[TradingDay]

    @property
    def test_start(self) -> date:
        return self.test_days[0].date


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the geometric-random-walk minute-bar generator.

    Planted patterns (per-bar simple-return drift of size ``pattern_strength``):

    * ``momentum``: expected return has the sign of the previous bar's return.
    * ``mean-reversion``: expected return opposes the previous bar's return.
    * ``time-of-day``: +strength on bars in 11:00-12:00 and -strength on bars in
      14:00-15:00 exchange time, so the day's expected drift is zero.
    """

    n_days: int
    seed: int = 0
    base_price: float = 100.0
    daily_vol: float = 0.01
    intraday_vol_shape: str = "flat"
    planted_pattern: str = "none"
    pattern_strength: float = 0.0
    start_date: date = date(2012, 1, 2)
    mean_bar_volume: float = 100.0
    session: SessionConfig = field(default_factory=SessionConfig)

    def __post_init__(self):
        if self.n_days < 1:
            raise ValueError("n_days must be >= 1")
        if self.pattern_strength < 0:
            raise ValueError("pattern_strength must be >= 0")
        if self.base_price <= 0:
            raise ValueError("base_price must be positive")
        if self.daily_vol < 0:
            raise ValueError("daily_vol must be >= 0")
        if self.planted_pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.planted_pattern!r}; expected one of {PATTERNS}")
        if self.intraday_vol_shape not in VOL_SHAPES:
            raise ValueError(f"unknown volatility shape {self.intraday_vol_shape!r}")


def _check_ohlc(o, h, l, c, v, first_line: int | None = None) -> None:
    bad = (
        ~np.isfinite(o) | ~np.isfinite(h) | ~np.isfinite(l) | ~np.isfinite(c) | ~np.isfinite(v)
        | (o <= 0) | (h <= 0) | (l <= 0) | (c <= 0) | (v < 0)
        | (l > h) | (o < l) | (o > h) | (c < l) | (c > h)
    )
    if bad.any():
        i = int(np.argmax(bad))
        line = None if first_line is None else first_line + i
        raise MarketDataError(
            f"invalid bar o={o[i]} h={h[i]} l={l[i]} c={c[i]} v={v[i]}", line=line
        )


def _parse_floats(text: np.ndarray) -> np.ndarray:
    """Correctly rounded string-to-float conversion; unparsable cells become NaN."""
    try:
        return text.astype(float)
    except ValueError:
        out = np.empty(len(text))
        for i, cell in enumerate(text):
            try:
                out[i] = float(cell)
            except ValueError:
                out[i] = np.nan
        return out


def load_csv(path: str | Path) -> BarSeries:
    """Read a minute-bar CSV (``timestamp,open,high,low,close,volume``, UTC)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such market data file: {path}")
    with path.open() as fh:
        header = fh.readline().strip()
    if header.split(",") != CSV_COLUMNS:
        raise MarketDataError(f"header must be {','.join(CSV_COLUMNS)!r}, got {header!r}", line=1)

    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    # data rows start on line 2
    ts = pd.to_datetime(raw["timestamp"], utc=True, format="ISO8601", errors="coerce")
    cols = {c: _parse_floats(raw[c].to_numpy()) for c in CSV_COLUMNS[1:]}
    bad_ts = ts.isna().to_numpy()
    bad_num = np.zeros(len(raw), dtype=bool)
    for arr in cols.values():
        bad_num |= np.isnan(arr)
    bad = bad_ts | bad_num
    if bad.any():
        i = int(np.argmax(bad))
        raise MarketDataError(f"malformed row {','.join(raw.iloc[i].tolist())!r}", line=i + 2)
    _check_ohlc(cols["open"], cols["high"], cols["low"], cols["close"], cols["volume"], first_line=2)

    stamps = ts.dt.tz_localize(None).to_numpy(dtype="datetime64[ns]")
    if len(stamps) > 1:
        nonmono = np.diff(stamps) <= np.timedelta64(0, "ns")
        if nonmono.any():
            i = int(np.argmax(nonmono))
            raise MarketDataError(
                f"non-monotonic timestamps: {raw['timestamp'].iloc[i]} followed by "
                f"{raw['timestamp'].iloc[i + 1]}",
                line=i + 3,
            )
    return BarSeries(stamps, cols["open"], cols["high"], cols["low"], cols["close"], cols["volume"])


def _format_timestamps(stamps: np.ndarray) -> list[str]:
    return list(np.datetime_as_string(stamps.astype("datetime64[s]"), unit="s"))


def write_csv(data: BarSeries | Sequence[TradingDay], path: str | Path) -> Path:
    """Write bars (or the bars of trading days) in the loader's CSV format."""
    bars = data if isinstance(data, BarSeries) else days_to_bars(data)
    frame = pd.DataFrame({
        "timestamp": [s + "Z" for s in _format_timestamps(bars.timestamps)],
        "open": bars.open, "high": bars.high, "low": bars.low,
        "close": bars.close, "volume": bars.volume,
    })
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def days_to_bars(days: Sequence[TradingDay]) -> BarSeries:
    if not days:
        empty = np.array([], dtype=float)
        return BarSeries(np.array([], dtype="datetime64[ns]"), empty, empty, empty, empty, empty)
    return BarSeries(
        timestamps=np.concatenate([d.timestamps for d in days]),
        open=np.concatenate([d.open for d in days]),
        high=np.concatenate([d.high for d in days]),
        low=np.concatenate([d.low for d in days]),
        close=np.concatenate([d.close for d in days]),
        volume=np.concatenate([d.volume for d in days]),
    )


def _session_open_utc(day: date, session: SessionConfig) -> np.datetime64:
    local = pd.Timestamp(datetime.combine(day, session.start)).tz_localize(session.tz)
    return np.datetime64(local.tz_convert("UTC").tz_localize(None).to_datetime64(), "ns")


def session_timestamps(day: date, session: SessionConfig) -> np.ndarray:
    start = _session_open_utc(day, session)
    return start + np.arange(session.length).astype("timedelta64[m]").astype("timedelta64[ns]")


def clean_and_segment(
    bars: BarSeries | Sequence[Bar],
    min_daily_volume: float = 1000.0,
    session: SessionConfig | None = None,
) -> list[TradingDay]:
    """Split bars into gap-filled sessions and drop illiquid days.

    A missing minute gets open/high/low/close equal to the last traded close
    and zero volume. Leading gaps use the last close before the session (or
    the first session open when no earlier bar exists).
    """
    session = session or SessionConfig()
    if not isinstance(bars, BarSeries):
        bars = BarSeries.from_bars(bars)
    if len(bars) == 0:
        return []

    utc = pd.DatetimeIndex(bars.timestamps).tz_localize("UTC")
    local = utc.tz_convert(session.tz)
    local_dates = np.array(local.date)
    minute_of_day = (local.hour * 60 + local.minute).to_numpy()
    offset = minute_of_day - _minutes(session.start)
    in_session = (offset >= 0) & (offset < session.length)

    days: list[TradingDay] = []
    # chronological input keeps each local date contiguous
    change = np.flatnonzero(local_dates[1:] != local_dates[:-1]) + 1
    bounds = np.concatenate([[0], change, [len(bars)]])
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        d = local_dates[lo]
        idx = np.arange(lo, hi)[in_session[lo:hi]]
        if len(idx) == 0:
            logger.warning("%s: no bars inside the session window; day dropped", d)
            continue
        pos = offset[idx]
        n = session.length
        o = np.full(n, np.nan)
        h = np.full(n, np.nan)
        l = np.full(n, np.nan)
        c = np.full(n, np.nan)
        v = np.zeros(n)
        o[pos], h[pos], l[pos], c[pos], v[pos] = (
            bars.open[idx], bars.high[idx], bars.low[idx], bars.close[idx], bars.volume[idx])

        prior = idx[0] - 1
        seed = bars.close[prior] if prior >= 0 else bars.open[idx[0]]
        fill = pd.Series(c).ffill().to_numpy()
        fill[np.isnan(fill)] = seed
        # shift so each missing minute takes the close of the previous minute
        last_close = np.concatenate([[seed], fill[:-1]])
        missing = np.isnan(c)
        for arr in (o, h, l, c):
            arr[missing] = last_close[missing]

        if v.sum() < min_daily_volume:
            logger.info("%s: total volume %.0f below %.0f; day dropped", d, v.sum(), min_daily_volume)
            continue
        day = TradingDay(d, session_timestamps(d, session), o, h, l, c, v, session)
        days.append(day)
    return days


def _month_key(d: date) -> int:
    return d.year * 12 + d.month - 1


def rolling_splits(
    days: Sequence[TradingDay],
    train_months: int = 12,
    test_months: int = 4,
    val_months: int = 1,
) -> list[RollSplit]:
    """Walk-forward rolls: train (minus trailing validation months), then test.

    Rolls advance by ``test_months`` calendar months so the test windows tile
    the history without overlap.
    """
    if not days:
        logger.warning("rolling_splits: no trading days supplied")
        return []
    if not 0 < val_months < train_months:
        raise ValueError("val_months must be positive and shorter than train_months")
    by_month: dict[int, list[TradingDay]] = {}
    for d in days:
        by_month.setdefault(_month_key(d.date), []).append(d)
    first, last = _month_key(days[0].date), _month_key(days[-1].date)
    span = last - first + 1
    need = train_months + test_months
    if span < need:
        logger.warning(
            "rolling_splits: %d months of history, %d required for one roll", span, need)
        return []

    def collect(lo: int, hi: int) -> list[TradingDay]:
        return [d for m in range(lo, hi) for d in by_month.get(m, [])]

    rolls = []
    start = first
    while start + need - 1 <= last:
        val_start = start + train_months - val_months
        test_start = start + train_months
        rolls.append(RollSplit(
            train_days=collect(start, val_start),
            val_days=collect(val_start, test_start),
            test_days=collect(test_start, test_start + test_months),
        ))
        start += test_months
    return rolls


def _trading_dates(start: date, n: int) -> list[date]:
    out = []
    d = start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += timedelta(days=1)
    return out


def _vol_profile(session: SessionConfig, shape: str) -> np.ndarray:
    n = session.length
    if shape == "flat":
        w = np.ones(n)
    else:
        u = np.linspace(-1.0, 1.0, n)
        w = 1.0 + 2.0 * u**2
    return w / np.sqrt(np.sum(w**2))


def _local_minutes(session: SessionConfig) -> np.ndarray:
    return _minutes(session.start) + np.arange(session.length)


def generate_synthetic(config: SyntheticConfig) -> list[TradingDay]:
    """Generate a deterministic corpus of gap-free synthetic trading days."""
    rng = np.random.default_rng(config.seed)
    session = config.session
    n_days, n = config.n_days, session.length
    sigma = config.daily_vol * _vol_profile(session, config.intraday_vol_shape)

    shocks = rng.standard_normal((n_days, n))
    gaps = rng.standard_normal(n_days) * (config.daily_vol / 2.0)
    wick_hi = np.abs(rng.standard_normal((n_days, n)))
    wick_lo = np.abs(rng.standard_normal((n_days, n)))
    volume = np.round(rng.lognormal(math.log(config.mean_bar_volume), 0.5, (n_days, n)))

    s = config.pattern_strength
    base = shocks * sigma
    if config.planted_pattern in ("momentum", "mean-reversion"):
        sign = 1.0 if config.planted_pattern == "momentum" else -1.0
        logret = np.empty_like(base)
        logret[:, 0] = base[:, 0] - sigma[0] ** 2 / 2
        for j in range(1, n):
            target = sign * s * np.sign(logret[:, j - 1])
            logret[:, j] = base[:, j] + np.log1p(target) - sigma[j] ** 2 / 2
    else:
        drift = np.zeros(n)
        if config.planted_pattern == "time-of-day":
            minutes = _local_minutes(session)
            drift[(minutes >= 11 * 60) & (minutes < 12 * 60)] = s
            drift[(minutes >= 14 * 60) & (minutes < 15 * 60)] = -s
        # lognormal correction keeps the expected simple return equal to the drift
        logret = base + np.log1p(drift) - sigma**2 / 2

    dates = _trading_dates(config.start_date, n_days)
    days = []
    prev_close = config.base_price
    for k, d in enumerate(dates):
        first_open = prev_close * math.exp(gaps[k])
        closes = first_open * np.exp(np.cumsum(logret[k]))
        opens = np.concatenate([[first_open], closes[:-1]])
        top = np.maximum(opens, closes)
        bottom = np.minimum(opens, closes)
        highs = top * np.exp(wick_hi[k] * sigma * 0.5)
        lows = bottom * np.exp(-wick_lo[k] * sigma * 0.5)
        days.append(TradingDay(d, session_timestamps(d, session), opens, highs, lows, closes,
                               volume[k], session))
        prev_close = float(closes[-1])
    return days

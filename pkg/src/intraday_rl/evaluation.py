"""Strategy returns, performance metrics, benchmarks, portfolios, trade analytics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from datetime import date, datetime, timedelta
from typing import Sequence

import numpy as np

from .environment import EpisodeResult, TradeRecord
from .features import FEATURE_NAMES
from .market_data import SessionConfig, TradingDay

TRADING_DAYS = 252
MOMENTUM_LOOKBACK = 21
MOMENTUM_HISTORY = MOMENTUM_LOOKBACK + 1
BENCHMARKS = ("buy_hold", "sell_hold", "momentum")
NA = math.nan


@dataclass
class ReturnSeries:
    """Simple returns per period with the trading date each period belongs to.

    ``turnover`` holds the units traded at the start of each period.
    """

    timestamps: np.ndarray
    returns: np.ndarray
    dates: np.ndarray
    turnover: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.returns)

    def daily(self) -> tuple[np.ndarray, np.ndarray]:
        """(dates, compounded per-day returns)."""
        keys, start = np.unique(self.dates, return_index=True)
        order = np.argsort(start)
        keys, start = keys[order], start[order]
        growth = np.multiply.reduceat(1.0 + self.returns, start) if len(start) else np.array([])
        return keys, growth - 1.0

    def daily_returns(self) -> np.ndarray:
        return self.daily()[1]


def _concat_series(parts: Sequence[ReturnSeries]) -> ReturnSeries:
    return ReturnSeries(
        np.concatenate([p.timestamps for p in parts]),
        np.concatenate([p.returns for p in parts]),
        np.concatenate([p.dates for p in parts]),
        np.concatenate([p.turnover for p in parts]),
    )


def episode_returns(ep: EpisodeResult, commission_bp: float) -> ReturnSeries:
    """Per-minute returns of one episode, priced open to open.

    Minute k holds position a_k from the open of the bar after decision k to
    the next open, paying commission on |a_k - a_{k-1}| at entry.
    """
    day = ep.day
    start, end = day.tradable_range
    horizon = end - start
    pos = np.asarray(ep.positions, dtype=float)
    if len(pos) != horizon:
        raise ValueError(f"{day.date}: trace has {len(pos)} steps, day has {horizon}")
    if start + horizon + 1 >= len(day.open):
        raise ValueError(f"{day.date}: not enough bars to price the trace")
    opens = day.open[start + 1:start + horizon + 2]
    prev = np.concatenate([[0.0], pos[:-1]])
    units = np.abs(pos - prev)
    rate = commission_bp * 1e-4
    r = (pos * (opens[1:] - opens[:-1]) - rate * opens[:-1] * units) / opens[:-1]
    stamps = day.timestamps[start + 1:start + horizon + 1]
    return ReturnSeries(stamps, r, np.full(horizon, day.date, dtype=object), units)


def strategy_returns(episodes: Sequence[EpisodeResult], commission_bp: float) -> ReturnSeries:
    """Concatenated per-minute strategy returns over consecutive episodes."""
    if not episodes:
        raise ValueError("no episodes")
    return _concat_series([episode_returns(ep, commission_bp) for ep in episodes])


def cumulative_curve(series: ReturnSeries | np.ndarray) -> np.ndarray:
    r = series.returns if isinstance(series, ReturnSeries) else np.asarray(series, dtype=float)
    return np.cumprod(1.0 + r) - 1.0


@dataclass
class MetricsReport:
    ann_mean: float
    ann_std: float
    downside_dev: float
    max_drawdown: float
    sharpe: float
    sortino: float
    calmar: float
    pct_positive: float
    pos_neg_ratio: float

    def as_dict(self) -> dict:
        return asdict(self)


def max_drawdown(returns) -> float:
    """Largest peak-to-trough loss of the compounded equity curve starting at 1."""
    equity = np.concatenate([[1.0], np.cumprod(1.0 + np.asarray(returns, dtype=float))])
    peak = np.maximum.accumulate(equity)
    return float(np.max(1.0 - equity / peak))


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else NA


def metrics(daily) -> MetricsReport:
    """Annualized metrics from daily returns; undefined ratios are NaN."""
    r = np.asarray(daily, dtype=float)
    if len(r) < 2:
        raise ValueError("metrics need at least two daily returns")
    ann_mean = TRADING_DAYS * r.mean()
    ann_std = 0.0 if np.all(r == r[0]) else math.sqrt(TRADING_DAYS) * r.std(ddof=1)
    downside = math.sqrt(TRADING_DAYS) * math.sqrt(np.mean(np.minimum(r, 0.0) ** 2))
    mdd = max_drawdown(r)
    pos, neg = r[r > 0], r[r < 0]
    pos_neg = pos.mean() / abs(neg.mean()) if len(pos) and len(neg) else NA
    return MetricsReport(
        ann_mean=float(ann_mean), ann_std=float(ann_std), downside_dev=float(downside),
        max_drawdown=mdd, sharpe=_ratio(ann_mean, ann_std), sortino=_ratio(ann_mean, downside),
        calmar=_ratio(ann_mean, mdd), pct_positive=float(100.0 * np.mean(r > 0)),
        pos_neg_ratio=float(pos_neg),
    )


def sharpe(daily) -> float:
    return metrics(daily).sharpe


def _session_close_time(day: TradingDay) -> np.datetime64:
    return day.timestamps[-1]


def benchmarks(days: Sequence[TradingDay], kind: str, commission_bp: float = 0.08,
               history: Sequence[TradingDay] = ()) -> ReturnSeries:
    """Daily returns of a passive benchmark held overnight.

    ``buy_hold``/``sell_hold`` enter at the first day's open and hold +1/-1 to
    the end. ``momentum`` goes long when the close-to-close return over the 21
    sessions ending at day d-1 is positive and short otherwise, holding from
    the previous close to the day's close; it needs 22 days of ``history``.
    """
    if kind not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {kind!r}; expected one of {BENCHMARKS}")
    if not days:
        raise ValueError("no days")
    rate = commission_bp * 1e-4
    closes = np.array([d.close[-1] for d in days])
    if kind == "momentum":
        hist = list(history)
        need = MOMENTUM_HISTORY
        if len(hist) < need:
            raise ValueError(f"momentum needs {need} days of history, got {len(hist)}")
        last_closes = np.array([d.close[-1] for d in hist + list(days)])
        h = len(hist)
        n = len(days)
        prev = last_closes[h - 1:h - 1 + n]
        ref = last_closes[h - 1 - MOMENTUM_LOOKBACK:h - 1 - MOMENTUM_LOOKBACK + n]
        pos = np.where(prev / ref - 1.0 > 0, 1.0, -1.0)
        base = prev
    else:
        side = 1.0 if kind == "buy_hold" else -1.0
        pos = np.full(len(days), side)
        base = np.concatenate([[days[0].open[0]], closes[:-1]])
    units = np.abs(pos - np.concatenate([[0.0], pos[:-1]]))
    r = (pos * (closes - base) - rate * base * units) / base
    stamps = np.array([_session_close_time(d) for d in days])
    return ReturnSeries(stamps, r, np.array([d.date for d in days], dtype=object), units)


def portfolio(series: Sequence[ReturnSeries]) -> ReturnSeries:
    """Equal-weight average of time-aligned return series."""
    if not series:
        raise ValueError("empty portfolio")
    ref = series[0]
    for s in series[1:]:
        if len(s) != len(ref) or not np.array_equal(s.timestamps, ref.timestamps):
            raise ValueError("portfolio components are not time-aligned")
    r = np.mean([s.returns for s in series], axis=0)
    turnover = None
    if all(s.turnover is not None for s in series):
        turnover = np.mean([s.turnover for s in series], axis=0)
    return ReturnSeries(ref.timestamps.copy(), r, ref.dates.copy(), turnover)


@dataclass
class TradeStats:
    n_trades: int
    win_rate: float
    mean_positive: float
    mean_negative: float
    pos_neg_ratio: float
    expected_return: float
    mean_duration: float

    def as_dict(self) -> dict:
        return asdict(self)


def trade_stats(trades: Sequence[TradeRecord]) -> TradeStats:
    """Win rate (percent), mean winning and non-winning returns, expected return, duration.

    Trades with a net return of exactly zero count as non-winning.
    """
    if not trades:
        return TradeStats(0, NA, NA, NA, NA, NA, NA)
    r = np.array([t.net_return for t in trades])
    wins, losses = r[r > 0], r[r <= 0]
    share = len(wins) / len(r)
    mean_pos = float(wins.mean()) if len(wins) else NA
    mean_neg = float(losses.mean()) if len(losses) else NA
    ratio = mean_pos / abs(mean_neg) if len(wins) and len(losses) and mean_neg != 0 else NA
    expected = (share * mean_pos if len(wins) else 0.0) + \
        ((1.0 - share) * mean_neg if len(losses) else 0.0)
    durations = np.array([t.duration for t in trades], dtype=float)
    return TradeStats(len(r), 100.0 * share, mean_pos, mean_neg, ratio, float(expected),
                      float(durations.mean()))


@dataclass
class IntradayProfile:
    labels: list[str]
    pct_trades: np.ndarray
    mean_duration: np.ndarray


def intraday_profiles(trades: Sequence[TradeRecord], bucket: int = 15,
                      session: SessionConfig | None = None) -> IntradayProfile:
    """Share of trades opened in each ``bucket``-minute slice of the decision window."""
    session = session or SessionConfig()
    n_buckets = math.ceil(session.horizon / bucket)
    counts = np.zeros(n_buckets)
    dur_sum = np.zeros(n_buckets)
    for t in trades:
        b = min(t.entry_step // bucket, n_buckets - 1)
        counts[b] += 1
        dur_sum[b] += t.duration
    total = counts.sum()
    pct = 100.0 * counts / total if total else np.zeros(n_buckets)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_dur = np.where(counts > 0, dur_sum / np.maximum(counts, 1), NA)
    first = datetime.combine(date(2000, 1, 1), session.first_decision)
    labels = [(first + timedelta(minutes=k * bucket)).strftime("%H:%M") for k in range(n_buckets)]
    return IntradayProfile(labels, pct, mean_dur)


@dataclass
class AblationResult:
    feature: str
    per_asset_sharpe: list[float]
    importance: float


def feature_importance(runs, features: Sequence[str] = FEATURE_NAMES,
                       commission_bp: float | None = None) -> list[AblationResult]:
    """Sharpe lost when each observation entry is forced to zero after normalization.

    ``runs`` is a sequence of ``(checkpoint, test_days, warmup_days)`` per
    asset. Importance is the mean over assets of Sharpe(full) - Sharpe(zeroed).
    """
    from .ppo import evaluate_policy

    def run_sharpe(ck, days, warm, zero=()):
        ev = evaluate_policy(ck, days, commission_bp, warm, zero)
        return sharpe(strategy_returns(ev.episodes, ev.commission_bp).daily_returns())

    full = [run_sharpe(ck, days, warm) for ck, days, warm in runs]
    results = []
    for name in features:
        k = FEATURE_NAMES.index(name)
        zeroed = [run_sharpe(ck, days, warm, (k,)) for ck, days, warm in runs]
        deltas = [f - z for f, z in zip(full, zeroed)]
        results.append(AblationResult(name, zeroed, float(np.mean(deltas))))
    return results

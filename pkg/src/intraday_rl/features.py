"""State construction: price-based and positional features and their normalization.

Observation layout (13 entries)::

    ret_1 ret_5 ret_15 ret_30 ret_60 rsi adx ultosc willr | time_left position position_return daily_return
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import indicators

PRICE_FEATURES = ("ret_1", "ret_5", "ret_15", "ret_30", "ret_60", "rsi", "adx", "ultosc", "willr")
POSITIONAL_FEATURES = ("time_left", "position", "position_return", "daily_return")
FEATURE_NAMES = PRICE_FEATURES + POSITIONAL_FEATURES
N_FEATURES = len(FEATURE_NAMES)
N_RETURNS = len(indicators.RETURN_WINDOWS)

OSC_DOMAIN = (0.0, 100.0)


@dataclass(frozen=True)
class PriceFeatures:
    ret_1: float
    ret_5: float
    ret_15: float
    ret_30: float
    ret_60: float
    rsi: float
    adx: float
    ultosc: float
    willr: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PRICE_FEATURES])

    @classmethod
    def from_array(cls, row) -> "PriceFeatures":
        return cls(*(float(x) for x in row))


@dataclass(frozen=True)
class PositionalFeatures:
    time_left: int
    position: int
    position_return: float
    daily_return: float


@dataclass(frozen=True)
class Segment:
    """A held position between two position changes (flat segments included).

    ``enter_step`` is the decision step that chose the position; it executes
    at the open of the following bar, ``entry_price``, paying ``entry_cost``.
    """

    position: int
    enter_step: int
    entry_price: float
    entry_cost: float
    exit_step: int | None = None
    exit_price: float | None = None

    def pnl(self, mark: float) -> float:
        return self.position * (mark - self.entry_price) - self.entry_cost


def price_feature_matrix(highs, lows, closes) -> np.ndarray:
    """Raw price features for every bar, shape (bars, 9); NaN where undefined."""
    out = np.empty((len(closes), len(PRICE_FEATURES)))
    out[:, :N_RETURNS] = indicators.lookback_returns_series(closes)
    out[:, 5] = indicators.rsi_series(closes)
    out[:, 6] = indicators.adx_series(highs, lows, closes)
    out[:, 7] = indicators.ultosc_series(highs, lows, closes)
    out[:, 8] = indicators.willr_series(highs, lows, closes)
    return out


def positional_features(segments: Sequence[Segment], current: Segment | None, t: int,
                        day, horizon: int = 360) -> PositionalFeatures:
    """Positional context at decision step ``t`` recomputed from the segment log.

    ``segments`` are the completed segments of the day in order; ``current`` is
    the segment being held (None before the first position change). Costs are
    already folded into each segment's ``entry_cost``.
    """
    start, _ = day.tradable_range
    close_t = float(day.close[start + t])
    day_open = float(day.open[start])
    realized = sum(s.pnl(s.exit_price) for s in segments)
    if current is None:
        position, pr, open_pnl = 0, 0.0, 0.0
    else:
        position = current.position
        open_pnl = current.pnl(close_t)
        pr = open_pnl / current.entry_price if position != 0 else 0.0
    return PositionalFeatures(
        time_left=horizon - 1 - t,
        position=position,
        position_return=pr,
        daily_return=(realized + open_pnl) / day_open,
    )


def minmax(x, lo: float, hi: float):
    return 2.0 * (x - lo) / (hi - lo) - 1.0


class Normalizer:
    """Running standardization buffers plus fixed-domain min-max scaling.

    Lookback returns are standardized against a FIFO of past bar returns
    (``return_capacity`` rows, default five sessions of usable bars). Position
    and daily returns are standardized against the values of the last
    ``episode_capacity`` completed episodes; those statistics are frozen at
    the start of each episode, so they only reflect the past.
    """

    def __init__(self, return_capacity: int = 5 * 390, episode_capacity: int = 100,
                 horizon: int = 360, eps: float = 1e-12):
        self.return_capacity = return_capacity
        self.episode_capacity = episode_capacity
        self.horizon = horizon
        self.eps = eps
        self.returns = np.empty((0, N_RETURNS))
        self.last_time: np.datetime64 | None = None
        self.pr_history: deque[np.ndarray] = deque(maxlen=episode_capacity)
        self.dr_history: deque[np.ndarray] = deque(maxlen=episode_capacity)
        self._pr_episode: list[float] = []
        self._dr_episode: list[float] = []
        self._pr_stats = (0.0, 0.0)
        self._dr_stats = (0.0, 0.0)
        self.begin_episode()

    # -- lookback returns -------------------------------------------------
    def standardize_returns(self, block: np.ndarray, first_time=None, last_time=None) -> np.ndarray:
        """Standardize rows in order, each against the buffer before it, then buffer them.

        A block starting at or before the last buffered timestamp means the
        caller went back in time (a new training epoch); the buffer is then
        cleared so no later bar informs an earlier one.
        """
        block = np.atleast_2d(np.asarray(block, dtype=float))
        if first_time is not None and self.last_time is not None and first_time <= self.last_time:
            self.returns = np.empty((0, N_RETURNS))
        prior = self.returns
        joined = np.concatenate([prior, block])
        # centre on the oldest row so no row's statistics touch later rows
        dev = joined - joined[0]
        cs1 = np.concatenate([np.zeros((1, N_RETURNS)), np.cumsum(dev, axis=0)])
        cs2 = np.concatenate([np.zeros((1, N_RETURNS)), np.cumsum(dev**2, axis=0)])
        g = np.arange(len(prior), len(joined))
        lo = np.maximum(0, g - self.return_capacity)
        count = (g - lo)[:, None].astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_dev = (cs1[g] - cs1[lo]) / count
            var = (cs2[g] - cs2[lo]) / count - mean_dev**2
            std = np.sqrt(np.maximum(var, 0.0))
            z = (dev[g] - mean_dev) / std
        z = np.where((count >= 2) & (std >= self.eps), z, 0.0)
        self.returns = joined[-self.return_capacity:]
        if last_time is not None:
            self.last_time = last_time
        return z

    # -- position / daily return -----------------------------------------
    @staticmethod
    def _stats(history) -> tuple[float, float]:
        if not history:
            return 0.0, 0.0
        values = np.concatenate(list(history))
        if len(values) < 2:
            return 0.0, 0.0
        return float(values.mean()), float(values.std())

    def begin_episode(self) -> None:
        self._pr_episode = []
        self._dr_episode = []
        self._pr_stats = self._stats(self.pr_history)
        self._dr_stats = self._stats(self.dr_history)

    def end_episode(self) -> None:
        if self._pr_episode:
            self.pr_history.append(np.array(self._pr_episode))
            self.dr_history.append(np.array(self._dr_episode))
        self.begin_episode()

    def _z(self, x: float, stats: tuple[float, float]) -> float:
        mean, std = stats
        return (x - mean) / std if std >= self.eps else 0.0

    def standardize_positional(self, pr: float, dr: float) -> tuple[float, float]:
        z = self._z(pr, self._pr_stats), self._z(dr, self._dr_stats)
        self._pr_episode.append(pr)
        self._dr_episode.append(dr)
        return z

    # -- full observation -------------------------------------------------
    def scale_fixed(self, price_row: np.ndarray, time_left: int) -> tuple[np.ndarray, float]:
        """Min-max scale the oscillators (columns 5-8) and time left."""
        osc = minmax(np.asarray(price_row[N_RETURNS:], dtype=float), *OSC_DOMAIN)
        return osc, minmax(float(time_left), 0.0, self.horizon - 1.0)

    def copy(self) -> "Normalizer":
        other = Normalizer(self.return_capacity, self.episode_capacity, self.horizon, self.eps)
        other.returns = self.returns.copy()
        other.last_time = self.last_time
        other.pr_history.extend(a.copy() for a in self.pr_history)
        other.dr_history.extend(a.copy() for a in self.dr_history)
        other.begin_episode()
        return other

    def episode_arrays(self) -> dict[str, np.ndarray]:
        """PR/DR history as rectangular arrays, for checkpoints."""
        def stack(hist):
            return np.stack(list(hist)) if hist else np.empty((0, self.horizon))
        return {"pr_history": stack(self.pr_history), "dr_history": stack(self.dr_history)}

    def load_episode_arrays(self, pr: np.ndarray, dr: np.ndarray) -> None:
        self.pr_history.clear()
        self.dr_history.clear()
        self.pr_history.extend(np.array(row) for row in pr)
        self.dr_history.extend(np.array(row) for row in dr)
        self.begin_episode()


def normalize(raw_price: PriceFeatures, raw_pos: PositionalFeatures, norm: Normalizer,
              timestamp=None) -> np.ndarray:
    """Build one 13-entry observation and update the normalizer's buffers."""
    row = raw_price.as_array()
    z_ret = norm.standardize_returns(row[None, :N_RETURNS], timestamp, timestamp)[0]
    osc, tl = norm.scale_fixed(row, raw_pos.time_left)
    z_pr, z_dr = norm.standardize_positional(raw_pos.position_return, raw_pos.daily_return)
    obs = np.empty(N_FEATURES)
    obs[:N_RETURNS] = z_ret
    obs[N_RETURNS:9] = osc
    obs[9] = tl
    obs[10] = raw_pos.position
    obs[11] = z_pr
    obs[12] = z_dr
    return obs

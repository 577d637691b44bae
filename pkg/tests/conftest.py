from __future__ import annotations

from datetime import date

import numpy as np
import pytest

from intraday_rl.market_data import (SessionConfig, SyntheticConfig, TradingDay,
                                     generate_synthetic, session_timestamps)

SESSION = SessionConfig()


def make_day(closes=None, opens=None, d: date = date(2020, 3, 2), volume: float = 100.0,
             session: SessionConfig = SESSION) -> TradingDay:
    """A full session from explicit prices; missing opens default to the previous close."""
    n = session.length
    closes = np.full(n, 100.0) if closes is None else np.asarray(closes, dtype=float)
    if opens is None:
        opens = np.concatenate([[closes[0]], closes[:-1]])
    opens = np.asarray(opens, dtype=float)
    highs = np.maximum(opens, closes) + 0.01
    lows = np.minimum(opens, closes) - 0.01
    return TradingDay(d, session_timestamps(d, session), opens, highs, lows, closes,
                      np.full(n, volume), session)


def random_walk_day(seed: int, d: date = date(2020, 3, 2), vol: float = 5e-4) -> TradingDay:
    rng = np.random.default_rng(seed)
    closes = 100.0 * np.exp(np.cumsum(rng.normal(0.0, vol, SESSION.length)))
    opens = np.concatenate([[100.0], closes[:-1]]) * np.exp(rng.normal(0.0, vol / 4, SESSION.length))
    return make_day(closes, opens, d)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(SyntheticConfig(n_days=30, seed=3, planted_pattern="time-of-day",
                                              pattern_strength=5e-4, start_date=date(2020, 1, 1)))

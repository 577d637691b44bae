"""Technical indicators over minute bars.

Each ``*_series`` function returns one value per input bar with NaN where the
indicator is not yet defined; the scalar functions return the value at the
last bar and raise :class:`InsufficientHistory` when it is undefined.
RSI and ADX use Wilder smoothing seeded with a simple average.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

RETURN_WINDOWS = (1, 5, 15, 30, 60)


class InsufficientHistory(ValueError):
    pass


def _wilder(x: np.ndarray, w: int, start: int) -> np.ndarray:
    """Wilder average of ``x`` seeded at ``start`` with mean(x[start-w+1 : start+1])."""
    out = np.full(len(x), np.nan)
    if len(x) <= start:
        return out
    seed = x[start - w + 1:start + 1].mean()
    out[start] = seed
    tail = x[start + 1:]
    if len(tail):
        keep = 1.0 - 1.0 / w
        out[start + 1:], _ = lfilter([1.0 / w], [1.0, -keep], tail, zi=[keep * seed])
    return out


def lookback_returns_series(closes: np.ndarray, windows=RETURN_WINDOWS) -> np.ndarray:
    closes = np.asarray(closes, dtype=float)
    out = np.full((len(closes), len(windows)), np.nan)
    for k, w in enumerate(windows):
        out[w:, k] = (closes[w:] - closes[:-w]) / closes[:-w]
    return out


def lookback_returns(closes, t: int, windows=RETURN_WINDOWS) -> np.ndarray:
    """Simple returns of the close at ``t`` over each lookback window."""
    closes = np.asarray(closes, dtype=float)
    if t < max(windows) or t >= len(closes):
        raise InsufficientHistory(f"need {max(windows)} bars before index {t}")
    return np.array([(closes[t] - closes[t - w]) / closes[t - w] for w in windows])


def rsi_series(closes, w: int = 14) -> np.ndarray:
    closes = np.asarray(closes, dtype=float)
    diff = np.concatenate([[0.0], np.diff(closes)])
    gain = _wilder(np.maximum(diff, 0.0), w, w)
    loss = _wilder(np.maximum(-diff, 0.0), w, w)
    total = gain + loss
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total > 0, 100.0 * gain / total, 50.0)
    out[np.isnan(gain)] = np.nan
    return out


def adx_series(highs, lows, closes, w: int = 14) -> np.ndarray:
    h, l, c = (np.asarray(a, dtype=float) for a in (highs, lows, closes))
    n = len(c)
    up = np.zeros(n)
    down = np.zeros(n)
    tr = np.zeros(n)
    up[1:] = h[1:] - h[:-1]
    down[1:] = l[:-1] - l[1:]
    plus_dm = np.where((up > down) & (up > 0), up, 0.0)
    minus_dm = np.where((down > up) & (down > 0), down, 0.0)
    tr[1:] = np.maximum(h[1:], c[:-1]) - np.minimum(l[1:], c[:-1])

    s_tr = _wilder(tr, w, w)
    s_plus = _wilder(plus_dm, w, w)
    s_minus = _wilder(minus_dm, w, w)
    with np.errstate(invalid="ignore", divide="ignore"):
        plus_di = np.where(s_tr > 0, 100.0 * s_plus / s_tr, 0.0)
        minus_di = np.where(s_tr > 0, 100.0 * s_minus / s_tr, 0.0)
        di_sum = plus_di + minus_di
        dx = np.where(di_sum > 0, 100.0 * np.abs(plus_di - minus_di) / di_sum, 0.0)
    dx[:w] = np.nan
    if n < 2 * w:
        return np.full(n, np.nan)
    return _wilder(dx, w, 2 * w - 1)


def ultosc_series(highs, lows, closes, w1: int = 7, w2: int = 14, w3: int = 28) -> np.ndarray:
    h, l, c = (np.asarray(a, dtype=float) for a in (highs, lows, closes))
    n = len(c)
    out = np.full(n, np.nan)
    if n <= w3:
        return out
    low_ref = np.minimum(l[1:], c[:-1])
    bp = c[1:] - low_ref
    tr = np.maximum(h[1:], c[:-1]) - low_ref

    def window_avg(w):
        # bars w3..n-1 map to bp/tr indices w3-1..n-2
        bp_sum = sliding_window_view(bp, w).sum(axis=-1)[w3 - w:]
        tr_sum = sliding_window_view(tr, w).sum(axis=-1)[w3 - w:]
        return bp_sum, tr_sum

    parts = [window_avg(w) for w in (w1, w2, w3)]
    zero = np.zeros(n - w3, dtype=bool)
    for _, t in parts:
        zero |= t == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        a1, a2, a3 = (b / t for b, t in parts)
        val = 100.0 * (4.0 * a1 + 2.0 * a2 + a3) / 7.0
    out[w3:] = np.where(zero, 50.0, val)
    return out


def willr_series(highs, lows, closes, w: int = 14) -> np.ndarray:
    """Williams %R as a magnitude: 0 at the window high, 100 at the window low."""
    h, l, c = (np.asarray(a, dtype=float) for a in (highs, lows, closes))
    n = len(c)
    out = np.full(n, np.nan)
    if n < w:
        return out
    hh = sliding_window_view(h, w).max(axis=-1)
    ll = sliding_window_view(l, w).min(axis=-1)
    span = hh - ll
    with np.errstate(invalid="ignore", divide="ignore"):
        val = 100.0 * (hh - c[w - 1:]) / span
    out[w - 1:] = np.where(span > 0, val, 50.0)
    return out


def _last(series: np.ndarray, name: str) -> float:
    value = series[-1] if len(series) else np.nan
    if np.isnan(value):
        raise InsufficientHistory(f"{name}: not enough bars ({len(series)})")
    return float(value)


def rsi(closes, w: int = 14) -> float:
    return _last(rsi_series(closes, w), "rsi")


def adx(highs, lows, closes, w: int = 14) -> float:
    if len(closes) < 2 * w + 1:
        raise InsufficientHistory(f"adx: need {2 * w + 1} bars, got {len(closes)}")
    return _last(adx_series(highs, lows, closes, w), "adx")


def ultosc(highs, lows, closes, w1: int = 7, w2: int = 14, w3: int = 28) -> float:
    return _last(ultosc_series(highs, lows, closes, w1, w2, w3), "ultosc")


def willr(highs, lows, closes, w: int = 14) -> float:
    return _last(willr_series(highs, lows, closes, w), "willr")

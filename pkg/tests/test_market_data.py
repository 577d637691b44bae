from __future__ import annotations

import logging
from datetime import date, datetime, timedelta, timezone

import numpy as np
import pytest

from intraday_rl.market_data import (Bar, BarSeries, MarketDataError, SessionConfig,
                                     SyntheticConfig, clean_and_segment, days_to_bars,
                                     generate_synthetic, load_csv, rolling_splits,
                                     session_timestamps, write_csv)

from conftest import make_day

HEADER = "timestamp,open,high,low,close,volume\n"


def write(tmp_path, body: str):
    p = tmp_path / "bars.csv"
    p.write_text(HEADER + body)
    return p


class TestLoadCsv:
    def test_row_maps_to_bar(self, tmp_path):
        bars = load_csv(write(tmp_path, "2015-03-02T09:31:00Z,100.0,100.5,99.8,100.2,1500\n"))
        assert len(bars) == 1
        b = bars[0]
        assert b == Bar(datetime(2015, 3, 2, 9, 31, tzinfo=timezone.utc), 100.0, 100.5, 99.8,
                        100.2, 1500.0)

    def test_high_below_low_reports_line(self, tmp_path):
        body = ("2015-03-02T09:31:00Z,100.0,100.5,99.8,100.2,1500\n"
                "2015-03-02T09:32:00Z,100.0,99.0,101.0,100.2,1500\n")
        with pytest.raises(MarketDataError) as exc:
            load_csv(write(tmp_path, body))
        assert exc.value.line == 3

    def test_malformed_row_reports_line(self, tmp_path):
        body = ("2015-03-02T09:31:00Z,100.0,100.5,99.8,100.2,1500\n"
                "2015-03-02T09:32:00Z,abc,100.5,99.8,100.2,1500\n")
        with pytest.raises(MarketDataError) as exc:
            load_csv(write(tmp_path, body))
        assert exc.value.line == 3

    def test_out_of_order_names_both_timestamps(self, tmp_path):
        body = ("2015-03-02T09:32:00Z,100.0,100.5,99.8,100.2,1500\n"
                "2015-03-02T09:31:00Z,100.0,100.5,99.8,100.2,1500\n")
        with pytest.raises(MarketDataError, match="09:32:00Z.*09:31:00Z"):
            load_csv(write(tmp_path, body))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_csv(tmp_path / "nope.csv")

    def test_bad_header(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("time,o,h,l,c,v\n")
        with pytest.raises(MarketDataError):
            load_csv(p)

    def test_round_trip_is_exact(self, tmp_path):
        days = generate_synthetic(SyntheticConfig(n_days=2, seed=1))
        path = write_csv(days, tmp_path / "a.csv")
        back = load_csv(path)
        orig = days_to_bars(days)
        for name in ("timestamps", "open", "high", "low", "close", "volume"):
            np.testing.assert_array_equal(getattr(back, name), getattr(orig, name))


def _bars_of(day, drop=()):
    keep = np.setdiff1d(np.arange(len(day)), drop)
    return BarSeries(day.timestamps[keep], day.open[keep], day.high[keep], day.low[keep],
                     day.close[keep], day.volume[keep])


class TestCleanAndSegment:
    def test_missing_minute_filled_with_last_close(self):
        closes = np.full(450, 100.0)
        closes[76] = 101.3  # 10:46 local
        day = make_day(closes, volume=10.0)
        k = 77  # 10:47 local
        (clean,) = clean_and_segment(_bars_of(day, drop=[k]))
        assert len(clean) == 450
        assert (clean.open[k], clean.high[k], clean.low[k], clean.close[k]) == (101.3,) * 4
        assert clean.volume[k] == 0.0
        assert str(clean.timestamps[k]).startswith("2020-03-02T15:47")  # EST: UTC-5

    def test_illiquid_day_dropped(self):
        day = make_day(volume=2.0)  # 900 total
        assert day.total_volume == 900.0
        assert clean_and_segment(_bars_of(day), min_daily_volume=1000.0) == []

    def test_clean_day_unchanged(self):
        day = generate_synthetic(SyntheticConfig(n_days=1, seed=4))[0]
        day = type(day)(day.date, day.timestamps, day.open, day.high, day.low, day.close,
                        np.full(450, 50_000 / 450), day.session)
        (clean,) = clean_and_segment(_bars_of(day))
        for name in ("timestamps", "open", "high", "low", "close", "volume"):
            np.testing.assert_array_equal(getattr(clean, name), getattr(day, name))

    def test_idempotent(self):
        day = generate_synthetic(SyntheticConfig(n_days=3, seed=5))
        rng = np.random.default_rng(0)
        bars = days_to_bars(day)
        keep = np.sort(rng.choice(len(bars), len(bars) - 200, replace=False))
        thin = BarSeries(*(getattr(bars, n)[keep] for n in
                           ("timestamps", "open", "high", "low", "close", "volume")))
        once = clean_and_segment(thin)
        twice = clean_and_segment(days_to_bars(once))
        assert len(once) == len(twice) == 3
        for a, b in zip(once, twice):
            for name in ("timestamps", "open", "high", "low", "close", "volume"):
                np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
            a.validate()

    def test_day_without_session_bars_is_dropped_with_warning(self, caplog):
        day = make_day(volume=10.0)
        early = datetime(2020, 3, 3, 12, 0, tzinfo=timezone.utc)  # 07:00 New York, before the session
        extra = Bar(early, 100.0, 100.0, 100.0, 100.0, 10.0)
        bars = BarSeries.from_bars(list(_bars_of(day)) + [extra])
        with caplog.at_level(logging.WARNING):
            out = clean_and_segment(bars)
        assert [d.date for d in out] == [date(2020, 3, 2)]
        assert "no bars inside the session" in caplog.text

    def test_out_of_session_bars_ignored(self):
        day = make_day(volume=10.0)
        late = Bar(datetime(2020, 3, 2, 22, 30, tzinfo=timezone.utc), 90.0, 90.0, 90.0, 90.0, 5.0)  # 17:30 local
        (clean,) = clean_and_segment(BarSeries.from_bars(list(_bars_of(day)) + [late]))
        assert clean.close[-1] == 100.0 and len(clean) == 450

    def test_dst_session_alignment(self):
        # 09:30 New York is 13:30 UTC in summer, 14:30 UTC in winter
        s = SessionConfig()
        assert str(session_timestamps(date(2020, 7, 1), s)[0]).startswith("2020-07-01T13:30")
        assert str(session_timestamps(date(2020, 1, 2), s)[0]).startswith("2020-01-02T14:30")


class _Stub:
    def __init__(self, d):
        self.date = d


def _weekdays(start: date, end: date):
    out, d = [], start
    while d <= end:
        if d.weekday() < 5:
            out.append(_Stub(d))
        d += timedelta(days=1)
    return out


class TestRollingSplits:
    def test_decade_gives_27_rolls(self):
        rolls = rolling_splits(_weekdays(date(2012, 1, 1), date(2021, 12, 31)))
        assert len(rolls) == 27
        assert rolls[0].test_days[0].date == date(2013, 1, 1)
        assert rolls[0].val_days[0].date == date(2012, 12, 3)
        assert rolls[-1].test_days[-1].date == date(2021, 12, 31)

    def test_sixteen_months_one_roll(self):
        assert len(rolling_splits(_weekdays(date(2020, 1, 1), date(2021, 4, 30)))) == 1

    def test_fifteen_months_none(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert rolling_splits(_weekdays(date(2020, 1, 1), date(2021, 3, 31))) == []
        assert "required for one roll" in caplog.text

    def test_split_invariants(self):
        rolls = rolling_splits(_weekdays(date(2012, 1, 1), date(2016, 6, 30)))
        for r in rolls:
            assert r.train_days[-1].date < r.val_days[0].date
            assert r.val_days[-1].date < r.test_days[0].date
            prev_month = (r.test_days[0].date.month - 2) % 12 + 1
            assert {d.date.month for d in r.val_days} == {prev_month}
        for a, b in zip(rolls, rolls[1:]):
            gap = [d for d in _weekdays(a.test_days[-1].date, b.test_days[0].date)][1:-1]
            assert gap == []


class TestSynthetic:
    def test_deterministic(self):
        cfg = SyntheticConfig(n_days=3, seed=7, planted_pattern="momentum", pattern_strength=1e-4)
        a, b = generate_synthetic(cfg), generate_synthetic(cfg)
        for x, y in zip(a, b):
            for name in ("timestamps", "open", "high", "low", "close", "volume"):
                assert getattr(x, name).tobytes() == getattr(y, name).tobytes()

    def test_zero_vol_is_flat(self):
        for day in generate_synthetic(SyntheticConfig(n_days=2, daily_vol=0.0)):
            assert np.all(day.close == 100.0) and np.all(day.open == 100.0)

    def test_invariants_hold(self):
        for shape in ("flat", "u-shape"):
            for day in generate_synthetic(SyntheticConfig(n_days=3, seed=1, intraday_vol_shape=shape,
                                                          planted_pattern="mean-reversion",
                                                          pattern_strength=2e-4)):
                day.validate()

    def test_time_of_day_drift_matches_planted_strength(self):
        days = generate_synthetic(SyntheticConfig(n_days=200, seed=11, planted_pattern="time-of-day",
                                                  pattern_strength=5e-4))
        # bars stamped 11:00-11:59 local sit at offsets 90..149
        r = np.concatenate([d.close[90:150] / d.open[90:150] - 1.0 for d in days])
        se = r.std(ddof=1) / np.sqrt(len(r))
        assert abs(r.mean() - 5e-4) < 3 * se
        r2 = np.concatenate([d.close[270:330] / d.open[270:330] - 1.0 for d in days])
        assert abs(r2.mean() + 5e-4) < 3 * r2.std(ddof=1) / np.sqrt(len(r2))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SyntheticConfig(n_days=0)
        with pytest.raises(ValueError):
            SyntheticConfig(n_days=1, pattern_strength=-1.0)
        with pytest.raises(ValueError):
            SyntheticConfig(n_days=1, planted_pattern="bogus")

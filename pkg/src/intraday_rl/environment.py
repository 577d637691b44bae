"""Episodic intraday trading environment: one trading day is one episode."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .features import (FEATURE_NAMES, N_FEATURES, N_RETURNS, Normalizer, Segment,
                       minmax, OSC_DOMAIN)
from .market_data import TradingDay

ACTIONS = (-1, 0, 1)
# greedy tie-break order: flat first, then short, then long
TIE_ORDER = (1, 0, 2)


class EpisodeError(RuntimeError):
    pass


@dataclass(frozen=True)
class CostModel:
    """Proportional commission quoted in basis points of traded price."""

    commission_bp: float = 0.08

    def __post_init__(self):
        if self.commission_bp < 0:
            raise ValueError("commission_bp must be >= 0")

    @property
    def rate(self) -> float:
        return self.commission_bp * 1e-4


@dataclass(frozen=True)
class TradeRecord:
    """A completed long or short position.

    ``net_return`` charges one unit of commission at entry and one at exit,
    relative to the entry price. Steps are decision steps; the trade is
    executed at the open of the bar after each of them.
    """

    side: int
    entry_step: int
    entry_price: float
    exit_step: int
    exit_price: float
    net_return: float
    entry_time: np.datetime64 | None = None

    @property
    def duration(self) -> int:
        return self.exit_step - self.entry_step


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    log_prob: float
    value: float
    done: bool


@dataclass
class EpisodeResult:
    """Arrays for one episode; row k belongs to decision step k."""

    day: TradingDay
    states: np.ndarray
    action_index: np.ndarray  # index into ACTIONS chosen by the policy
    positions: np.ndarray  # executed positions (final step forced flat)
    rewards: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    p_exec: np.ndarray
    tx: np.ndarray
    trades: list[TradeRecord] = field(default_factory=list)

    @property
    def dones(self) -> np.ndarray:
        d = np.zeros(len(self.rewards), dtype=bool)
        d[-1] = True
        return d

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def transitions(self) -> list[Transition]:
        dones = self.dones
        return [
            Transition(self.states[k], ACTIONS[self.action_index[k]], float(self.rewards[k]),
                       float(self.log_probs[k]), float(self.values[k]), bool(dones[k]))
            for k in range(len(self.rewards))
        ]

    def timestamps(self) -> np.ndarray:
        start, end = self.day.tradable_range
        return self.day.timestamps[start:end]

    def write_trace(self, path: str | Path) -> Path:
        """Episode trace CSV: step, timestamp, action, position, p_exec, reward, tx."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        stamps = np.datetime_as_string(self.timestamps().astype("datetime64[s]"), unit="s")
        chosen = np.array(ACTIONS)[self.action_index]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "timestamp", "action", "position", "p_exec", "reward", "tx"])
            for k in range(len(self.rewards)):
                w.writerow([k, stamps[k] + "Z", int(chosen[k]), int(self.positions[k]),
                            repr(float(self.p_exec[k])), repr(float(self.rewards[k])),
                            repr(float(self.tx[k]))])
        return path


class TradingEnv:
    """Fixed-horizon trading day with target-position actions.

    Action ``a_t`` is executed at the next bar's open when it changes the
    position; the step reward is the log return of one unit after commission.
    The last decision step is forced flat, so every episode ends with no
    position.
    """

    def __init__(self, cost: CostModel | None = None, normalizer: Normalizer | None = None,
                 zero_features: Sequence[int] = (), record_features: bool = False):
        self.cost = cost or CostModel()
        self.normalizer = normalizer or Normalizer()
        self.zero_features = tuple(zero_features)
        self.record_features = record_features
        self.day: TradingDay | None = None
        self.done = True

    @property
    def horizon(self) -> int:
        return self.day.session.horizon

    def reset(self, day: TradingDay) -> np.ndarray:
        session = day.session
        start = session.decision_offset
        horizon = session.horizon
        if start < session.lookback:
            raise EpisodeError(
                f"{day.date}: first decision bar {start} leaves less than "
                f"{session.lookback} bars of lookback")
        if len(day) < start + horizon + 2:
            raise EpisodeError(f"{day.date}: {len(day)} bars cannot cover the decision window")
        norm = self.normalizer
        norm.horizon = horizon
        norm.begin_episode()

        lb = session.lookback
        raw = day.price_features
        z_ret = norm.standardize_returns(raw[lb:, :N_RETURNS], day.timestamps[lb], day.timestamps[-1])
        window = slice(start, start + horizon)
        price_obs = np.empty((horizon, 9))
        price_obs[:, :N_RETURNS] = z_ret[start - lb:start - lb + horizon]
        price_obs[:, N_RETURNS:] = minmax(raw[window, N_RETURNS:], *OSC_DOMAIN)
        self._price_obs = price_obs
        self._raw_price = raw[window]

        self.day = day
        self._start = start
        self._open = day.open.tolist()
        self._close = day.close.tolist()
        self._day_open = self._open[start]
        self.t = 0
        self.position = 0
        self.segments: list[Segment] = []
        self.current: Segment | None = None
        self.realized = 0.0
        self.trades: list[TradeRecord] = []
        self.feature_rows: list[np.ndarray] = []
        self.done = False
        return self._observe()

    def positional(self) -> tuple[int, int, float, float]:
        """(time_left, position, position_return, daily_return) at the current step."""
        close_t = self._close[self._start + self.t]
        cur = self.current
        if cur is None:
            open_pnl, pr = 0.0, 0.0
        else:
            open_pnl = cur.position * (close_t - cur.entry_price) - cur.entry_cost
            pr = open_pnl / cur.entry_price if cur.position != 0 else 0.0
        dr = (self.realized + open_pnl) / self._day_open
        return self.horizon - 1 - self.t, self.position, pr, dr

    def _observe(self) -> np.ndarray:
        time_left, pos, pr, dr = self.positional()
        z_pr, z_dr = self.normalizer.standardize_positional(pr, dr)
        obs = np.empty(N_FEATURES)
        obs[:9] = self._price_obs[self.t]
        obs[9] = 2.0 * time_left / (self.horizon - 1) - 1.0
        obs[10] = pos
        obs[11] = z_pr
        obs[12] = z_dr
        if self.zero_features:
            obs[list(self.zero_features)] = 0.0
        if self.record_features:
            raw = np.concatenate([self._raw_price[self.t], [time_left, pos, pr, dr]])
            self.feature_rows.append(np.concatenate([raw, obs]))
        return obs

    def step(self, action: int) -> tuple[np.ndarray | None, float, bool, dict]:
        """Apply a target position; returns (next_obs, reward, done, info).

        ``next_obs`` is None once the episode is done.
        """
        if self.done:
            raise EpisodeError("step() called on a finished episode")
        a = int(action)
        if a not in ACTIONS:
            raise ValueError(f"action must be one of {ACTIONS}, got {action!r}")
        t = self.t
        if t == self.horizon - 1:
            a = 0
        bar = self._start + t
        o_next = self._open[bar + 1]
        c_next = self._close[bar + 1]
        units = abs(a - self.position)
        tx = self.cost.rate * o_next * units
        p_exec = o_next if units else self._close[bar]
        growth = (p_exec + a * (c_next - p_exec) - tx) / p_exec
        if not growth > 0:
            raise EpisodeError(f"non-positive wealth ratio {growth} at step {t}")
        reward = math.log(growth)

        if units:
            self._change_position(a, t, o_next, tx)
        self.position = a
        self.t = t + 1
        info = {"position": a, "p_exec": p_exec, "tx": tx}
        if self.t == self.horizon:
            self.done = True
            self.normalizer.end_episode()
            return None, reward, True, info
        return self._observe(), reward, False, info

    def _change_position(self, a: int, t: int, price: float, tx: float) -> None:
        cur = self.current
        if cur is not None:
            closed = Segment(cur.position, cur.enter_step, cur.entry_price, cur.entry_cost,
                             exit_step=t, exit_price=price)
            self.segments.append(closed)
            self.realized += closed.pnl(price)
            if cur.position != 0:
                rate = self.cost.rate
                entry = cur.entry_price
                net = (cur.position * (price - entry) - rate * entry - rate * price) / entry
                self.trades.append(TradeRecord(
                    side=cur.position, entry_step=cur.enter_step, entry_price=entry,
                    exit_step=t, exit_price=price, net_return=net,
                    entry_time=self.day.timestamps[self._start + cur.enter_step + 1]))
        self.current = Segment(a, t, price, tx)


Policy = Callable[[np.ndarray], tuple[np.ndarray, float]]


def greedy_index(probs: np.ndarray) -> int:
    best = max(probs)
    for i in TIE_ORDER:
        if probs[i] == best:
            return i
    raise ValueError(f"invalid distribution {probs!r}")


def sample_index(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from a three-way distribution with uniform ``u``."""
    c0 = probs[0]
    if u < c0:
        return 0
    if u < c0 + probs[1] or probs[2] <= 0:
        return 1
    return 2


def run_episode(env: TradingEnv, day: TradingDay, policy: Policy, mode: str = "greedy",
                rng: np.random.Generator | None = None) -> EpisodeResult:
    """Roll one full day; ``mode`` is ``"sample"`` (needs ``rng``) or ``"greedy"``."""
    if mode not in ("sample", "greedy"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs a random generator")
    obs = env.reset(day)
    horizon = env.horizon
    states = np.empty((horizon, N_FEATURES))
    idx = np.empty(horizon, dtype=np.int64)
    positions = np.empty(horizon, dtype=np.int64)
    rewards = np.empty(horizon)
    logps = np.empty(horizon)
    values = np.empty(horizon)
    p_exec = np.empty(horizon)
    tx = np.empty(horizon)
    uniforms = rng.random(horizon) if mode == "sample" else None
    for k in range(horizon):
        states[k] = obs
        probs, value = policy(obs)
        i = sample_index(probs, uniforms[k]) if mode == "sample" else greedy_index(probs)
        idx[k] = i
        p = probs[i]
        logps[k] = math.log(p) if p > 0 else -math.inf
        values[k] = value
        obs, reward, _, info = env.step(ACTIONS[i])
        rewards[k] = reward
        positions[k] = info["position"]
        p_exec[k] = info["p_exec"]
        tx[k] = info["tx"]
    return EpisodeResult(day, states, idx, positions, rewards, logps, values, p_exec, tx,
                         list(env.trades))


def write_feature_dump(env: TradingEnv, path: str | Path) -> Path:
    """Per-step raw and normalized features recorded with ``record_features=True``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["step"] + [f"raw_{n}" for n in FEATURE_NAMES] + [f"norm_{n}" for n in FEATURE_NAMES]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k, row in enumerate(env.feature_rows):
            w.writerow([k] + [repr(float(x)) for x in row])
    return path

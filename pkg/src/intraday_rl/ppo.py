"""PPO training: rollouts from parallel actors, GAE, clipped updates, early stopping."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import __version__
from .environment import CostModel, EpisodeResult, TradingEnv, run_episode
from .features import Normalizer
from .market_data import RollSplit, TradingDay
from .neuralnet import (AdamState, Batch, PolicyParams, adam_step, init_params, load_tensors,
                        loss_and_grad, policy_fn, save_tensors)

logger = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    minibatch_size: int = 64
    batch_size: int = 832
    n_actors: int = 3
    hidden: tuple[int, int] = (128, 64)
    activation: str = "relu"
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    gamma: float = 1.0
    commission_bp: float = 0.08
    clip_eps: float = 0.2
    inner_epochs: int = 4
    early_stop_patience: int = 5
    max_epochs: int = 100
    advantage_normalization: bool = True
    entropy_coef: float = 0.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.minibatch_size > self.n_actors * self.batch_size:
            raise ValueError("minibatch_size must not exceed n_actors * batch_size")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not 0 <= self.gamma <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.n_actors < 1 or self.batch_size < 1 or self.minibatch_size < 1:
            raise ValueError("n_actors, batch_size and minibatch_size must be positive")
        if self.inner_epochs < 0 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("invalid epoch settings")
        if self.commission_bp < 0:
            raise ValueError("commission_bp must be >= 0")
        if self.optimizer != "adam" or self.activation != "relu":
            raise ValueError("only the adam optimizer and relu activation are implemented")
        if self.hidden != (128, 64):
            raise ValueError("the network architecture is fixed at (128, 64) hidden units")

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_mapping(cls, values: dict) -> "PpoConfig":
        """Build from string or typed values, coercing to each field's type."""
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ValueError(f"unknown configuration key {key!r}")
            default = known[name].default
            kwargs[name] = _coerce(raw, default)
        return cls(**kwargs)


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.strip("()[] ").split(",") if x.strip())
    return text


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` text file (``#`` comments allowed)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string("[run]\n" + Path(path).read_text())
    return dict(parser["run"])


def write_config_file(path: str | Path, values: dict) -> Path:
    path = Path(path)
    lines = []
    for k, v in values.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n")
    return path


# -- advantages ---------------------------------------------------------------

def compute_gae(rewards, values, dones, gamma: float = 1.0, lam: float = 0.95,
                last_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets.

    ``dones[t]`` marks the last transition of an episode; nothing is
    bootstrapped across it. ``last_value`` bootstraps a trailing unfinished
    episode.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not len(rewards) == len(values) == len(dones):
        raise ValueError("rewards, values and dones must have equal length")
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    next_value = last_value
    for t in range(n - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


# -- rollouts -----------------------------------------------------------------

@dataclass
class Actor:
    env: TradingEnv
    rng: np.random.Generator


@dataclass
class RolloutBuffer:
    episodes: list[EpisodeResult]
    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    def batch(self, normalize_advantages: bool = True) -> Batch:
        adv = self.advantages
        if normalize_advantages and len(adv) > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        return Batch(self.states, self.actions, self.log_probs, adv, self.returns)


def make_actors(n: int, cost: CostModel, seed_seq: np.random.SeedSequence,
                return_capacity: int = 5 * 390) -> list[Actor]:
    return [Actor(TradingEnv(cost, Normalizer(return_capacity)), np.random.default_rng(s))
            for s in seed_seq.spawn(n)]


def assign_days(days: Iterator[TradingDay], n_actors: int, episodes_per_actor: int
                ) -> list[list[TradingDay]]:
    """Deal days round-robin to actors, up to ``episodes_per_actor`` each."""
    plan: list[list[TradingDay]] = [[] for _ in range(n_actors)]
    for _ in range(episodes_per_actor):
        for a in range(n_actors):
            day = next(days, None)
            if day is None:
                return plan
            plan[a].append(day)
    return plan


def collect_rollouts(params: PolicyParams, days: Iterator[TradingDay], actors: Sequence[Actor],
                     batch_size: int, gamma: float = 1.0, lam: float = 0.95,
                     threads: int = 1) -> RolloutBuffer | None:
    """Run whole sampled episodes on every actor until the batch quota is met.

    Each actor needs ceil(ceil(batch_size / N) / horizon) episodes. Days are
    dealt before any episode runs, so the buffer does not depend on thread
    scheduling. Returns None when ``days`` is exhausted.
    """
    if not actors:
        raise ValueError("no actors")
    first = next(days, None)
    if first is None:
        return None
    days = _chain(first, days)
    quota = math.ceil(batch_size / len(actors))
    per_actor = math.ceil(quota / first.session.horizon)
    plan = assign_days(days, len(actors), per_actor)
    policy = policy_fn(params)

    def work(k: int) -> list[EpisodeResult]:
        actor = actors[k]
        return [run_episode(actor.env, d, policy, "sample", actor.rng) for d in plan[k]]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(len(actors))))
    else:
        results = [work(k) for k in range(len(actors))]
    episodes = [ep for per in results for ep in per]
    return build_buffer(episodes, gamma, lam)


def _chain(first, rest):
    yield first
    yield from rest


def build_buffer(episodes: Sequence[EpisodeResult], gamma: float, lam: float) -> RolloutBuffer:
    advs, rets = [], []
    for ep in episodes:
        a, r = compute_gae(ep.rewards, ep.values, ep.dones, gamma, lam)
        advs.append(a)
        rets.append(r)
    cat = np.concatenate
    return RolloutBuffer(
        episodes=list(episodes),
        states=cat([ep.states for ep in episodes]),
        actions=cat([ep.action_index for ep in episodes]),
        log_probs=cat([ep.log_probs for ep in episodes]),
        values=cat([ep.values for ep in episodes]),
        rewards=cat([ep.rewards for ep in episodes]),
        dones=cat([ep.dones for ep in episodes]),
        advantages=cat(advs),
        returns=cat(rets),
    )


def ppo_update(params: PolicyParams, adam: AdamState, buffer: RolloutBuffer, config: PpoConfig,
               rng: np.random.Generator) -> dict:
    """K shuffled passes of minibatch clipped-surrogate updates over the buffer."""
    batch = buffer.batch(config.advantage_normalization)
    n = len(batch)
    losses, clips = [], []
    for _ in range(config.inner_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.minibatch_size):
            mb = batch.subset(order[lo:lo + config.minibatch_size])
            loss, grads, stats = loss_and_grad(params, mb, config.clip_eps, config.value_coef,
                                               config.entropy_coef)
            adam_step(params, grads, adam)
            losses.append(loss)
            clips.append(stats["clip_fraction"])
    return {
        "mean_loss": float(np.mean(losses)) if losses else math.nan,
        "clip_fraction": float(np.mean(clips)) if clips else math.nan,
        "updates": len(losses),
    }


# -- early stopping, checkpoints, training ------------------------------------------

class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly better score."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def update(self, score: float) -> bool:
        self.epoch += 1
        if score > self.best:
            self.best = score
            self.best_epoch = self.epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class Checkpoint:
    params: PolicyParams
    pr_history: np.ndarray
    dr_history: np.ndarray
    meta: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        t = self.params.named()
        t["normalizer.pr_history"] = self.pr_history
        t["normalizer.dr_history"] = self.dr_history
        return t

    def save(self, path: str | Path) -> Path:
        return save_tensors(path, self.tensors(), self.meta)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        tensors, meta = load_tensors(path)
        if meta.get("tool_version") not in (None, __version__):
            raise ValueError(f"{path}: written by version {meta.get('tool_version')}, "
                             f"this is {__version__}")
        return cls(PolicyParams.from_named(tensors), tensors["normalizer.pr_history"],
                   tensors["normalizer.dr_history"], meta)

    @property
    def commission_bp(self) -> float:
        return float(self.meta.get("commission_bp", 0.08))

    def identifier(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.tensors().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def normalizer(self, return_capacity: int = 5 * 390) -> Normalizer:
        norm = Normalizer(return_capacity)
        norm.load_episode_arrays(self.pr_history, self.dr_history)
        return norm


@dataclass
class TrainReport:
    validation_rewards: list[float]
    stopping_epoch: int
    best_epoch: int
    iterations: list[dict]
    checkpoint_id: str

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write_log(self, path: str | Path) -> Path:
        import csv

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "epoch", "mean_loss", "clip_fraction", "validation_reward"])
            for row in self.iterations:
                val = row.get("validation_reward")
                w.writerow([row["iteration"], row["epoch"], repr(row["mean_loss"]),
                            repr(row["clip_fraction"]), "" if val is None else repr(val)])
        return path


def validation_reward(params: PolicyParams, days: Sequence[TradingDay], cost: CostModel,
                      normalizer: Normalizer) -> float:
    """Sum of greedy-policy log rewards over the given days."""
    env = TradingEnv(cost, normalizer)
    policy = policy_fn(params)
    return float(sum(run_episode(env, d, policy, "greedy").total_reward for d in days))


def train_roll(split: RollSplit, config: PpoConfig | None = None) -> tuple[TrainReport, Checkpoint]:
    """Train on one walk-forward roll; returns the best-validation checkpoint."""
    config = config or PpoConfig()
    if not split.train_days:
        raise ValueError("empty training set")
    if not split.val_days:
        raise ValueError("empty validation set")
    session = split.train_days[0].session
    capacity = 5 * session.usable_bars
    cost = CostModel(config.commission_bp)
    root = np.random.SeedSequence(config.seed)
    init_seq, actor_seq, shuffle_seq = root.spawn(3)
    params = init_params(np.random.default_rng(init_seq))
    adam = AdamState.for_params(params, config.learning_rate)
    actors = make_actors(config.n_actors, cost, actor_seq, capacity)
    shuffle_rng = np.random.default_rng(shuffle_seq)

    stopper = EarlyStopping(config.early_stop_patience)
    best: Checkpoint | None = None
    val_rewards: list[float] = []
    iterations: list[dict] = []
    it = 0
    for epoch in range(1, config.max_epochs + 1):
        days = iter(split.train_days)
        while True:
            buffer = collect_rollouts(params, days, actors, config.batch_size, config.gamma,
                                      config.gae_lambda, config.threads)
            if buffer is None:
                break
            it += 1
            stats = ppo_update(params, adam, buffer, config, shuffle_rng)
            iterations.append({"iteration": it, "epoch": epoch, "mean_loss": stats["mean_loss"],
                               "clip_fraction": stats["clip_fraction"],
                               "validation_reward": None})
        val_norm = actors[0].env.normalizer.copy()
        score = validation_reward(params, split.val_days, cost, val_norm)
        val_rewards.append(score)
        if iterations:
            iterations[-1]["validation_reward"] = score
        logger.info("epoch %d: validation reward %.6f", epoch, score)
        if stopper.update(score):
            arrays = actors[0].env.normalizer.episode_arrays()
            best = Checkpoint(params.copy(), arrays["pr_history"], arrays["dr_history"], {
                "tool_version": __version__, "epoch": epoch, "validation_reward": score,
                "commission_bp": config.commission_bp, "config": config.as_dict(),
            })
        if stopper.should_stop:
            break
    report = TrainReport(val_rewards, stopper.epoch, stopper.best_epoch, iterations,
                         best.identifier())
    return report, best


@dataclass
class Evaluation:
    episodes: list[EpisodeResult]
    commission_bp: float

    @property
    def trades(self):
        return [t for ep in self.episodes for t in ep.trades]


def evaluate_policy(checkpoint: Checkpoint, days: Sequence[TradingDay],
                    commission_bp: float | None = None, warmup_days: Sequence[TradingDay] = (),
                    zero_features: Sequence[int] = ()) -> Evaluation:
    """Greedy evaluation over ``days`` in order.

    ``warmup_days`` (strictly earlier than ``days``) only prime the return
    standardization buffer; no episode is run on them.
    """
    cbp = checkpoint.commission_bp if commission_bp is None else commission_bp
    session = days[0].session if days else None
    capacity = 5 * session.usable_bars if session else 5 * 390
    norm = checkpoint.normalizer(capacity)
    for d in warmup_days:
        lb = d.session.lookback
        norm.standardize_returns(d.price_features[lb:, :5], d.timestamps[lb], d.timestamps[-1])
    env = TradingEnv(CostModel(cbp), norm, zero_features=zero_features)
    policy = policy_fn(checkpoint.params)
    return Evaluation([run_episode(env, d, policy, "greedy") for d in days], cbp)

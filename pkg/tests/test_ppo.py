from __future__ import annotations

import math

import numpy as np
import pytest

from intraday_rl import ppo
from intraday_rl.environment import CostModel
from intraday_rl.market_data import RollSplit, TradingDay
from intraday_rl.neuralnet import AdamState, forward, init_params, zero_params
from intraday_rl.ppo import (Checkpoint, EarlyStopping, PpoConfig, collect_rollouts, compute_gae,
                             evaluate_policy, make_actors, ppo_update, read_config_file,
                             train_roll, write_config_file)


# -- advantages -----------------------------------------------------------------

def gae_direct(rewards, values, dones, gamma, lam):
    """A_t = sum_k (gamma*lam)^k delta_{t+k}, truncated at the episode end."""
    n = len(rewards)
    deltas = []
    for t in range(n):
        nxt = 0.0 if dones[t] or t == n - 1 else values[t + 1]
        deltas.append(rewards[t] + gamma * nxt - values[t])
    adv = []
    for t in range(n):
        total, k = 0.0, 0
        while t + k < n:
            total += (gamma * lam) ** k * deltas[t + k]
            if dones[t + k]:
                break
            k += 1
        adv.append(total)
    return np.array(adv)


class TestGae:
    def test_hand_example(self):
        adv, ret = compute_gae([1.0, 1.0], [0.5, 0.5], [False, True], 1.0, 0.95)
        np.testing.assert_allclose(adv, [1.475, 0.5], atol=1e-15)
        np.testing.assert_allclose(ret, [1.975, 1.0], atol=1e-15)

    def test_lambda_one_is_monte_carlo(self):
        rng = np.random.default_rng(0)
        r, v = rng.normal(size=30), rng.normal(size=30)
        dones = np.zeros(30, bool)
        dones[-1] = True
        adv, _ = compute_gae(r, v, dones, 1.0, 1.0)
        want = np.cumsum(r[::-1])[::-1] - v
        np.testing.assert_allclose(adv, want, atol=1e-12)

    def test_lambda_zero_is_td(self):
        rng = np.random.default_rng(1)
        r, v = rng.normal(size=20), rng.normal(size=20)
        dones = np.zeros(20, bool)
        dones[[7, 19]] = True
        adv, _ = compute_gae(r, v, dones, 0.9, 0.0)
        nxt = np.append(v[1:], 0.0) * ~dones
        np.testing.assert_array_equal(adv, r + 0.9 * nxt - v)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(1, 65))
            r, v = rng.normal(size=n), rng.normal(size=n)
            dones = rng.random(n) < 0.1
            dones[-1] = True
            gamma, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
            adv, _ = compute_gae(r, v, dones, gamma, lam)
            np.testing.assert_allclose(adv, gae_direct(r, v, dones, gamma, lam), rtol=0, atol=1e-12)

    def test_episode_isolation(self):
        rng = np.random.default_rng(3)
        parts = [(rng.normal(size=n), rng.normal(size=n)) for n in (5, 9, 4)]
        joined_r = np.concatenate([p[0] for p in parts])
        joined_v = np.concatenate([p[1] for p in parts])
        dones = np.concatenate([np.arange(len(p[0])) == len(p[0]) - 1 for p in parts])
        joined, _ = compute_gae(joined_r, joined_v, dones, 1.0, 0.95)
        single = np.concatenate([compute_gae(r, v, np.arange(len(r)) == len(r) - 1)[0]
                                 for r, v in parts])
        np.testing.assert_array_equal(joined, single)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_gae([1.0, 2.0], [0.0], [True, True])


# -- configuration ------------------------------------------------------------------

class TestConfig:
    def test_defaults(self):
        c = PpoConfig()
        assert c.learning_rate == 0.0001 and c.optimizer == "adam"
        assert (c.minibatch_size, c.batch_size, c.n_actors) == (64, 832, 3)
        assert c.hidden == (128, 64) and c.activation == "relu"
        assert (c.gae_lambda, c.value_coef, c.gamma, c.commission_bp) == (0.95, 0.5, 1.0, 0.08)
        assert (c.clip_eps, c.inner_epochs, c.early_stop_patience, c.max_epochs) == (0.2, 4, 5, 100)
        assert c.advantage_normalization is True and c.entropy_coef == 0.0

    def test_file_round_trip(self, tmp_path):
        c = PpoConfig(learning_rate=3e-4, advantage_normalization=False, seed=9, max_epochs=7)
        path = write_config_file(tmp_path / "run.cfg", c.as_dict())
        assert PpoConfig.from_mapping(read_config_file(path)) == c

    def test_comments_and_dashes(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# tuned\nclip-eps = 0.1\ninner_epochs = 2\n")
        c = PpoConfig.from_mapping(read_config_file(p))
        assert c.clip_eps == 0.1 and c.inner_epochs == 2

    @pytest.mark.parametrize("kw", [{"clip_eps": 1.0}, {"gamma": 1.5}, {"gae_lambda": -0.1},
                                    {"minibatch_size": 5000}, {"commission_bp": -1.0},
                                    {"hidden": (64, 64)}, {"optimizer": "sgd"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PpoConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            PpoConfig.from_mapping({"learning_rat": "1"})


# -- rollouts and updates ---------------------------------------------------------------

def flat_params():
    p = zero_params()
    p.bp[:] = [0.0, 100.0, 0.0]
    return p


def rollout(days, n_actors=3, batch=832, seed=0, threads=1, params=None):
    params = init_params(np.random.default_rng(seed)) if params is None else params
    actors = make_actors(n_actors, CostModel(0.08), np.random.SeedSequence(seed))
    return collect_rollouts(params, iter(days), actors, batch, threads=threads)


class TestRollouts:
    def test_default_quota(self, small_corpus):
        buf = rollout(small_corpus)
        assert len(buf) >= 832 and len(buf.episodes) >= 3
        assert buf.dones.sum() == len(buf.episodes)

    def test_deterministic(self, small_corpus):
        a, b = rollout(small_corpus, 1, 400, 4), rollout(small_corpus, 1, 400, 4)
        for name in ("states", "actions", "log_probs", "values", "rewards", "advantages"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_threads_match_single(self, small_corpus):
        a = rollout(small_corpus, 3, 2000, 5, threads=1)
        b = rollout(small_corpus, 3, 2000, 5, threads=3)
        for name in ("states", "actions", "log_probs", "rewards", "advantages", "returns"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_flat_policy_earns_nothing(self, small_corpus):
        buf = rollout(small_corpus, params=flat_params())
        assert np.all(buf.rewards == 0.0) and np.all(buf.actions == 1)

    def test_exhausted_days(self):
        assert rollout([]) is None

    def test_no_actors(self, small_corpus):
        with pytest.raises(ValueError):
            collect_rollouts(zero_params(), iter(small_corpus), [], 10)


class TestUpdate:
    def test_zero_inner_epochs_is_noop(self, small_corpus):
        buf = rollout(small_corpus, 1, 100)
        p = init_params(np.random.default_rng(0))
        before = p.flat().copy()
        stats = ppo_update(p, AdamState.for_params(p), buf, PpoConfig(inner_epochs=0),
                           np.random.default_rng(0))
        assert p.flat().tobytes() == before.tobytes() and stats["updates"] == 0

    def test_single_minibatch_follows_unclipped_gradient(self, small_corpus):
        p = init_params(np.random.default_rng(1))
        buf = rollout(small_corpus, 1, 100, params=p.copy())
        n = len(buf)
        cfg = PpoConfig(inner_epochs=1, minibatch_size=n, batch_size=n, n_actors=1,
                        advantage_normalization=False)
        before = p.bp.copy()
        ppo_update(p, AdamState.for_params(p, cfg.learning_rate), buf, cfg,
                   np.random.default_rng(0))
        # gradient of -mean(A * pi(a)/pi_old(a)) w.r.t. the policy bias at ratio 1
        g = np.zeros(3)
        for s, a, adv in zip(buf.states, buf.actions, buf.advantages):
            probs, _ = forward(init_params(np.random.default_rng(1)), s)
            onehot = np.eye(3)[a]
            g -= adv * (onehot - probs) / n
        want = -cfg.learning_rate * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.bp - before, want, rtol=1e-6, atol=1e-15)

    def test_ratio_stays_near_one(self, small_corpus):
        for seed in range(3):
            p = init_params(np.random.default_rng(seed))
            buf = rollout(small_corpus, 3, 832, seed, params=p.copy())
            cfg = PpoConfig(seed=seed)
            ppo_update(p, AdamState.for_params(p), buf, cfg, np.random.default_rng(seed))
            new = np.array([math.log(forward(p, s)[0][a]) for s, a in zip(buf.states, buf.actions)])
            ratio = np.exp(new - buf.log_probs)
            assert 1 - 2 * cfg.clip_eps <= ratio.mean() <= 1 + 2 * cfg.clip_eps


# -- early stopping and training --------------------------------------------------------------

def test_early_stopping_example():
    stop = EarlyStopping(5)
    seen = 0
    for score in [1, 2, 2, 2, 2, 2, 2]:
        seen += 1
        stop.update(score)
        if stop.should_stop:
            break
    assert seen == 7 and stop.best_epoch == 2


def split_of(days, n_train=4, n_val=2):
    return RollSplit(list(days[:n_train]), list(days[n_train:n_train + n_val]),
                     list(days[n_train + n_val:]))


def scripted_validation(monkeypatch, scores):
    it = iter(scores)
    monkeypatch.setattr(ppo, "validation_reward", lambda *a, **k: next(it))


class TestTrainRoll:
    def test_patience_stops_at_epoch_seven(self, small_corpus, monkeypatch):
        scripted_validation(monkeypatch, [1, 2, 2, 2, 2, 2, 2])
        report, ckpt = train_roll(split_of(small_corpus, 1, 1), PpoConfig(n_actors=1, batch_size=360))
        assert report.stopping_epoch == 7 and report.best_epoch == 2
        assert ckpt.meta["epoch"] == 2 and report.validation_rewards == [1, 2, 2, 2, 2, 2, 2]

    def test_monotone_runs_to_cap(self, small_corpus, monkeypatch):
        scripted_validation(monkeypatch, range(100))
        report, ckpt = train_roll(split_of(small_corpus, 1, 1),
                                  PpoConfig(n_actors=1, batch_size=360, max_epochs=4))
        assert report.stopping_epoch == 4 and ckpt.meta["epoch"] == 4

    def test_best_checkpoint_has_max_validation(self, small_corpus):
        report, ckpt = train_roll(split_of(small_corpus), PpoConfig(max_epochs=3))
        assert ckpt.meta["validation_reward"] == max(report.validation_rewards)
        assert len(report.validation_rewards) == report.stopping_epoch <= 3
        assert report.checkpoint_id == ckpt.identifier()

    def test_reproducible_and_thread_independent(self, small_corpus, tmp_path):
        split = split_of(small_corpus)
        a = train_roll(split, PpoConfig(max_epochs=2, seed=3))
        b = train_roll(split, PpoConfig(max_epochs=2, seed=3, threads=3))
        assert a[0].validation_rewards == b[0].validation_rewards
        assert a[0].iterations == b[0].iterations
        pa = a[1].save(tmp_path / "a.ckpt")
        b[1].meta["config"]["threads"] = 1
        pb = b[1].save(tmp_path / "b.ckpt")
        assert pa.read_bytes() == pb.read_bytes()

    def test_empty_sets(self, small_corpus):
        with pytest.raises(ValueError):
            train_roll(RollSplit([], small_corpus[:1], []))
        with pytest.raises(ValueError):
            train_roll(RollSplit(small_corpus[:1], [], []))

    def test_training_never_reads_test_days(self, small_corpus):
        reads: set = set()
        days = [LoggedDay.wrap(d, reads) for d in small_corpus]
        split = split_of(days)
        train_roll(split, PpoConfig(max_epochs=1))
        assert reads and not reads & {d.date for d in split.test_days}

    def test_train_log(self, small_corpus, tmp_path, monkeypatch):
        scripted_validation(monkeypatch, [0.5, 0.25])
        report, _ = train_roll(split_of(small_corpus, 1, 1),
                               PpoConfig(n_actors=1, batch_size=360, max_epochs=2))
        lines = report.write_log(tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "iteration,epoch,mean_loss,clip_fraction,validation_reward"
        assert lines[1].split(",")[:2] == ["1", "1"] and lines[1].endswith(",0.5")


class LoggedDay(TradingDay):
    """A trading day that records its date whenever bar data is touched."""

    FIELDS = frozenset({"timestamps", "open", "high", "low", "close", "volume", "price_features"})

    @classmethod
    def wrap(cls, day, log):
        obj = cls(day.date, day.timestamps, day.open, day.high, day.low, day.close, day.volume,
                  day.session)
        object.__setattr__(obj, "_log", log)
        return obj

    def __getattribute__(self, name):
        if name in LoggedDay.FIELDS:
            object.__getattribute__(self, "_log").add(object.__getattribute__(self, "date"))
        return object.__getattribute__(self, name)


# -- checkpoints and evaluation ----------------------------------------------------------

def flat_checkpoint():
    return Checkpoint(zero_params(), np.empty((0, 360)), np.empty((0, 360)), {"commission_bp": 0.08})


class TestEvaluate:
    def test_tie_break_policy_stays_flat(self, small_corpus):
        ev = evaluate_policy(flat_checkpoint(), small_corpus[:3])
        for ep in ev.episodes:
            assert np.all(ep.positions == 0) and np.all(ep.rewards == 0.0)
        assert ev.trades == []

    def test_deterministic(self, small_corpus):
        ckpt = Checkpoint(init_params(np.random.default_rng(0)), np.empty((0, 360)),
                          np.empty((0, 360)))
        a = evaluate_policy(ckpt, small_corpus[5:8], warmup_days=small_corpus[:5])
        b = evaluate_policy(ckpt, small_corpus[5:8], warmup_days=small_corpus[:5])
        for x, y in zip(a.episodes, b.episodes):
            assert x.states.tobytes() == y.states.tobytes()
            assert x.positions.tobytes() == y.positions.tobytes()
            assert x.rewards.tobytes() == y.rewards.tobytes()

    def test_commission_override(self, small_corpus):
        assert evaluate_policy(flat_checkpoint(), small_corpus[:1], 0.16).commission_bp == 0.16
        assert evaluate_policy(flat_checkpoint(), small_corpus[:1]).commission_bp == 0.08

    def test_checkpoint_round_trip(self, tmp_path):
        ckpt = Checkpoint(init_params(np.random.default_rng(2)), np.ones((2, 360)),
                          np.zeros((2, 360)), {"epoch": 1})
        back = Checkpoint.load(ckpt.save(tmp_path / "c.ckpt"))
        assert back.identifier() == ckpt.identifier() and back.meta == {"epoch": 1}

    def test_checkpoint_version_mismatch(self, tmp_path):
        ckpt = Checkpoint(zero_params(), np.empty((0, 360)), np.empty((0, 360)),
                          {"tool_version": "0.0.0-other"})
        path = ckpt.save(tmp_path / "c.ckpt")
        with pytest.raises(ValueError, match="version"):
            Checkpoint.load(path)

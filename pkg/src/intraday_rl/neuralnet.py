"""Shared-trunk actor-critic MLP with hand-derived backpropagation and Adam.

Architecture: 13 -> 128 -> 64 (ReLU) feeding a 3-way softmax policy head and
a scalar value head. Everything runs in float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .features import N_FEATURES

HIDDEN = (128, 64)
N_ACTIONS = 3
CHECKPOINT_MAGIC = b"INTRADAY-RL-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass
class PolicyParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wp: np.ndarray
    bp: np.ndarray
    wv: np.ndarray
    bv: np.ndarray

    NAMES = {
        "w1": "trunk.0.weight", "b1": "trunk.0.bias",
        "w2": "trunk.1.weight", "b2": "trunk.1.bias",
        "wp": "policy.weight", "bp": "policy.bias",
        "wv": "value.weight", "bv": "value.bias",
    }

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def named(self) -> dict[str, np.ndarray]:
        return {self.NAMES[f.name]: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_named(cls, tensors: dict[str, np.ndarray]) -> "PolicyParams":
        return cls(**{k: np.array(tensors[v], dtype=float) for k, v in cls.NAMES.items()})

    def copy(self) -> "PolicyParams":
        return PolicyParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(*(np.zeros_like(a) for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for a in self.arrays():
            a[...] = vec[i:i + a.size].reshape(a.shape)
            i += a.size

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(rng: np.random.Generator, n_in: int = N_FEATURES, hidden=HIDDEN,
                n_actions: int = N_ACTIONS) -> PolicyParams:
    """Orthogonal init: trunk gain sqrt(2), policy head 0.01, value head 1; zero biases."""
    h1, h2 = hidden
    trunk_gain = math.sqrt(2.0)
    return PolicyParams(
        w1=_orthogonal(rng, (n_in, h1), trunk_gain), b1=np.zeros(h1),
        w2=_orthogonal(rng, (h1, h2), trunk_gain), b2=np.zeros(h2),
        wp=_orthogonal(rng, (h2, n_actions), 0.01), bp=np.zeros(n_actions),
        wv=_orthogonal(rng, (h2, 1), 1.0), bv=np.zeros(1),
    )


def zero_params(n_in: int = N_FEATURES, hidden=HIDDEN, n_actions: int = N_ACTIONS) -> PolicyParams:
    h1, h2 = hidden
    return PolicyParams(np.zeros((n_in, h1)), np.zeros(h1), np.zeros((h1, h2)), np.zeros(h2),
                        np.zeros((h2, n_actions)), np.zeros(n_actions), np.zeros((h2, 1)),
                        np.zeros(1))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, float]:
    """Action probabilities over (-1, 0, +1) and the state value for one observation."""
    if not np.all(np.isfinite(obs)):
        raise FloatingPointError(f"non-finite observation {obs!r}")
    h = obs @ params.w1 + params.b1
    np.maximum(h, 0.0, out=h)
    h = h @ params.w2 + params.b2
    np.maximum(h, 0.0, out=h)
    logits = h @ params.wp + params.bp
    value = float(h @ params.wv[:, 0] + params.bv[0])
    return softmax(logits), value


def policy_fn(params: PolicyParams):
    """Bind parameters into the ``obs -> (probs, value)`` callable the environment expects."""
    return lambda obs: forward(params, obs)


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray  # indices into (-1, 0, +1)
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def subset(self, idx) -> "Batch":
        return Batch(self.states[idx], self.actions[idx], self.old_log_probs[idx],
                     self.advantages[idx], self.returns[idx])


def loss_and_grad(params: PolicyParams, batch: Batch, clip_eps: float = 0.2,
                  value_coef: float = 0.5, entropy_coef: float = 0.0
                  ) -> tuple[float, PolicyParams, dict]:
    """PPO loss -(L_clip - c * L_vf - beta * H), averaged over the batch, and its gradient."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    x = batch.states
    a1 = x @ params.w1 + params.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ params.w2 + params.b2
    h2 = np.maximum(a2, 0.0)
    logits = h2 @ params.wp + params.bp
    values = h2 @ params.wv[:, 0] + params.bv[0]

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs_all = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs_all)
    rows = np.arange(n)
    log_probs = log_probs_all[rows, batch.actions]

    ratio = np.exp(log_probs - batch.old_log_probs)
    adv = batch.advantages
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surr1 = ratio * adv
    surr2 = clipped * adv
    unclipped = surr1 <= surr2
    surrogate = np.where(unclipped, surr1, surr2)
    value_err = values - batch.returns
    entropy = -(probs * log_probs_all).sum(axis=1)

    per_sample = -surrogate + value_coef * value_err**2 - entropy_coef * entropy
    bad = ~np.isfinite(per_sample)
    if bad.any():
        raise FloatingPointError(f"non-finite loss at sample {int(np.argmax(bad))}")
    loss = float(per_sample.mean())

    d_logp = -(adv * ratio * unclipped) / n
    onehot = np.zeros_like(probs)
    onehot[rows, batch.actions] = 1.0
    d_logits = d_logp[:, None] * (onehot - probs)
    if entropy_coef:
        d_logits += (entropy_coef / n) * probs * (log_probs_all + entropy[:, None])
    d_values = (2.0 * value_coef / n) * value_err

    g = params.zeros_like()
    g.wp = h2.T @ d_logits
    g.bp = d_logits.sum(axis=0)
    g.wv = h2.T @ d_values[:, None]
    g.bv = np.array([d_values.sum()])
    d_h2 = d_logits @ params.wp.T + d_values[:, None] * params.wv[:, 0]
    d_a2 = d_h2 * (a2 > 0)
    g.w2 = h1.T @ d_a2
    g.b2 = d_a2.sum(axis=0)
    d_h1 = d_a2 @ params.w2.T
    d_a1 = d_h1 * (a1 > 0)
    g.w1 = x.T @ d_a1
    g.b1 = d_a1.sum(axis=0)

    stats = {
        "loss": loss,
        "policy_loss": float(-surrogate.mean()),
        "value_loss": float((value_err**2).mean()),
        "entropy": float(entropy.mean()),
        "clip_fraction": float((np.abs(ratio - 1.0) > clip_eps).mean()),
        "mean_ratio": float(ratio.mean()),
    }
    return loss, g, stats


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: PolicyParams, learning_rate: float = 1e-4, **kw) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                    learning_rate=learning_rate, **kw)


def adam_step(params: PolicyParams, grads: PolicyParams, state: AdamState
              ) -> tuple[PolicyParams, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    ps, gs = params.arrays(), grads.arrays()
    if len(ps) != len(state.m) or any(p.shape != g.shape or p.shape != m.shape
                                      for p, g, m in zip(ps, gs, state.m)):
        raise ValueError("parameter, gradient and optimizer shapes disagree")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    from .environment import ACTIONS, sample_index

    i = sample_index(probs, rng.random())
    return ACTIONS[i], math.log(probs[i])


def greedy_action(probs: np.ndarray) -> int:
    """Most probable action; ties resolve to flat, then short."""
    from .environment import ACTIONS, greedy_index

    return ACTIONS[greedy_index(probs)]


# -- checkpoint files -------------------------------------------------------

def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write named float64 tensors: magic line, JSON header line, raw little-endian data."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset,
                        "nbytes": data.nbytes})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {"format_version": CHECKPOINT_VERSION, "dtype": "float64-le",
              "meta": meta or {}, "tensors": entries}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for b in blobs:
            fh.write(b)
    return path


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    body = rest[nl + 1:]
    tensors = {}
    for e in header["tensors"]:
        buf = body[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(float)
    return tensors, header["meta"]

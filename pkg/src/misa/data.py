"""Offline transition datasets: generation, file format, and evaluation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import distributions as dist
from .envs import ToyEnv, make_env, rollout

FORMAT_VERSION = 1
TIERS = ("expert", "medium", "medium_replay", "medium_expert", "ood_gap")

# Standard deviation of the Gaussian noise added to the expert controller.
EXPERT_NOISE = 0.01
# Per-step probability of a uniformly random action for the medium tier,
# calibrated so the behaviour policy scores about a third of the expert.
MEDIUM_RANDOM_PROB = {"line-reach": 0.9, "point-mass": 0.9, "chain-maze": 0.86, "grid": 0.8}
OOD_GAP = 0.3


class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray


class DatasetFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _frozen(x):
    x = np.array(x, dtype=np.float64)
    x.flags.writeable = False
    return x


@dataclass(frozen=True)
class OfflineDataset:
    """Immutable set of transitions ``(s, a, r, s_next, terminal)``."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.s)
        if n == 0:
            raise ValueError("dataset must contain at least one transition")
        for name in ("s", "a", "r", "s_next", "terminal"):
            arr = _frozen(getattr(self, name))
            if len(arr) != n:
                raise ValueError(f"field {name!r} has {len(arr)} rows, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"field {name!r} contains non-finite values")
            object.__setattr__(self, name, arr)
        if self.s.ndim != 2 or self.a.ndim != 2 or self.s_next.shape != self.s.shape:
            raise ValueError("states and actions must be 2-D with matching s/s_next shapes")

    def __len__(self):
        return len(self.s)

    @property
    def state_dim(self) -> int:
        return self.s.shape[1]

    @property
    def action_dim(self) -> int:
        return self.a.shape[1]

    def batch(self, idx) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.terminal[idx])

    def sample(self, rng, batch_size) -> Batch:
        return self.batch(rng.integers(0, len(self), size=batch_size))

    def records(self) -> np.ndarray:
        return np.concatenate(
            [self.s, self.a, self.r[:, None], self.s_next, self.terminal[:, None]], axis=1
        )


# ---------------------------------------------------------------------------
# behaviour policies and tier generation


def _expert(env, noise=EXPERT_NOISE):
    def act(s, rng):
        a = env.expert_action(s)
        if env.discrete:
            return a
        return a + noise * rng.standard_normal(a.shape)
    return act


def _mixture(env, p_random):
    """Expert with probability ``1 - p``, uniform random otherwise (per step)."""
    expert = _expert(env)

    def act(s, rng):
        p = p_random(len(s)) if callable(p_random) else p_random
        pick = rng.uniform(size=(len(s), 1)) < p
        return np.where(pick, env.random_action(rng, len(s)), expert(s, rng))
    return act


def _ood_gap(env):
    """Half expert (clipped), half uniform, all inside ``[-OOD_GAP, OOD_GAP]``."""
    expert = _expert(env)

    def act(s, rng):
        pick = rng.uniform(size=(len(s), 1)) < 0.5
        uniform = rng.uniform(-OOD_GAP, OOD_GAP, size=(len(s), env.action_dim))
        return np.clip(np.where(pick, uniform, expert(s, rng)), -OOD_GAP, OOD_GAP)
    return act


def _collect(env: ToyEnv, act, n, rng, parallel=32, progress=None):
    """Roll out episodes until ``n`` transitions are gathered (episode order)."""
    chunks, total = [], 0
    while total < n:
        if progress is not None:
            progress(total / n)
        _, steps = rollout(env, act, env.reset(rng, parallel), rng)
        cols = [np.stack([st[i] for st in steps], axis=1) for i in range(6)]
        alive = cols[5]
        s, a, r, s2, d = (c[alive] for c in cols[:5])
        chunks.append((s, a, r, s2, d))
        total += len(s)
    out = [np.concatenate([c[i] for c in chunks])[:n] for i in range(5)]
    return out


def generate_dataset(env, tier: str, n: int, seed: int) -> OfflineDataset:
    """Collect ``n`` transitions from a behaviour policy of the given quality tier."""
    env = make_env(env) if isinstance(env, str) else env
    if tier not in TIERS:
        raise ValueError(f"unknown tier {tier!r}; choose from {list(TIERS)}")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    p_med = MEDIUM_RANDOM_PROB.get(env.name, 0.5)
    segments = [{"tier": tier, "start": 0, "stop": n}]
    if tier == "expert":
        parts = _collect(env, _expert(env), n, rng)
        behavior = f"scripted expert + N(0, {EXPERT_NOISE}^2) noise"
    elif tier == "medium":
        parts = _collect(env, _mixture(env, p_med), n, rng)
        behavior = f"expert/uniform mixture, random prob {p_med}"
    elif tier == "medium_replay":
        progress = {"frac": 0.0}
        sched = lambda _: 1.0 - (1.0 - p_med) * progress["frac"]  # noqa: E731
        parts = _collect(env, _mixture(env, sched), n, rng,
                         progress=lambda f: progress.update(frac=f))
        behavior = f"random prob annealed 1.0 -> {p_med} over collection"
    elif tier == "medium_expert":
        half = n // 2
        med = _collect(env, _mixture(env, p_med), half, rng) if half else None
        exp = _collect(env, _expert(env), n - half, rng)
        parts = exp if med is None else [np.concatenate([m, e]) for m, e in zip(med, exp)]
        segments = [{"tier": "medium", "start": 0, "stop": half},
                    {"tier": "expert", "start": half, "stop": n}]
        behavior = "medium then expert, concatenated"
    else:
        if env.discrete:
            raise ValueError("ood_gap tier needs a continuous action space")
        parts = _collect(env, _ood_gap(env), n, rng)
        behavior = f"actions restricted to [-{OOD_GAP}, {OOD_GAP}]"
    s, a, r, s2, d = parts
    provenance = {"generator": "generate_dataset", "env": env.name, "tier": tier,
                  "behavior": behavior, "seed": int(seed), "segments": segments}
    return OfflineDataset(s, a, r, s2, d.astype(np.float64), provenance)


def episode_returns(ds: OfflineDataset) -> np.ndarray:
    """Undiscounted return of every episode stored in ``ds``.

    Episodes are split where a transition is terminal or the next record
    does not continue from ``s_next``. A trailing episode cut short by the
    transition budget is included as is.
    """
    cont = np.all(ds.s[1:] == ds.s_next[:-1], axis=1) & (ds.terminal[:-1] == 0.0)
    starts = np.concatenate([[0], np.flatnonzero(~cont) + 1])
    return np.add.reduceat(ds.r, starts)


# ---------------------------------------------------------------------------
# file format: one JSON header line, then little-endian float32 records


def save_dataset(ds: OfflineDataset, path) -> None:
    header = {
        "version": FORMAT_VERSION,
        "state_dim": ds.state_dim,
        "action_dim": ds.action_dim,
        "count": len(ds),
        "provenance": ds.provenance,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(ds.records().astype("<f4").tobytes())
    os.replace(tmp, path)


def load_dataset(path) -> OfflineDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DatasetFormatError("missing header line", 0)
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"header is not valid JSON: {exc.msg}", exc.pos) from None
    for key in ("version", "state_dim", "action_dim", "count"):
        if key not in header:
            raise DatasetFormatError(f"header lacks {key!r}", 0)
    if header["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {header['version']}", 0)
    count, ds_, da = int(header["count"]), int(header["state_dim"]), int(header["action_dim"])
    start = nl + 1
    if count < 1:
        raise DatasetFormatError("dataset must contain at least one transition, header count is "
                                 f"{count}", start)
    width = 2 * ds_ + da + 2
    expected = count * width * 4
    actual = len(raw) - start
    if actual != expected:
        raise DatasetFormatError(
            f"record payload length mismatch: expected {expected} bytes for {count} records, "
            f"found {actual}", start + min(actual, expected))
    rec = np.frombuffer(raw, dtype="<f4", offset=start).reshape(count, width).astype(np.float64)
    bad = ~np.all(np.isfinite(rec), axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise DatasetFormatError(f"record {i} holds non-finite values", start + 4 * width * i)
    s = rec[:, :ds_]
    a = rec[:, ds_:ds_ + da]
    r = rec[:, ds_ + da]
    s2 = rec[:, ds_ + da + 1:2 * ds_ + da + 1]
    d = rec[:, -1]
    return OfflineDataset(s, a, r, s2, d, header.get("provenance") or {})


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ScoreNormalizer:
    random_return: float
    expert_return: float

    def __post_init__(self):
        if not self.expert_return > self.random_return:
            raise ValueError("expert return must exceed random return")

    def __call__(self, ret):
        return 100.0 * (ret - self.random_return) / (self.expert_return - self.random_return)


def _starts(env, episodes, seed):
    return env.reset(np.random.default_rng(seed), episodes)


def score_normalizer(env, episodes=10, seed=0, random_repeats=20) -> ScoreNormalizer:
    """Random and noiseless-expert returns from the evaluation start states."""
    env = make_env(env) if isinstance(env, str) else env
    starts = _starts(env, episodes, seed)
    expert, _ = rollout(env, lambda s, rng: env.expert_action(s), starts)
    rng = np.random.default_rng([seed, 1])
    rand, _ = rollout(env, lambda s, g: env.random_action(g, len(s)),
                      np.repeat(starts, random_repeats, axis=0), rng)
    return ScoreNormalizer(float(rand.mean()), float(expert.mean()))


def _as_actor(policy):
    if isinstance(policy, dist.GaussianPolicy):
        return lambda s, rng: dist.mean_action(policy, s)
    return policy


def evaluate_policy(env, policy, episodes=10, seed=0, rng=None) -> dict:
    """Mean return and normalised score of a policy over ``episodes`` episodes.

    Gaussian policies act with their (squashed) mean action. Any other
    ``policy`` is called as ``policy(s, rng)``.
    """
    env = make_env(env) if isinstance(env, str) else env
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = rng if rng is not None else np.random.default_rng([seed, 2])
    returns, _ = rollout(env, _as_actor(policy), _starts(env, episodes, seed), rng)
    norm = score_normalizer(env, episodes, seed)
    mean = float(returns.mean())
    return {"mean_return": mean, "normalized_score": float(norm(mean)),
            "returns": [float(x) for x in returns]}


def support_coverage(ds: OfflineDataset, actions, bins=10, states=None) -> float:
    """Fraction of query actions inside the dataset's per-state-bin action envelope.

    States are binned on their first coordinate over the dataset's range.
    ``states`` gives the state of each query action; it defaults to the
    dataset states when ``actions`` has one row per transition. Queries that
    land in a bin with no dataset transitions are left out of the fraction.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, ds.action_dim)
    if states is None:
        if len(actions) != len(ds):
            raise ValueError("states are required unless actions pair with dataset rows")
        states = ds.s
    states = np.asarray(states, dtype=np.float64).reshape(len(actions), -1)
    edges = np.linspace(ds.s[:, 0].min(), ds.s[:, 0].max(), bins + 1)

    def which(x):
        return np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)

    data_bin, query_bin = which(ds.s[:, 0]), which(states[:, 0])
    inside = np.zeros(len(actions), dtype=bool)
    counted = np.zeros(len(actions), dtype=bool)
    for b in range(bins):
        member = data_bin == b
        q = query_bin == b
        if not member.any() or not q.any():
            continue
        lo, hi = ds.a[member].min(axis=0), ds.a[member].max(axis=0)
        qa = actions[q]
        inside[q] = np.all((qa >= lo - 1e-9) & (qa <= hi + 1e-9), axis=1)
        counted[q] = True
    if not counted.any():
        return float("nan")
    return float(inside[counted].mean())

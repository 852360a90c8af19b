"""Tabular Q-learning agent that picks the gateway vehicle's send-rate multiplier.

States are an 8x8 grid over (mean delay, throughput) observed in the last
decision epoch; actions scale the application's configured rate.
"""

from __future__ import annotations

import bisect
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTION_MULTIPLIERS = (0.25, 0.5, 0.75, 1.0)
N_ACTIONS = len(ACTION_MULTIPLIERS)
N_BINS = 8
N_STATES = N_BINS * N_BINS

QTABLE_MAGIC = b"QTBL"
QTABLE_VERSION = 1
_QTABLE_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class AgentConfig:
    epsilon: float = 0.2
    gamma: float = 0.99
    alpha: float = 0.1
    reward_throughput_weight: float = 0.3
    reward_delay_weight: float = 0.7
    decision_epoch: float = 1.0
    episodes: int = 3

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if abs(self.reward_throughput_weight + self.reward_delay_weight - 1.0) > 1e-12:
            raise ValueError("reward weights must sum to 1")
        if self.decision_epoch <= 0 or self.episodes < 1:
            raise ValueError("decision_epoch > 0 and episodes >= 1 required")


@dataclass(frozen=True)
class Observation:
    mean_delay: float = 0.0  # seconds
    throughput: float = 0.0  # bit/s
    delivered_streams: int = 0

    def __post_init__(self):
        if self.mean_delay < 0 or self.throughput < 0 or self.delivered_streams < 0:
            raise ValueError("observation fields must be non-negative")


@dataclass(frozen=True)
class RewardNorms:
    delay_ref: float = 0.1
    throughput_ref: float = 22e6


@dataclass(frozen=True)
class Bins:
    delay_edges: tuple[float, ...]
    throughput_edges: tuple[float, ...]

    def __post_init__(self):
        for edges in (self.delay_edges, self.throughput_edges):
            if len(edges) != N_BINS - 1:
                raise ValueError(f"need {N_BINS - 1} interior edges")
            if any(b <= a for a, b in zip(edges, edges[1:])):
                raise ValueError("bin edges must be strictly increasing")

    @classmethod
    def default(cls, throughput_ref: float = 22e6) -> Bins:
        # delay edges 1 ms .. 1 s, log spaced; throughput edges at ref/8 .. 7ref/8
        delay = tuple(float(x) for x in np.geomspace(1e-3, 1.0, N_BINS - 1))
        tput = tuple(throughput_ref * k / N_BINS for k in range(1, N_BINS))
        return cls(delay, tput)


def discretize(obs: Observation, bins: Bins) -> int:
    d = bisect.bisect_right(bins.delay_edges, obs.mean_delay)
    t = bisect.bisect_right(bins.throughput_edges, obs.throughput)
    return d * N_BINS + t


def reward(obs: Observation, norms: RewardNorms = RewardNorms(),
           w_throughput: float = 0.3, w_delay: float = 0.7) -> float:
    """Clipped linear trade-off in ``[-w_delay, w_throughput]``."""
    if norms.delay_ref <= 0 or norms.throughput_ref <= 0:
        raise ValueError("reference scales must be positive")
    return (w_throughput * min(obs.throughput / norms.throughput_ref, 1.0)
            - w_delay * min(obs.mean_delay / norms.delay_ref, 1.0))


def new_qtable(n_states: int = N_STATES, n_actions: int = N_ACTIONS) -> np.ndarray:
    return np.zeros((n_states, n_actions), dtype=np.float64)


def select_action(q: np.ndarray, s: int, rng: random.Random, epsilon: float) -> int:
    """Epsilon-greedy; greedy ties go to the lowest action id."""
    if epsilon > 0 and rng.random() < epsilon:
        return rng.randrange(q.shape[1])
    return int(np.argmax(q[s]))


def update(q: np.ndarray, s: int, a: int, r: float, s_next: int,
           alpha: float = 0.1, gamma: float = 0.99) -> float:
    """One-step Q-learning backup on ``q[s, a]``; returns the new value."""
    if not np.isfinite(r):
        raise ValueError("reward must be finite")
    current = q[s, a]
    target = r + gamma * q[s_next].max()
    q[s, a] = current + alpha * (target - current)
    return float(q[s, a])


def save_qtable(q: np.ndarray, path: str | Path) -> None:
    n_s, n_a = q.shape
    with open(path, "wb") as fh:
        fh.write(_QTABLE_HEADER.pack(QTABLE_MAGIC, QTABLE_VERSION, n_s, n_a))
        fh.write(np.ascontiguousarray(q, dtype="<f8").tobytes())


def load_qtable(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _QTABLE_HEADER.size:
        raise ValueError("truncated Q-table file")
    magic, version, n_s, n_a = _QTABLE_HEADER.unpack_from(data)
    if magic != QTABLE_MAGIC:
        raise ValueError(f"bad Q-table magic {magic!r}")
    if version != QTABLE_VERSION:
        raise ValueError(f"unsupported Q-table version {version}")
    body = data[_QTABLE_HEADER.size:]
    if len(body) != n_s * n_a * 8:
        raise ValueError("Q-table body length does not match header")
    q = np.frombuffer(body, dtype="<f8").reshape(n_s, n_a).astype(np.float64)
    if not np.isfinite(q).all():
        raise ValueError("Q-table contains non-finite values")
    return q


@dataclass
class QAgent:
    """Epoch-driven learner: call :meth:`step` once per decision epoch."""

    config: AgentConfig = field(default_factory=AgentConfig)
    norms: RewardNorms = field(default_factory=RewardNorms)
    q: np.ndarray = field(default_factory=new_qtable)
    bins: Bins | None = None
    seed: int = 0
    learning: bool = True
    epsilon: float | None = None

    def __post_init__(self):
        if self.bins is None:
            self.bins = Bins.default(self.norms.throughput_ref)
        self.rng = random.Random(self.seed)
        self.state: int | None = None
        self.action: int | None = None
        self.rewards: list[float] = []

    def reset_episode(self, seed: int) -> None:
        self.rng = random.Random(seed)
        self.state = None
        self.action = None
        self.rewards = []

    def step(self, obs: Observation) -> int:
        """Score the previous action on ``obs``, learn, and pick the next action."""
        cfg = self.config
        s_next = discretize(obs, self.bins)
        if self.action is not None:
            r = reward(obs, self.norms, cfg.reward_throughput_weight, cfg.reward_delay_weight)
            self.rewards.append(r)
            if self.learning:
                update(self.q, self.state, self.action, r, s_next, cfg.alpha, cfg.gamma)
        eps = cfg.epsilon if self.epsilon is None else self.epsilon
        self.state = s_next
        self.action = select_action(self.q, s_next, self.rng, eps)
        return self.action

    @property
    def multiplier(self) -> float:
        return ACTION_MULTIPLIERS[3 if self.action is None else self.action]

"""Tabular Q-learning agents that choose the physics-loss weights."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .physics import PhysicsWeights

# discrete weight choices per agent (w1..w4)
ACTION_SPACES: Tuple[Tuple[float, ...], ...] = (
    (0.1, 0.5, 1.0, 2.0, 5.0, 10.0),
    (0.01, 0.05, 0.1, 0.5, 1.0, 2.0),
    (0.1, 0.5, 1.0, 2.0, 5.0, 10.0),
    (0.1, 0.5, 1.0, 2.0, 5.0, 10.0),
)


def log_bin_edges(n_bins: int = 8, lo: float = 1e-6, hi: float = 1e2) -> np.ndarray:
    """``n_bins − 1`` log-spaced edges; values below ``lo`` land in bin 0, at or above ``hi`` in the last."""
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    return np.logspace(np.log10(lo), np.log10(hi), n_bins - 1)


def discretize_state(x: float, bin_edges: Sequence[float]) -> int:
    """Index of the half-open interval ``[e_{i-1}, e_i)`` holding ``x``."""
    x = float(x)
    if np.isnan(x):
        raise ValueError("state is NaN")
    if x < 0:
        raise ValueError(f"state must be non-negative, got {x}")
    return int(np.searchsorted(np.asarray(bin_edges), x, side="right"))


def compute_reward(prev_rmse: float, valid_rmse: float) -> float:
    """``10·(prev_rmse − valid_rmse)``: positive when validation RMSE improved."""
    return 10.0 * (prev_rmse - valid_rmse)


@dataclass
class QAgent:
    action_space: Tuple[float, ...]
    n_bins: int = 8
    alpha: float = 0.1
    gamma: float = 0.9
    epsilon: float = 0.3
    epsilon_decay: float = 0.95
    epsilon_min: float = 0.02
    bin_edges: np.ndarray = field(default=None)
    q_table: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bin_edges is None:
            self.bin_edges = log_bin_edges(self.n_bins)
        if len(self.bin_edges) != self.n_bins - 1:
            raise ValueError("bin_edges must have n_bins - 1 entries")
        if self.q_table is None:
            self.q_table = np.zeros((self.n_bins, len(self.action_space)))
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    def state_bin(self, x: float) -> int:
        return discretize_state(x, self.bin_edges)

    def select_action(self, state_bin: int, rng: np.random.Generator) -> Tuple[int, float]:
        """ε-greedy; greedy ties go to the lowest index (smallest weight)."""
        if rng.random() < self.epsilon:
            a = int(rng.integers(len(self.action_space)))
        else:
            a = int(np.argmax(self.q_table[state_bin]))
        return a, self.action_space[a]

    def q_update(self, s: int, a: int, r: float, s_next: int) -> None:
        """``Q(s,a) ← Q(s,a) + α[r + γ·max_a' Q(s',a') − Q(s,a)]``."""
        target = r + self.gamma * float(np.max(self.q_table[s_next]))
        self.q_table[s, a] += self.alpha * (target - self.q_table[s, a])

    def decay_epsilon(self) -> None:
        self.epsilon = max(self.epsilon_min, self.epsilon * self.epsilon_decay)


@dataclass
class WeightRound:
    round: int
    weights: Tuple[float, float, float, float]
    reward: float
    rmse: float


class AgentBank:
    """Four agents mapped one-to-one to ``w1..w4``, sharing a validation-RMSE reward."""

    def __init__(self, rng: np.random.Generator, n_bins: int = 8, alpha: float = 0.1, gamma: float = 0.9,
                 epsilon: float = 0.3, epsilon_decay: float = 0.95, epsilon_min: float = 0.02):
        self.rng = rng
        self.agents = [QAgent(space, n_bins, alpha, gamma, epsilon, epsilon_decay, epsilon_min)
                       for space in ACTION_SPACES]
        self.last_states: Optional[List[int]] = None
        self.last_actions: Optional[List[int]] = None
        self.prev_rmse: Optional[float] = None
        self.history: List[WeightRound] = []

    def current_weights(self) -> Optional[PhysicsWeights]:
        if self.last_actions is None:
            return None
        return PhysicsWeights(*(ag.action_space[a] for ag, a in zip(self.agents, self.last_actions)))

    def step(self, physics_state: Sequence[float], valid_rmse: float) -> PhysicsWeights:
        """Update every agent on the previous transition, then choose new weights.

        The first call has no previous transition and only selects.
        """
        if len(physics_state) != 4:
            raise ValueError("need one state scalar per agent")
        bins = [ag.state_bin(x) for ag, x in zip(self.agents, physics_state)]
        reward = 0.0
        if self.last_actions is not None and self.prev_rmse is not None:
            reward = compute_reward(self.prev_rmse, valid_rmse)
            for ag, s, a, s2 in zip(self.agents, self.last_states, self.last_actions, bins):
                ag.q_update(s, a, reward, s2)
        actions = [ag.select_action(b, self.rng)[0] for ag, b in zip(self.agents, bins)]
        for ag in self.agents:
            ag.decay_epsilon()
        self.last_states, self.last_actions = bins, actions
        self.prev_rmse = float(valid_rmse)
        weights = self.current_weights()
        self.history.append(WeightRound(len(self.history), weights.as_tuple(), reward, float(valid_rmse)))
        return weights

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "w1", "w2", "w3", "w4", "reward", "rmse"])
            for h in self.history:
                w.writerow([h.round, *(repr(x) for x in h.weights), repr(h.reward), repr(h.rmse)])

    def state_arrays(self) -> dict:
        out = {}
        for i, ag in enumerate(self.agents):
            out[f"q{i}"] = ag.q_table.copy()
            out[f"eps{i}"] = np.array([ag.epsilon])
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for i, ag in enumerate(self.agents):
            ag.q_table = np.array(arrays[f"q{i}"], dtype=float)
            ag.epsilon = float(arrays[f"eps{i}"][0])

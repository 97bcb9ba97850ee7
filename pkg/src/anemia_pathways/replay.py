"""Transition replay buffers: uniform and prioritized.

The prioritized buffer keeps sampling mass in a flat-array binary sum tree
(priority^alpha per leaf) plus a parallel min tree for the importance-weight
normalizer. Sampling draws independent uniforms over the total mass and
descends all of them through the tree levels at once with array indexing,
so batch work is a handful of vector operations instead of a Python loop
per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SumTree", "ReplayBuffer", "PERBuffer", "SampleBatch"]


class SumTree:
    """Fixed-capacity positive-mass tree with O(log n) update and sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.depth = max(1, int(np.ceil(np.log2(capacity))))
        self.base = 1 << self.depth
        self.sums = np.zeros(2 * self.base)
        self.mins = np.full(2 * self.base, np.inf)

    @property
    def total(self) -> float:
        return float(self.sums[1])

    @property
    def min_value(self) -> float:
        return float(self.mins[1])

    def set(self, leaves: np.ndarray, values: np.ndarray) -> None:
        """Assign mass to leaves and repair both trees bottom-up."""
        leaves = np.asarray(leaves, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if np.any((leaves < 0) | (leaves >= self.capacity)):
            raise IndexError("leaf index out of range")
        if np.any(values <= 0) or not np.all(np.isfinite(values)):
            raise ValueError("leaf mass must be positive and finite")
        idx = leaves + self.base
        self.sums[idx] = values
        self.mins[idx] = values
        parents = np.unique(idx >> 1)
        while parents[0] >= 1:
            left, right = 2 * parents, 2 * parents + 1
            self.sums[parents] = self.sums[left] + self.sums[right]
            self.mins[parents] = np.minimum(self.mins[left], self.mins[right])
            if parents[0] == 1:
                break
            parents = np.unique(parents >> 1)

    def get(self, leaves: np.ndarray) -> np.ndarray:
        return self.sums[np.asarray(leaves, dtype=np.int64) + self.base]

    def sample(self, count: int, rng: np.random.Generator,
               limit: int) -> np.ndarray:
        """Draw `count` leaves < limit with probability proportional to mass."""
        if self.total <= 0:
            raise ValueError("cannot sample from an empty tree")
        u = rng.random(count) * self.total
        idx = np.ones(count, dtype=np.int64)
        for _ in range(self.depth):
            left = 2 * idx
            lmass = self.sums[left]
            go_right = u >= lmass
            u -= np.where(go_right, lmass, 0.0)
            idx = left + go_right
        leaves = idx - self.base
        # Floating-point boundary hits can land one past the filled region.
        return np.minimum(leaves, limit - 1)

    def linear_total(self) -> float:
        """Straight sum over leaves; an oracle for the root invariant."""
        return float(np.sum(self.sums[self.base:self.base + self.capacity]))


@dataclass
class SampleBatch:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    dones: np.ndarray
    indices: np.ndarray
    weights: np.ndarray


class ReplayBuffer:
    """Uniform FIFO transition store over preallocated arrays."""

    def __init__(self, capacity: int, obs_size: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.observations = np.zeros((capacity, obs_size))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_observations = np.zeros((capacity, obs_size))
        self.dones = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def add(self, obs, action, reward, next_obs, done) -> int:
        slot = self.cursor
        self.observations[slot] = obs
        self.actions[slot] = action
        self.rewards[slot] = reward
        self.next_observations[slot] = next_obs
        self.dones[slot] = done
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return slot

    def _gather(self, indices: np.ndarray, weights: np.ndarray) -> SampleBatch:
        return SampleBatch(
            self.observations[indices], self.actions[indices],
            self.rewards[indices], self.next_observations[indices],
            self.dones[indices], indices, weights,
        )

    def sample(self, batch_size: int, rng: np.random.Generator,
               beta: float = 0.0) -> SampleBatch:
        if self.size < 1:
            raise ValueError("cannot sample from an empty buffer")
        indices = rng.integers(0, self.size, batch_size)
        return self._gather(indices, np.ones(batch_size))

    def update_priorities(self, indices, td_errors) -> None:
        """Uniform replay ignores priorities; kept for interface parity."""


class PERBuffer(ReplayBuffer):
    """Proportional prioritized replay: P(i) ~ (|td_i| + eps)^alpha."""

    def __init__(self, capacity: int, obs_size: int, alpha: float = 0.6,
                 eps_priority: float = 1e-6):
        super().__init__(capacity, obs_size)
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        self.alpha = alpha
        self.eps_priority = eps_priority
        self.tree = SumTree(capacity)
        self.max_priority = 1.0

    def add(self, obs, action, reward, next_obs, done) -> int:
        slot = super().add(obs, action, reward, next_obs, done)
        self.tree.set(np.array([slot]),
                      np.array([self.max_priority ** self.alpha]))
        return slot

    def sample(self, batch_size: int, rng: np.random.Generator,
               beta: float = 0.0) -> SampleBatch:
        if self.size < 1:
            raise ValueError("cannot sample from an empty buffer")
        indices = self.tree.sample(batch_size, rng, self.size)
        mass = self.tree.get(indices)
        probs = mass / self.tree.total
        weights = (self.size * probs) ** -beta
        min_prob = self.tree.min_value / self.tree.total
        weights /= (self.size * min_prob) ** -beta
        return self._gather(indices, weights)

    def update_priorities(self, indices, td_errors) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        if np.any((indices < 0) | (indices >= self.size)):
            raise IndexError("priority update index out of range")
        raw = np.abs(np.asarray(td_errors, dtype=np.float64)) + self.eps_priority
        self.max_priority = max(self.max_priority, float(np.max(raw)))
        self.tree.set(indices, raw ** self.alpha)

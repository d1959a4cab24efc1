"""Episode records, padded episode batches and the episodic replay buffer."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass
class Episode:
    obs: np.ndarray  # [T, n, obs_dim]
    actions: np.ndarray  # [T, n]
    rewards: np.ndarray  # [T]
    states: np.ndarray  # [T, state_dim]
    noise: np.ndarray  # [T, n, role_dim]
    positions: np.ndarray  # [T+1, n, ...], evaluation only
    seed: int = 0

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())

    def equals(self, other) -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("obs", "actions", "rewards", "states", "noise", "positions")
        )


@dataclass
class EpisodeBatch:
    obs: np.ndarray  # [B, T, n, obs_dim]
    actions: np.ndarray  # [B, T, n]
    rewards: np.ndarray  # [B, T]
    states: np.ndarray  # [B, T, state_dim]
    mask: np.ndarray  # [B, T], 1 on valid steps, a prefix
    noise: np.ndarray  # [B, T, n, role_dim]

    @classmethod
    def from_episodes(cls, episodes, t_max=None):
        if not episodes:
            raise ValueError("cannot batch zero episodes")
        t_max = t_max or max(e.length for e in episodes)
        b = len(episodes)
        e0 = episodes[0]
        n = e0.actions.shape[1]
        out = cls(
            obs=np.zeros((b, t_max, n, e0.obs.shape[-1])),
            actions=np.zeros((b, t_max, n), dtype=np.int64),
            rewards=np.zeros((b, t_max)),
            states=np.zeros((b, t_max, e0.states.shape[-1])),
            mask=np.zeros((b, t_max)),
            noise=np.zeros((b, t_max, n, e0.noise.shape[-1])),
        )
        for k, e in enumerate(episodes):
            t = e.length
            out.obs[k, :t] = e.obs
            out.actions[k, :t] = e.actions
            out.rewards[k, :t] = e.rewards
            out.states[k, :t] = e.states
            out.mask[k, :t] = 1.0
            out.noise[k, :t] = e.noise
        return out

    @property
    def size(self):
        return self.rewards.shape[0]


class ReplayBuffer:
    """FIFO ring of whole episodes; sampling is uniform without replacement."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.episodes: deque[Episode] = deque(maxlen=capacity)

    def __len__(self):
        return len(self.episodes)

    def insert(self, episodes):
        self.episodes.extend(episodes)

    def can_sample(self, k):
        return len(self.episodes) >= k

    def sample(self, k, rng) -> list[Episode]:
        idx = rng.choice(len(self.episodes), size=k, replace=False)
        return [self.episodes[i] for i in idx]

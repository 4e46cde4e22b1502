"""Ring-buffer replay storage that hands out contiguous, single-episode windows."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NotReady(LookupError):
    """No valid window exists yet; keep collecting."""


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    d: float
    truncated: bool = False

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        if np.any(np.abs(a) > 1.0):
            raise ValueError("actions must lie in [-1, 1]")
        if self.d not in (0, 1, 0.0, 1.0, True, False):
            raise ValueError("done flag must be 0 or 1")
        if not np.isfinite(self.r):
            raise ValueError("reward must be finite")


@dataclass
class SequenceWindow:
    """A batch of windows: states (B, H+1, ds), actions (B, H, da), rewards/dones (B, H)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    starts: np.ndarray

    @property
    def history(self) -> int:
        return self.actions.shape[1]

    @property
    def batch(self) -> int:
        return self.actions.shape[0]


class ReplayBuffer:
    """Fixed-capacity FIFO store of transitions tagged with episode ids.

    A window of H transitions starting at global index ``g`` is valid when all
    H transitions are still stored and belong to one episode.
    """

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.ends = np.zeros(capacity, dtype=bool)
        self.episode = np.zeros(capacity, dtype=np.int64)
        self.total = 0
        self.current_episode = 0

    def __len__(self) -> int:
        return min(self.total, self.capacity)

    def push(self, t: Transition) -> None:
        i = self.total % self.capacity
        self.obs[i] = t.s
        self.actions[i] = t.a
        self.rewards[i] = t.r
        self.next_obs[i] = t.s_next
        self.dones[i] = float(t.d)
        ended = bool(t.d) or bool(t.truncated)
        self.ends[i] = ended
        self.episode[i] = self.current_episode
        self.total += 1
        if ended:
            self.current_episode += 1

    def _valid(self, g: np.ndarray, H: int) -> np.ndarray:
        oldest = self.total - len(self)
        ok = (g >= oldest) & (g + H - 1 <= self.total - 1)
        first = self.episode[g % self.capacity]
        last = self.episode[(g + H - 1) % self.capacity]
        return ok & (first == last)

    def valid_starts(self, H: int) -> np.ndarray:
        """Every valid global start index, in increasing order."""
        oldest = self.total - len(self)
        g = np.arange(oldest, max(oldest, self.total - H + 1))
        return g[self._valid(g, H)] if g.size else g

    def sample_windows(self, batch_size: int, H: int, rng: np.random.Generator) -> SequenceWindow:
        """Uniformly sample ``batch_size`` valid windows of H transitions (with replacement)."""
        if H < 1:
            raise ValueError("history length must be at least 1")
        oldest = self.total - len(self)
        hi = self.total - H  # inclusive upper bound on start
        if hi < oldest:
            raise NotReady("not enough transitions for one window")
        starts = np.empty(0, dtype=np.int64)
        for _ in range(64):
            cand = rng.integers(oldest, hi + 1, size=2 * batch_size)
            starts = np.concatenate([starts, cand[self._valid(cand, H)]])
            if starts.size >= batch_size:
                return self._gather(starts[:batch_size], H)
        pool = self.valid_starts(H)
        if pool.size == 0:
            raise NotReady("no window fits inside one stored episode")
        return self._gather(rng.choice(pool, size=batch_size), H)

    def _gather(self, starts: np.ndarray, H: int) -> SequenceWindow:
        idx = (starts[:, None] + np.arange(H)[None, :]) % self.capacity
        states = np.concatenate([self.obs[idx], self.next_obs[idx[:, -1:]]], axis=1)
        return SequenceWindow(states, self.actions[idx], self.rewards[idx], self.dones[idx], starts.copy())

    def state_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("obs", "next_obs", "actions", "rewards", "dones", "ends", "episode")} | {
            "total": np.array(self.total), "current_episode": np.array(self.current_episode)}

    def load_state_dict(self, state: dict) -> None:
        for k in ("obs", "next_obs", "actions", "rewards", "dones", "ends", "episode"):
            getattr(self, k)[...] = state[k]
        self.total = int(state["total"])
        self.current_episode = int(state["current_episode"])

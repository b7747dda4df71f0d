"""Prioritized n-step experience replay backed by a sum-tree."""

from __future__ import annotations

import contextlib
import threading
from collections import deque
from dataclasses import dataclass
from typing import Any

import numpy as np

from fastrainbow.errors import ConfigError, InputError, NotReadyError


@dataclass
class Transition:
    """One agent-level environment step.

    ``next_obs`` is the observation reached by the step. On the final step of
    an episode it is the last observation of that episode, not the first
    observation after the automatic reset.
    """

    obs: np.ndarray
    action: int
    reward: float
    done: bool
    timeout: bool
    env_id: int
    next_obs: np.ndarray


@dataclass
class NStepEntry:
    obs: np.ndarray
    action: int
    return_n: float
    next_obs: np.ndarray
    discount_n: float
    bootstrap: bool


@dataclass
class ReplayConfig:
    capacity: int = 2**20
    n: int = 3
    gamma: float = 0.99
    priority_exponent: float = 0.5
    priority_floor: float = 1e-6
    beta0: float = 0.45
    beta_anneal_frames: int = 10_000_000

    def validate(self) -> None:
        if self.capacity <= 0:
            raise ConfigError(f"replay capacity must be positive, got {self.capacity}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if not 0.0 <= self.priority_exponent <= 1.0:
            raise ConfigError(f"priority_exponent must lie in [0, 1], got {self.priority_exponent}")
        if not 0.0 < self.beta0 <= 1.0:
            raise ConfigError(f"beta0 must lie in (0, 1], got {self.beta0}")
        if self.priority_floor <= 0.0:
            raise ConfigError(f"priority_floor must be positive, got {self.priority_floor}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.beta_anneal_frames <= 0:
            raise ConfigError("beta_anneal_frames must be positive")


def next_power_of_two(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


class SumTree:
    """Complete binary tree of partial sums over ``capacity`` leaf priorities.

    Node 1 is the root and node ``i`` has children ``2i`` and ``2i + 1``; leaf
    ``j`` lives at node ``capacity + j``. Parents are always recomputed as the
    sum of their children, so no drift accumulates across updates.
    """

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ConfigError(f"sum-tree capacity must be positive, got {capacity}")
        self.capacity = next_power_of_two(capacity)
        self.nodes = np.zeros(2 * self.capacity, dtype=np.float64)

    @property
    def leaves(self) -> np.ndarray:
        return self.nodes[self.capacity:]

    def total(self) -> float:
        # with a single leaf, node 1 is both root and leaf
        return float(self.nodes[1])

    def __getitem__(self, idx):
        return self.nodes[self.capacity + np.asarray(idx)]

    def update(self, leaf_idx, priorities) -> None:
        leaf_idx = np.atleast_1d(np.asarray(leaf_idx, dtype=np.int64))
        priorities = np.broadcast_to(np.asarray(priorities, dtype=np.float64), leaf_idx.shape)
        if np.any(priorities < 0) or not np.all(np.isfinite(priorities)):
            raise InputError("priorities must be finite and non-negative")
        if np.any((leaf_idx < 0) | (leaf_idx >= self.capacity)):
            raise InputError("leaf index out of range")
        nodes = leaf_idx + self.capacity
        # duplicate indices: last write wins, as with sequential assignment
        self.nodes[nodes] = priorities
        if self.capacity == 1:
            return
        parents = np.unique(nodes // 2)
        while True:
            self.nodes[parents] = self.nodes[2 * parents] + self.nodes[2 * parents + 1]
            if parents[0] == 1:
                break
            parents = np.unique(parents // 2)

    def rebuild(self) -> None:
        """Recompute every internal node from the leaves."""
        for level_start in _internal_levels(self.capacity):
            idx = np.arange(level_start, 2 * level_start)
            self.nodes[idx] = self.nodes[2 * idx] + self.nodes[2 * idx + 1]

    def prefix_sample(self, u):
        """Map prefix-sum values to leaf indices.

        Returns leaf ``i`` with ``sum(p[:i]) <= u < sum(p[:i + 1])``. Accepts a
        scalar or an array and returns the same shape.
        """
        total = self.total()
        u_arr = np.asarray(u, dtype=np.float64)
        if total <= 0.0:
            raise NotReadyError("sum-tree total is zero")
        if np.any((u_arr < 0.0) | (u_arr >= total)) or not np.all(np.isfinite(u_arr)):
            raise InputError(f"prefix value outside [0, {total})")
        scalar = u_arr.ndim == 0
        u_arr = np.atleast_1d(u_arr).copy()
        node = np.ones(u_arr.shape, dtype=np.int64)
        while True:
            if node[0] >= self.capacity:
                break
            left = 2 * node
            left_sum = self.nodes[left]
            right_sum = self.nodes[left + 1]
            # rounding can leave u >= left_sum with an empty right subtree
            go_right = (u_arr >= left_sum) & (right_sum > 0.0)
            u_arr = np.where(go_right, u_arr - left_sum, u_arr)
            node = np.where(go_right, left + 1, left)
        leaf = node - self.capacity
        return int(leaf[0]) if scalar else leaf


def _internal_levels(capacity: int):
    start = capacity // 2
    while start >= 1:
        yield start
        start //= 2


class NStepAssembler:
    """Per-environment queues that fold raw transitions into n-step entries."""

    def __init__(self, n: int, gamma: float, num_envs: int):
        self.n = n
        self.gamma = gamma
        self.queues = [deque() for _ in range(num_envs)]

    def _entry(self, window) -> NStepEntry:
        ret = 0.0
        disc = 1.0
        for t in window:
            ret += disc * t.reward
            disc *= self.gamma
        last = window[-1]
        return NStepEntry(
            obs=window[0].obs,
            action=window[0].action,
            return_n=ret,
            next_obs=last.next_obs,
            discount_n=disc,
            bootstrap=not last.done,
        )

    def push(self, t: Transition) -> list[NStepEntry]:
        if not 0 <= t.env_id < len(self.queues):
            raise InputError(f"unknown env_id {t.env_id}")
        q = self.queues[t.env_id]
        q.append(t)
        out = []
        if t.done or t.timeout:
            while q:
                out.append(self._entry(list(q)))
                q.popleft()
        elif len(q) == self.n:
            out.append(self._entry(list(q)))
            q.popleft()
        return out

    def pending(self) -> int:
        return sum(len(q) for q in self.queues)


class PrioritizedReplay:
    """Proportional prioritized replay of n-step entries.

    Indices handed out by :meth:`sample` are insertion serial numbers, so an
    update that arrives after its slot was overwritten is detected and skipped.
    With ``thread_safe=True`` every public operation holds one lock, which
    makes push, sample and priority updates linearizable.
    """

    def __init__(self, config: ReplayConfig, num_envs: int = 1, seed: int | None = 0,
                 obs_dtype: Any = np.float32, thread_safe: bool = False):
        config.validate()
        self.config = config
        self.tree = SumTree(config.capacity)
        self.capacity = self.tree.capacity
        self.obs_dtype = np.dtype(obs_dtype)
        self.assembler = NStepAssembler(config.n, config.gamma, num_envs)
        self.rng = np.random.default_rng(seed)
        self.max_priority = 1.0
        self.size = 0
        self.write_cursor = 0
        self.serial = np.full(self.capacity, -1, dtype=np.int64)
        self.next_serial = 0
        self.stale_updates = 0
        self._lock = threading.Lock() if thread_safe else contextlib.nullcontext()
        self._obs = None
        self._next_obs = None
        self._action = np.zeros(self.capacity, dtype=np.int64)
        self._return = np.zeros(self.capacity, dtype=np.float64)
        self._discount = np.zeros(self.capacity, dtype=np.float64)
        self._bootstrap = np.zeros(self.capacity, dtype=bool)

    def __len__(self) -> int:
        return self.size

    def _encode(self, obs: np.ndarray) -> np.ndarray:
        if self.obs_dtype == np.uint8:
            return np.rint(np.asarray(obs, dtype=np.float32) * 255.0).astype(np.uint8)
        return np.asarray(obs, dtype=self.obs_dtype)

    def _decode(self, arr: np.ndarray) -> np.ndarray:
        if self.obs_dtype == np.uint8:
            return arr.astype(np.float32) / np.float32(255.0)
        return arr.astype(np.float32, copy=False)

    def _store(self, entries: list[NStepEntry]) -> None:
        if not entries:
            return
        if self._obs is None:
            shape = (self.capacity,) + np.shape(entries[0].obs)
            self._obs = np.zeros(shape, dtype=self.obs_dtype)
            self._next_obs = np.zeros(shape, dtype=self.obs_dtype)
        slots = (self.write_cursor + np.arange(len(entries))) % self.capacity
        # a batch larger than capacity keeps only its newest entries
        keep = slice(max(0, len(entries) - self.capacity), None)
        entries, slot_arr = entries[keep], slots[keep]
        self._obs[slot_arr] = self._encode(np.stack([e.obs for e in entries]))
        self._next_obs[slot_arr] = self._encode(np.stack([e.next_obs for e in entries]))
        self._action[slot_arr] = [e.action for e in entries]
        self._return[slot_arr] = [e.return_n for e in entries]
        self._discount[slot_arr] = [e.discount_n for e in entries]
        self._bootstrap[slot_arr] = [e.bootstrap for e in entries]
        first_serial = self.next_serial + len(slots) - len(slot_arr)
        self.serial[slot_arr] = first_serial + np.arange(len(slot_arr))
        self.next_serial += len(slots)
        self.tree.update(slot_arr, self.max_priority)
        self.write_cursor = int((self.write_cursor + len(slots)) % self.capacity)
        self.size = min(self.size + len(slots), self.capacity)

    def push(self, t: Transition) -> list[NStepEntry]:
        with self._lock:
            entries = self.assembler.push(t)
            self._store(entries)
            return entries

    def push_many(self, transitions) -> int:
        with self._lock:
            entries = []
            for t in transitions:
                entries.extend(self.assembler.push(t))
            self._store(entries)
            return len(entries)

    def beta_at(self, frame: int) -> float:
        c = self.config
        return min(1.0, c.beta0 + (1.0 - c.beta0) * frame / c.beta_anneal_frames)

    def importance_weights(self, priorities: np.ndarray, beta: float) -> np.ndarray:
        probs = np.asarray(priorities, dtype=np.float64) / self.tree.total()
        raw = (self.size * probs) ** (-beta)
        return raw / raw.max()

    def sample(self, batch_size: int, frame: int = 0):
        """Stratified proportional sample.

        Returns ``(indices, batch, weights)`` where ``batch`` is a dict of
        stacked arrays (obs, action, return_n, next_obs, discount_n,
        bootstrap) and weights are normalized so their maximum is 1.
        """
        with self._lock:
            if self.size < batch_size or self.size == 0:
                raise NotReadyError(f"replay holds {self.size} entries, need {batch_size}")
            total = self.tree.total()
            segment = total / batch_size
            u = (np.arange(batch_size) + self.rng.random(batch_size)) * segment
            u = np.minimum(u, np.nextafter(total, 0.0))
            slots = self.tree.prefix_sample(u)
            priorities = self.tree[slots]
            weights = self.importance_weights(priorities, self.beta_at(frame))
            batch = {
                "obs": self._decode(self._obs[slots]),
                "action": self._action[slots].copy(),
                "return_n": self._return[slots].copy(),
                "next_obs": self._decode(self._next_obs[slots]),
                "discount_n": self._discount[slots].copy(),
                "bootstrap": self._bootstrap[slots].copy(),
            }
            return self.serial[slots].copy(), batch, weights

    def entry(self, index: int) -> NStepEntry:
        slot = index % self.capacity
        if self.serial[slot] != index:
            raise InputError(f"entry {index} is no longer live")
        return NStepEntry(self._decode(self._obs[slot]), int(self._action[slot]),
                          float(self._return[slot]), self._decode(self._next_obs[slot]),
                          float(self._discount[slot]), bool(self._bootstrap[slot]))

    def live_indices(self) -> np.ndarray:
        return np.sort(self.serial[self.serial >= 0])

    def update_priorities(self, indices, td_abs) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        td_abs = np.abs(np.asarray(td_abs, dtype=np.float64))
        c = self.config
        with self._lock:
            slots = indices % self.capacity
            live = self.serial[slots] == indices
            self.stale_updates += int(np.count_nonzero(~live))
            if not np.any(live):
                return
            p = (td_abs[live] + c.priority_floor) ** c.priority_exponent
            self.tree.update(slots[live], p)
            self.max_priority = max(self.max_priority, float(p.max()))

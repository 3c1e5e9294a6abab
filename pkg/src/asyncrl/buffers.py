"""Replay stores and the asynchronous train-batch prefetcher.

Three buffers with distinct roles: the policy buffer and the world-model
buffer accept real trajectories; the imagination buffer accepts imagined
ones.  Buffers are internally locked so rollout code (including plain OS
threads in tests) can push while the prefetcher samples.

The prefetcher moves everything heavy off the optimizer's critical path:
it samples episodes, recomputes values under the newest critic, computes
advantages, normalizes them globally, packs flat arrays, and parks the
result in a small bounded cache.  A full cache blocks the prefetcher, so
batches can never pile up arbitrarily stale.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Callable, Generator

import numpy as np

from .runtime import CLOSED, Channel, Put, Sleep

MAIN = "main"
WORLD_MODEL = "world_model"
IMAGINED = "imagined"

_ACCEPTED_SOURCE = {MAIN: "real", WORLD_MODEL: "real", IMAGINED: "imagined"}


class BufferKindError(ValueError):
    pass


@dataclass(frozen=True)
class BufferStats:
    size: int
    pushed: int
    sampled: int
    evicted: int


class ReplayBuffer:
    """Bounded FIFO of immutable trajectories, uniform sampling."""

    def __init__(self, kind: str, capacity: int) -> None:
        if kind not in _ACCEPTED_SOURCE:
            raise BufferKindError(f"unknown buffer kind {kind!r}")
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.kind = kind
        self.capacity = capacity
        self._items: list[Any] = []
        self._lock = threading.Lock()
        self._pushed = 0
        self._sampled = 0
        self._evicted = 0

    def push(self, traj: Any) -> None:
        """Append one completed trajectory; never blocks beyond the lock."""
        expected = _ACCEPTED_SOURCE[self.kind]
        if traj.source != expected:
            raise BufferKindError(
                f"buffer {self.kind!r} accepts source {expected!r}, got {traj.source!r}"
            )
        with self._lock:
            if len(self._items) >= self.capacity:
                self._items.pop(0)
                self._evicted += 1
            self._items.append(traj)
            self._pushed += 1

    def sample(self, n: int, rng: np.random.Generator) -> list[Any] | None:
        """n uniform picks with replacement; None signals not-ready."""
        if n < 0:
            raise ValueError(f"sample size must be >= 0, got {n}")
        if n == 0:
            return []
        with self._lock:
            if len(self._items) < n:
                return None
            idx = rng.integers(0, len(self._items), size=n)
            picks = [self._items[i] for i in idx]
            self._sampled += n
        return picks

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    def stats(self) -> BufferStats:
        with self._lock:
            return BufferStats(len(self._items), self._pushed, self._sampled, self._evicted)


@dataclass(frozen=True)
class TrainBatch:
    """Training-ready flat arrays over all transitions of sampled episodes."""

    obs: np.ndarray              # (N, obs_dim)
    steps: np.ndarray            # (N,) step indices
    tokens: np.ndarray           # (N, K)
    behavior_logp: np.ndarray    # (N, K) log-probs of chosen tokens at collection
    advantages: np.ndarray       # (N,) globally normalized
    value_targets: np.ndarray    # (N,)
    critic_version: int
    n_real: int
    n_imagined: int
    norm_mean: float
    norm_std: float
    norm_count: int
    shard_sizes: tuple[int, ...]
    behavior_lag_mean: float

    @property
    def n_transitions(self) -> int:
        return int(self.obs.shape[0])

    def check_finite(self) -> bool:
        arrays = (self.obs, self.behavior_logp, self.advantages, self.value_targets)
        return all(np.all(np.isfinite(a)) for a in arrays)


class Prefetcher:
    """Builds TrainBatches ahead of the trainer into a bounded cache."""

    def __init__(
        self,
        buffer: ReplayBuffer,
        builder: Callable[[list[Any]], TrainBatch | None],
        cache: Channel,
        rng: np.random.Generator,
        batch_episodes: int,
        min_ready: int | None = None,
        min_new_pushed: int = 1,
        poll_interval: float = 0.002,
        metrics: Any | None = None,
    ) -> None:
        if cache.capacity is None:
            raise ValueError("prefetch cache must be a bounded channel")
        self.buffer = buffer
        self.builder = builder
        self.cache = cache
        self.rng = rng
        self.batch_episodes = batch_episodes
        self.min_ready = batch_episodes if min_ready is None else min_ready
        self.min_new_pushed = min_new_pushed
        self.poll_interval = poll_interval
        self.metrics = metrics
        self.built = 0
        self.dropped = 0

    def run(self, stop: Any) -> Generator:
        """Prefetch loop task; exits on stop or when the cache closes."""
        consumed_pushes = 0
        while not stop.is_set:
            stats = self.buffer.stats()
            ready = (
                stats.size >= self.min_ready
                and stats.pushed >= consumed_pushes + self.min_new_pushed
            )
            if not ready:
                yield Sleep(self.poll_interval)
                continue
            trajs = self.buffer.sample(self.batch_episodes, self.rng)
            if trajs is None:
                yield Sleep(self.poll_interval)
                continue
            consumed_pushes = stats.pushed
            batch = self.builder(trajs)
            if batch is None or not batch.check_finite():
                # Hook failure: drop the batch, count it, keep serving.
                self.dropped += 1
                if self.metrics is not None:
                    self.metrics.emit("prefetch_drop", total=self.dropped)
                continue
            result = yield Put(self.cache, batch)
            if result is CLOSED:
                return
            self.built += 1
            if self.metrics is not None:
                self.metrics.emit(
                    "prefetch", built=self.built, cache_depth=len(self.cache),
                    critic_version=batch.critic_version,
                )

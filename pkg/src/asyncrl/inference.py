"""Centralized batched inference with a dynamic batching window.

One batching loop per model kind pulls requests from a shared queue and
fires a batch as soon as either the batch is full or the oldest queued
request has waited max_wait:

    trigger  <=>  queue_len >= batch_size  OR  oldest_wait >= max_wait

Weight publication is versioned and atomic: a batch is evaluated entirely
under the snapshot current when it fires; an update lands between
batches, never inside one.  Batching is evaluation-neutral: responses are
computed per request under a per-ticket RNG substream, so batch
composition cannot change any response bitwise.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Any, Generator

import numpy as np

from .env import Observation
from .models import ModelBundle, ObsModel, PolicyModel, RewardModel, ValueHead, state_value
from .runtime import CLOSED, TIMEOUT, Channel, Get, OneShot, Scheduler, Sleep, Wait

POLICY = "policy"
OBS_MODEL = "observation_model"
REWARD_MODEL = "reward_model"
MODEL_KINDS = (POLICY, OBS_MODEL, REWARD_MODEL)


class ConfigError(ValueError):
    pass


class PayloadError(ValueError):
    pass


class ServiceShutdownError(RuntimeError):
    pass


class ServiceNotReadyError(RuntimeError):
    pass


class VersionRegressionError(ValueError):
    pass


@dataclass(frozen=True)
class BatchWindowConfig:
    batch_size: int
    max_wait: float               # seconds
    service_time: float = 0.0    # modeled per-batch evaluation time (seconds)

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_wait <= 0:
            raise ConfigError(f"max_wait must be > 0, got {self.max_wait}")
        if self.service_time < 0:
            raise ConfigError(f"service_time must be >= 0, got {self.service_time}")


def should_trigger(queue_len: int, oldest_wait: float, cfg: BatchWindowConfig) -> bool:
    """The dynamic-window firing rule; oldest_wait measured from the oldest
    queued request's enqueue timestamp."""
    if queue_len <= 0:
        return False
    return queue_len >= cfg.batch_size or oldest_wait >= cfg.max_wait


@dataclass
class InferenceRequest:
    ticket: int
    kind: str
    obs: Observation
    chunk: np.ndarray | None
    enqueue_ts: float
    reply: OneShot


@dataclass(frozen=True)
class PolicyResponse:
    tokens: np.ndarray
    logits: np.ndarray          # (K, n_actions) behavior logits
    value: float
    version: int


@dataclass(frozen=True)
class ObsResponse:
    next_obs: np.ndarray
    version: int


@dataclass(frozen=True)
class RewardResponse:
    probability: float
    version: int


@dataclass(frozen=True)
class VersionedWeights:
    """Immutable snapshot served for one model kind."""

    kind: str
    version: int
    policy: PolicyModel | None = None
    value: ValueHead | None = None
    obs_model: ObsModel | None = None
    reward_model: RewardModel | None = None

    @classmethod
    def from_bundle(cls, kind: str, version: int, bundle: ModelBundle) -> "VersionedWeights":
        if kind == POLICY:
            return cls(kind, version, policy=bundle.policy, value=bundle.value)
        if kind == OBS_MODEL:
            return cls(kind, version, obs_model=bundle.obs_model)
        if kind == REWARD_MODEL:
            return cls(kind, version, reward_model=bundle.reward_model)
        raise ConfigError(f"unknown model kind {kind!r}")


def run_batch(
    weights: VersionedWeights,
    requests: list[InferenceRequest],
    base_seed: int,
) -> list[Any]:
    """Evaluate a batch under one weight snapshot.

    Each slot's stochastic sampling uses an RNG substream derived from the
    request ticket alone, which makes batched evaluation bitwise equal to
    evaluating each request by itself.
    """
    if not requests:
        raise PayloadError("run_batch on an empty request list")
    kinds = {r.kind for r in requests}
    if kinds != {weights.kind}:
        raise PayloadError(f"batch mixes kinds {sorted(kinds)} under weights {weights.kind!r}")
    responses: list[Any] = []
    for req in requests:
        rng = np.random.default_rng(np.random.SeedSequence([base_seed, req.ticket]))
        if req.kind == POLICY:
            tokens, logits = weights.policy.sample_chunk(req.obs.vec, rng)
            value = state_value(weights.policy, weights.value, req.obs.vec, req.obs.step)
            responses.append(PolicyResponse(tokens, logits, value, weights.version))
        elif req.kind == OBS_MODEL:
            pred = weights.obs_model.predict(req.obs.vec, req.chunk)
            responses.append(ObsResponse(pred, weights.version))
        elif req.kind == REWARD_MODEL:
            prob = weights.reward_model.predict(req.obs.vec)
            responses.append(RewardResponse(prob, weights.version))
        else:
            raise PayloadError(f"unknown model kind {req.kind!r}")
    return responses


class InferenceService:
    """In-process batched inference shared by every rollout worker."""

    def __init__(
        self,
        scheduler: Scheduler,
        configs: dict[str, BatchWindowConfig],
        obs_dim: int,
        base_seed: int = 0,
        metrics: Any | None = None,
        keep_history: bool = False,
    ) -> None:
        for kind in configs:
            if kind not in MODEL_KINDS:
                raise ConfigError(f"unknown model kind {kind!r}")
        self.scheduler = scheduler
        self.configs = dict(configs)
        self.obs_dim = obs_dim
        self.base_seed = base_seed
        self.metrics = metrics
        self.keep_history = keep_history
        self._queues = {kind: Channel(f"requests.{kind}") for kind in configs}
        self._served: dict[str, VersionedWeights] = {}
        self._history: dict[str, dict[int, VersionedWeights]] = {k: {} for k in configs}
        self._tickets = itertools.count()
        self._shutdown = False
        self.counters = {
            "submitted": {k: 0 for k in configs},
            "batches": {k: 0 for k in configs},
            "responses": {k: 0 for k in configs},
        }

    # -- client side -----------------------------------------------------------

    def submit_request(
        self, kind: str, obs: Observation, chunk: np.ndarray | None = None
    ) -> InferenceRequest:
        """Enqueue a request; returns immediately with a reply event."""
        if self._shutdown:
            raise ServiceShutdownError("submit after service shutdown")
        if kind not in self._queues:
            raise ConfigError(f"model kind {kind!r} not served")
        if obs.vec.shape != (self.obs_dim,):
            raise PayloadError(
                f"observation length {obs.vec.shape} != ({self.obs_dim},) for {kind}"
            )
        if kind == OBS_MODEL:
            if chunk is None:
                raise PayloadError("observation-model request needs an action chunk")
        elif chunk is not None:
            raise PayloadError(f"{kind} request does not take an action chunk")
        ticket = next(self._tickets)
        req = InferenceRequest(
            ticket=ticket, kind=kind, obs=obs, chunk=chunk,
            enqueue_ts=self.scheduler.now, reply=OneShot(f"reply.{ticket}"),
        )
        self.counters["submitted"][kind] += 1
        self._queues[kind].put_nowait(req)
        return req

    def request(
        self, kind: str, obs: Observation, chunk: np.ndarray | None = None,
        timeout: float | None = None,
    ) -> Generator:
        """Task-side helper: submit and wait; returns response or TIMEOUT."""
        req = self.submit_request(kind, obs, chunk)
        response = yield Wait(req.reply, timeout=timeout)
        return response

    def queue_len(self, kind: str) -> int:
        return len(self._queues[kind])

    # -- weight publication ------------------------------------------------------

    def update_weights(self, weights: VersionedWeights) -> bool:
        """Swap the served snapshot; in-flight batches keep their old one.

        Returns True when applied, False for an idempotent equal-version
        republish; a lower version raises VersionRegressionError.
        """
        kind = weights.kind
        if kind not in self._queues:
            raise ConfigError(f"model kind {kind!r} not served")
        current = self._served.get(kind)
        if current is not None:
            if weights.version == current.version:
                return False
            if weights.version < current.version:
                raise VersionRegressionError(
                    f"{kind}: publish version {weights.version} < served {current.version}"
                )
        self._served[kind] = weights
        if self.keep_history:
            self._history[kind][weights.version] = weights
        return True

    def served_version(self, kind: str) -> int | None:
        w = self._served.get(kind)
        return None if w is None else w.version

    def historical(self, kind: str, version: int) -> VersionedWeights:
        return self._history[kind][version]

    # -- service side -------------------------------------------------------------

    def start(self) -> None:
        for kind in self._queues:
            self.scheduler.spawn(f"batcher.{kind}", self._batcher(kind))

    def shutdown(self) -> None:
        """Reject new submissions and let batchers drain, then exit."""
        self._shutdown = True
        for ch in self._queues.values():
            ch.close()

    def _fire(self, kind: str, batch: list[InferenceRequest]) -> None:
        weights = self._served.get(kind)
        if weights is None:
            raise ServiceNotReadyError(f"no weights ever published for kind {kind!r}")
        responses = run_batch(weights, batch, self.base_seed)
        now = self.scheduler.now
        waits = [now - r.enqueue_ts for r in batch]
        for req, resp in zip(batch, responses):
            req.reply.set(resp)
        self.counters["batches"][kind] += 1
        self.counters["responses"][kind] += len(batch)
        if self.metrics is not None:
            self.metrics.emit(
                "batch", model=kind, size=len(batch),
                wait_p50=float(np.median(waits)), wait_max=float(max(waits)),
                version=weights.version,
            )

    def _batcher(self, kind: str) -> Generator:
        """One dynamic-window batching loop; exactly one per model kind."""
        ch = self._queues[kind]
        cfg = self.configs[kind]
        pending: list[InferenceRequest] = []
        closing = False
        window_expired = False
        while True:
            while len(pending) < cfg.batch_size and len(ch) > 0:
                pending.append(ch.get_nowait())
            if not pending:
                if closing:
                    return
                item = yield Get(ch)
                if item is CLOSED:
                    return
                pending.append(item)
                continue
            oldest_wait = self.scheduler.now - pending[0].enqueue_ts
            if closing or window_expired or should_trigger(len(pending), oldest_wait, cfg):
                batch, pending = pending[: cfg.batch_size], pending[cfg.batch_size:]
                window_expired = False
                if cfg.service_time > 0:
                    yield Sleep(cfg.service_time)
                self._fire(kind, batch)
                continue
            item = yield Get(ch, timeout=cfg.max_wait - oldest_wait)
            if item is CLOSED:
                closing = True
            elif item is TIMEOUT:
                # our own window deadline fired; trust it over re-derived
                # float arithmetic, which can stall an ulp short of max_wait
                window_expired = True
            else:
                pending.append(item)

"""Rollout workers: failure-weighted task selection, collection, imagination.

Workers never touch model parameters.  Every decision goes through the
inference service, so a worker is just an environment driver: select a
task by recent failure mass, roll an episode, deposit the trajectory,
then optionally dream a few imagined episodes from stored real frames
through the observation/reward models.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Any, Generator

import numpy as np

from .buffers import ReplayBuffer
from .env import (
    N_ACTIONS,
    GridTaskSuite,
    LatencyModel,
    Observation,
    UnknownTaskError,
    scripted_chunk,
)
from .inference import OBS_MODEL, POLICY, REWARD_MODEL, InferenceService
from .runtime import TIMEOUT, Sleep


@dataclass(frozen=True)
class Trajectory:
    """One completed episode, real or imagined.  Immutable once built.

    observations/steps cover T+1 frames; tokens/rewards/behavior data
    cover the T decisions.  `done` records true termination (success);
    horizon-truncated episodes keep done=False so the stored bootstrap
    value is used.  step_versions tags the weight version that served
    each decision (weights may update mid-episode).
    """

    task_id: int
    source: str
    observations: np.ndarray
    steps: np.ndarray
    tokens: np.ndarray
    rewards: np.ndarray
    behavior_logits: np.ndarray
    values: np.ndarray
    bootstrap_value: float
    done: bool
    behavior_version: int
    step_versions: np.ndarray

    def __post_init__(self) -> None:
        if self.source not in ("real", "imagined"):
            raise ValueError(f"source must be real|imagined, got {self.source!r}")
        obs = np.asarray(self.observations, dtype=np.float64)
        steps = np.asarray(self.steps, dtype=np.int64)
        tokens = np.asarray(self.tokens, dtype=np.int64)
        rewards = np.asarray(self.rewards, dtype=np.float64)
        logits = np.asarray(self.behavior_logits, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        versions = np.asarray(self.step_versions, dtype=np.int64)
        t_len = tokens.shape[0]
        if t_len < 1:
            raise ValueError("trajectory needs at least one decision")
        if obs.shape[0] != t_len + 1 or steps.shape != (t_len + 1,):
            raise ValueError("observations/steps must cover T+1 frames")
        if rewards.shape != (t_len,) or values.shape != (t_len,) or versions.shape != (t_len,):
            raise ValueError("per-decision arrays must have length T")
        if logits.shape[:2] != (t_len, tokens.shape[1]):
            raise ValueError("behavior logits must be (T, K, n_actions)")
        for name, arr in (("observations", obs), ("steps", steps), ("tokens", tokens),
                          ("rewards", rewards), ("behavior_logits", logits),
                          ("values", values), ("step_versions", versions)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def t_len(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))


class TaskStats:
    """Sliding success windows per task; selection mass = failures + eps."""

    def __init__(self, num_tasks: int, window: int = 50, eps: float = 1.0) -> None:
        if num_tasks < 1:
            raise UnknownTaskError("num_tasks must be >= 1")
        if window < 1:
            raise ValueError("window must be >= 1")
        if eps <= 0:
            raise ValueError("eps must be > 0 (keeps every task reachable)")
        self.num_tasks = num_tasks
        self.window = window
        self.eps = eps
        self._outcomes: list[deque[bool]] = [deque(maxlen=window) for _ in range(num_tasks)]

    def _check(self, task_id: int) -> None:
        if not 0 <= task_id < self.num_tasks:
            raise UnknownTaskError(f"task_id {task_id} outside [0, {self.num_tasks})")

    def record_outcome(self, task_id: int, success: bool) -> None:
        self._check(task_id)
        self._outcomes[task_id].append(bool(success))

    def weights(self) -> np.ndarray:
        # recounted from window contents every call; no drift possible
        fails = [sum(1 for ok in w if not ok) for w in self._outcomes]
        return np.asarray(fails, dtype=np.float64) + self.eps

    def probabilities(self) -> np.ndarray:
        w = self.weights()
        return w / w.sum()

    def select_task(self, rng: np.random.Generator) -> int:
        p = self.probabilities()
        return int(np.searchsorted(np.cumsum(p), rng.random()))


class EpisodeBuffer:
    """Worker-local ring of frames from completed real episodes; imagination
    starting points are drawn uniformly from here."""

    def __init__(self, capacity: int = 256) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._frames: deque[Observation] = deque(maxlen=capacity)

    def add(self, frame: Observation) -> None:
        self._frames.append(frame)

    def sample(self, rng: np.random.Generator) -> Observation:
        if not self._frames:
            raise IndexError("episode buffer empty")
        return self._frames[int(rng.integers(0, len(self._frames)))]

    def __len__(self) -> int:
        return len(self._frames)


@dataclass(frozen=True)
class WorkerConfig:
    n_imagined_per_real: int = 0
    h_img: int = 8
    success_threshold: float = 0.9
    episode_deadline: float | None = None
    snap_observations: bool = True

    def __post_init__(self) -> None:
        if self.n_imagined_per_real < 0 or self.h_img < 1:
            raise ValueError("bad imagination settings")
        if not 0.0 < self.success_threshold <= 1.0:
            raise ValueError("success_threshold must be in (0, 1]")


class EpisodeAborted(Exception):
    """Internal signal: an inference deadline fired mid-episode."""


class RolloutWorker:
    def __init__(
        self,
        worker_id: int,
        suite: GridTaskSuite,
        service: InferenceService,
        main_buffer: ReplayBuffer | None,
        wm_buffer: ReplayBuffer | None,
        img_buffer: ReplayBuffer | None,
        episode_buffer: EpisodeBuffer,
        task_stats: TaskStats,
        cfg: WorkerConfig,
        run_seed: int,
        latency: LatencyModel | None = None,
        metrics: Any | None = None,
    ) -> None:
        self.worker_id = worker_id
        self.suite = suite
        self.service = service
        self.main_buffer = main_buffer
        self.wm_buffer = wm_buffer
        self.img_buffer = img_buffer
        self.episode_buffer = episode_buffer
        self.task_stats = task_stats
        self.cfg = cfg
        self.latency = latency
        self.metrics = metrics
        self.rng = np.random.default_rng(np.random.SeedSequence([run_seed, worker_id, 11]))
        self.episodes = 0
        self.env_steps = 0          # real decisions only
        self.imagined_steps = 0
        self.aborted = 0
        self.discarded_imagined = 0
        self.blocked_time = 0.0
        self.active_time = 0.0
        self._episode_index = 0

    # -- service access -------------------------------------------------------

    def _ask(self, kind: str, obs: Observation, chunk=None) -> Generator:
        """Request with the worker's episode deadline; aborts on timeout."""
        t0 = self.service.scheduler.now
        resp = yield from self.service.request(
            kind, obs, chunk, timeout=self.cfg.episode_deadline
        )
        self.blocked_time += self.service.scheduler.now - t0
        if resp is TIMEOUT:
            raise EpisodeAborted(f"{kind} response exceeded episode deadline")
        return resp

    # -- real episodes ----------------------------------------------------------

    def collect_real_episode(self, task_id: int) -> Generator:
        """Roll one episode; returns a Trajectory, or None when aborted.

        Aborted episodes are discarded whole: no partial trajectory is
        ever pushed, and no task outcome is recorded.
        """
        seed = int(self.rng.integers(0, 2**31 - 1))
        self._episode_index += 1
        state = self.suite.reset(task_id, seed)
        obs = state.observation()
        obs_vecs = [obs.vec]
        step_ids = [obs.step]
        tokens, rewards, logits, values, versions = [], [], [], [], []
        t_start = self.service.scheduler.now
        try:
            done = False
            succeeded = False
            while not done:
                resp = yield from self._ask(POLICY, obs)
                result = self.suite.step(state, resp.tokens, latency=self.latency)
                if result.wall_delay > 0:
                    yield Sleep(result.wall_delay)
                tokens.append(resp.tokens)
                logits.append(resp.logits)
                values.append(resp.value)
                versions.append(resp.version)
                rewards.append(result.reward)
                obs = result.obs
                obs_vecs.append(obs.vec)
                step_ids.append(obs.step)
                self.env_steps += 1
                done = result.done
                succeeded = state.succeeded
            tail = yield from self._ask(POLICY, obs)  # one extra value query
        except EpisodeAborted:
            self.aborted += 1
            if self.metrics is not None:
                self.metrics.emit("episode_abort", worker=self.worker_id, task=task_id)
            return None
        self.active_time += self.service.scheduler.now - t_start
        traj = Trajectory(
            task_id=task_id,
            source="real",
            observations=np.stack(obs_vecs),
            steps=np.asarray(step_ids),
            tokens=np.stack(tokens),
            rewards=np.asarray(rewards),
            behavior_logits=np.stack(logits),
            values=np.asarray(values),
            bootstrap_value=tail.value,
            done=succeeded,
            behavior_version=int(max(versions)),
            step_versions=np.asarray(versions),
        )
        return traj

    def deposit_real(self, traj: Trajectory) -> None:
        """Push to buffers, record the task outcome, stock imagination frames."""
        if self.main_buffer is not None:
            self.main_buffer.push(traj)
        if self.wm_buffer is not None:
            self.wm_buffer.push(traj)
        for i in range(traj.t_len):
            self.episode_buffer.add(
                Observation(traj.observations[i], int(traj.steps[i]), traj.task_id)
            )
        self.task_stats.record_outcome(traj.task_id, traj.episode_return > 0)
        self.episodes += 1
        if self.metrics is not None:
            self.metrics.emit(
                "episode", worker=self.worker_id, task=traj.task_id,
                ret=traj.episode_return, len=traj.t_len,
                behavior_version=traj.behavior_version,
            )

    # -- imagination ---------------------------------------------------------------

    def imagine_episode(self, start: Observation) -> Generator:
        """Dream up to h_img decisions from a stored real frame.

        Rewards are potential differences of predicted success probability,
        so their sum telescopes to p_final - p_initial exactly.  done-hat is
        set when the predicted probability crosses the success threshold.
        """
        cfg = self.cfg
        obs = start
        obs_vecs = [obs.vec]
        step_ids = [obs.step]
        tokens, rewards, logits, values, versions = [], [], [], [], []
        try:
            first = yield from self._ask(REWARD_MODEL, obs)
            p_cur = first.probability
            done_hat = False
            for _ in range(cfg.h_img):
                resp = yield from self._ask(POLICY, obs)
                pred = yield from self._ask(OBS_MODEL, obs, chunk=resp.tokens)
                next_vec = pred.next_obs
                if not np.all(np.isfinite(next_vec)):
                    self.discarded_imagined += 1
                    if self.metrics is not None:
                        self.metrics.emit("imagine_discard", worker=self.worker_id,
                                          reason="nonfinite_obs")
                    return None
                if cfg.snap_observations:
                    next_vec = self.suite.snap_observation(next_vec)
                nxt = Observation(next_vec, obs.step + 1, obs.task_id)
                after = yield from self._ask(REWARD_MODEL, nxt)
                p_next = after.probability
                if not np.isfinite(p_next):
                    self.discarded_imagined += 1
                    if self.metrics is not None:
                        self.metrics.emit("imagine_discard", worker=self.worker_id,
                                          reason="nonfinite_reward")
                    return None
                tokens.append(resp.tokens)
                logits.append(resp.logits)
                values.append(resp.value)
                versions.append(resp.version)
                rewards.append(p_next - p_cur)
                p_cur = p_next  # reuse as next step's potential: telescoping is exact
                obs = nxt
                obs_vecs.append(obs.vec)
                step_ids.append(obs.step)
                self.imagined_steps += 1
                if p_next >= cfg.success_threshold:
                    done_hat = True
                    break
            tail = yield from self._ask(POLICY, obs)
        except EpisodeAborted:
            self.aborted += 1
            return None
        return Trajectory(
            task_id=start.task_id,
            source="imagined",
            observations=np.stack(obs_vecs),
            steps=np.asarray(step_ids),
            tokens=np.stack(tokens),
            rewards=np.asarray(rewards),
            behavior_logits=np.stack(logits),
            values=np.asarray(values),
            bootstrap_value=tail.value,
            done=done_hat,
            behavior_version=int(max(versions)),
            step_versions=np.asarray(versions),
        )

    def _world_model_ready(self) -> bool:
        return (
            self.img_buffer is not None
            and len(self.episode_buffer) > 0
            and self.service.served_version(OBS_MODEL) is not None
            and self.service.served_version(REWARD_MODEL) is not None
        )

    # -- main loop -------------------------------------------------------------------

    def run(self, stop: Any) -> Generator:
        """Worker loop: select task, collect, then imagine; exits on stop.

        The stop flag is checked between episodes, so an in-flight episode
        always drains before the worker exits.
        """
        while not stop.is_set:
            task_id = self.task_stats.select_task(self.rng)
            traj = yield from self.collect_real_episode(task_id)
            if traj is None:
                continue
            self.deposit_real(traj)
            if self.cfg.n_imagined_per_real > 0 and self._world_model_ready():
                for _ in range(self.cfg.n_imagined_per_real):
                    if stop.is_set:
                        break
                    start = self.episode_buffer.sample(self.rng)
                    itraj = yield from self.imagine_episode(start)
                    if itraj is not None:
                        self.img_buffer.push(itraj)


# --------------------------------------------------------------------------
# Scripted collection (world-model pretraining data; never trains the policy).


def collect_scripted_episode(
    suite: GridTaskSuite,
    task_id: int,
    seed: int,
    rng: np.random.Generator,
    noise: float = 0.2,
) -> Trajectory:
    """Run the analytic solver with token noise; fills policy fields with
    neutral placeholders (uniform logits, zero values)."""
    cfg = suite.cfg
    state = suite.reset(task_id, seed)
    obs = state.observation()
    obs_vecs = [obs.vec]
    step_ids = [obs.step]
    tokens, rewards = [], []
    done = False
    while not done:
        chunk = scripted_chunk(suite, state, rng, noise=noise)
        result = suite.step(state, chunk)
        tokens.append(chunk)
        rewards.append(result.reward)
        obs = result.obs
        obs_vecs.append(obs.vec)
        step_ids.append(obs.step)
        done = result.done
    t_len = len(tokens)
    return Trajectory(
        task_id=task_id,
        source="real",
        observations=np.stack(obs_vecs),
        steps=np.asarray(step_ids),
        tokens=np.stack(tokens),
        rewards=np.asarray(rewards),
        behavior_logits=np.zeros((t_len, cfg.chunk_len, N_ACTIONS)),
        values=np.zeros(t_len),
        bootstrap_value=0.0,
        done=state.succeeded,
        behavior_version=0,
        step_versions=np.zeros(t_len, dtype=np.int64),
    )

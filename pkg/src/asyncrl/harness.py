"""End-to-end experiment orchestration.

Async topology (one cooperative scheduler, virtual or wall clock):

  workers --> inference service (dynamic-window batching) --> replies
     |                                    ^
     v                                    | weight publication
  replay buffers --> prefetcher --> cache --> trainer

A monitor task watches budgets and runs periodic greedy evaluation;
a closer task sequences the shutdown so every task drains cleanly.

The synchronous baseline replaces all of that with one coordinator:
every round spawns one episode per worker, waits at a barrier for the
slowest, then takes exactly one optimizer step on that round's episodes.
"""

from __future__ import annotations

import time
from typing import Any, Generator

import numpy as np

from .buffers import IMAGINED, MAIN, WORLD_MODEL, Prefetcher, ReplayBuffer
from .config import ExperimentConfig, config_hash
from .env import GridTaskSuite, LatencyModel, TaskSuiteConfig
from .inference import OBS_MODEL, POLICY, REWARD_MODEL, BatchWindowConfig, InferenceService
from .metrics import EvalPoint, MetricsStream, RunReport
from .models import (
    ModelBundle,
    ObsModel,
    ObsModelConfig,
    PolicyConfig,
    PolicyModel,
    RewardModel,
    ValueConfig,
    ValueHead,
)
from .rollout import EpisodeBuffer, RolloutWorker, TaskStats, WorkerConfig, collect_scripted_episode
from .runtime import Channel, Scheduler, Sleep, StopFlag, Wait
from .trainer import GaeConfig, LossConfig, Trainer, TrainerConfig

EVAL_SEED_BASE = 10_000


# --------------------------------------------------------------------------
# Builders.


def build_suite(cfg: ExperimentConfig) -> GridTaskSuite:
    env = cfg.env
    return GridTaskSuite(TaskSuiteConfig(
        height=env.height, width=env.width, num_tasks=env.num_tasks,
        horizon=env.horizon, chunk_len=env.chunk_len, kinds=tuple(env.kinds),
    ))


def build_latency(cfg: ExperimentConfig) -> LatencyModel:
    env = cfg.env
    if env.latency_kind == "constant":
        return LatencyModel(kind="constant", value=env.latency_value)
    if env.latency_kind == "lognormal":
        return LatencyModel(kind="lognormal", median=env.latency_median,
                            sigma=env.latency_sigma)
    return LatencyModel(kind="bimodal", fast=env.latency_fast,
                        slow=env.latency_slow, p_slow=env.latency_p_slow)


def worker_latency(cfg: ExperimentConfig, worker_id: int) -> LatencyModel:
    base = build_latency(cfg)
    scales = cfg.env.worker_latency_scales
    if scales:
        return base.scaled(float(scales[worker_id % len(scales)]))
    return base


def build_models(cfg: ExperimentConfig, seed: int, suite: GridTaskSuite) -> ModelBundle:
    m = cfg.model
    env = cfg.env
    obs_dim = suite.cfg.obs_dim
    n_steps = env.horizon + cfg.rollout.h_img + 1
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    policy = PolicyModel.init(rng, PolicyConfig(
        obs_dim=obs_dim, hidden_dim=m.hidden_dim, chunk_len=env.chunk_len,
        vocab_size=m.vocab_size, action_start=m.action_start,
        init_scale=m.init_scale,
    ))
    value = ValueHead.init(rng, ValueConfig(
        hidden_dim=m.hidden_dim, n_steps=n_steps, mlp_hidden=m.value_mlp_hidden,
        init_scale=m.init_scale,
    ))
    obs_model = ObsModel.init(rng, ObsModelConfig(
        obs_dim=obs_dim, chunk_len=env.chunk_len, hidden_dim=m.obs_model_hidden,
    ))
    reward_model = RewardModel.init(rng, obs_dim)
    return ModelBundle(policy, value, obs_model, reward_model)


def build_trainer_config(cfg: ExperimentConfig) -> TrainerConfig:
    s = cfg.settings
    t = cfg.train
    return TrainerConfig(
        gae=GaeConfig(gamma=t.gamma, lam=t.lam),
        loss=LossConfig(algorithm=s.algorithm, sigma=t.sigma, clip_eps=t.clip_eps,
                        lambda_v=t.lambda_v, lambda_h=t.lambda_h),
        lr=t.lr,
        k_shards=t.k_shards,
        revalue=s.revalue,
        world_model=s.world_model,
        t_obs=t.t_obs,
        t_reward=t.t_reward,
        wm_batch_episodes=t.wm_batch_episodes,
        train_service_time=t.train_service_time,
    )


def build_service(
    cfg: ExperimentConfig, sched: Scheduler, suite: GridTaskSuite,
    metrics: MetricsStream, keep_history: bool = False,
) -> InferenceService:
    s = cfg.service
    configs = {POLICY: BatchWindowConfig(s.batch_size, s.max_wait, s.service_time)}
    if cfg.settings.world_model:
        wm = BatchWindowConfig(s.wm_batch_size, s.wm_max_wait, s.wm_service_time)
        configs[OBS_MODEL] = wm
        configs[REWARD_MODEL] = wm
    return InferenceService(sched, configs, suite.cfg.obs_dim,
                            base_seed=s.base_seed, metrics=metrics,
                            keep_history=keep_history)


# --------------------------------------------------------------------------
# Greedy evaluation (direct rollouts: no service, no latency, off the clock).


def evaluate_policy(
    suite: GridTaskSuite, bundle: ModelBundle, episodes_per_task: int,
    seed_base: int = EVAL_SEED_BASE,
) -> tuple[float, tuple[float, ...]]:
    per_task = []
    for task_id in range(suite.cfg.num_tasks):
        total = 0.0
        for e in range(episodes_per_task):
            state = suite.reset(task_id, seed_base + e)
            done = False
            while not done:
                tokens = bundle.policy.greedy_chunk(state.observation().vec)
                result = suite.step(state, tokens)
                total += result.reward
                done = result.done
        per_task.append(total / episodes_per_task)
    return float(np.mean(per_task)), tuple(per_task)


# --------------------------------------------------------------------------
# World-model pretraining (scripted data; the policy never sees it).


def pretrain_world_model(
    cfg: ExperimentConfig, suite: GridTaskSuite, trainer: Trainer,
    wm_buffer: ReplayBuffer, seed: int,
) -> None:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 555]))
    n = cfg.run.wm_pretrain_episodes
    for i in range(n):
        task_id = i % suite.cfg.num_tasks
        ep_seed = int(rng.integers(0, 2**31 - 1))
        wm_buffer.push(collect_scripted_episode(suite, task_id, ep_seed, rng))
    for _ in range(cfg.run.wm_pretrain_rounds):
        trajs = wm_buffer.sample(cfg.train.wm_batch_episodes, rng)
        if trajs is None:
            break
        trainer.train_obs_model_step(trajs)
        trainer.train_reward_model_step(trajs)


# --------------------------------------------------------------------------
# Main experiment entry point.


def run_experiment(cfg: ExperimentConfig, seed: int) -> tuple[RunReport, MetricsStream]:
    if cfg.settings.synchronous:
        return _run_sync(cfg, seed)
    return _run_async(cfg, seed)


class ExperimentError(Exception):
    """A component panicked mid-run; partial metrics ride along."""

    def __init__(self, message: str, metrics: MetricsStream) -> None:
        super().__init__(message)
        self.metrics = metrics


def _budget_reached(cfg: ExperimentConfig, env_steps: int, updates: int, now: float) -> bool:
    # the env-step budget is always enforced (0 means an empty run);
    # update and clock budgets are optional extras (0 disables)
    run = cfg.run
    if env_steps >= run.max_env_steps:
        return True
    if run.max_updates and updates >= run.max_updates:
        return True
    if run.max_run_clock and now >= run.max_run_clock:
        return True
    return False


def _run_async(cfg: ExperimentConfig, seed: int) -> tuple[RunReport, MetricsStream]:
    settings = cfg.settings
    sched = Scheduler(real_time=not cfg.run.virtual_clock)
    metrics = MetricsStream(clock=lambda: sched.now,
                            config_hash=config_hash(cfg), seed=seed)
    suite = build_suite(cfg)
    bundle = build_models(cfg, seed, suite)
    service = build_service(cfg, sched, suite, metrics)

    main_buffer = ReplayBuffer(MAIN, cfg.run.main_capacity)
    wm_buffer = ReplayBuffer(WORLD_MODEL, cfg.run.wm_capacity) if settings.world_model else None
    img_buffer = ReplayBuffer(IMAGINED, cfg.run.img_capacity) if settings.world_model else None
    train_buffer = img_buffer if settings.world_model else main_buffer

    trainer = Trainer(bundle, build_trainer_config(cfg), service, metrics, seed)
    if settings.world_model:
        pretrain_world_model(cfg, suite, trainer, wm_buffer, seed)
    trainer.publish_initial()

    task_stats = TaskStats(suite.cfg.num_tasks, cfg.rollout.resample_window, cfg.rollout.resample_eps)
    worker_cfg = WorkerConfig(
        n_imagined_per_real=cfg.rollout.n_imagined_per_real if settings.world_model else 0,
        h_img=cfg.rollout.h_img,
        success_threshold=cfg.rollout.success_threshold,
        episode_deadline=cfg.rollout.episode_deadline,
        snap_observations=cfg.rollout.snap_observations,
    )
    workers = [
        RolloutWorker(
            worker_id=i, suite=suite, service=service,
            main_buffer=main_buffer, wm_buffer=wm_buffer, img_buffer=img_buffer,
            episode_buffer=EpisodeBuffer(cfg.rollout.episode_buffer_capacity),
            task_stats=task_stats, cfg=worker_cfg, run_seed=seed,
            latency=worker_latency(cfg, i), metrics=metrics,
        )
        for i in range(cfg.rollout.num_workers)
    ]

    cache = Channel("batch.cache", capacity=cfg.run.cache_capacity)
    prefetcher = Prefetcher(
        train_buffer, trainer.build_train_batch, cache,
        rng=np.random.default_rng(np.random.SeedSequence([seed, 21])),
        batch_episodes=cfg.train.batch_episodes,
        min_new_pushed=cfg.train.min_new_pushed,
        metrics=metrics,
    )

    stop = StopFlag()
    eval_points: list[EvalPoint] = []

    def env_steps_now() -> int:
        return sum(w.env_steps for w in workers)

    def run_eval() -> float:
        mean, per_task = evaluate_policy(suite, trainer.bundle,
                                         cfg.run.eval_episodes_per_task)
        point = EvalPoint(t=sched.now, env_steps=env_steps_now(),
                          updates=trainer.cycles, mean_return=mean,
                          per_task=per_task)
        eval_points.append(point)
        metrics.emit("eval", env_steps=point.env_steps, updates=point.updates,
                     mean_return=mean, per_task=list(per_task))
        return mean

    def monitor() -> Generator:
        last_eval_cycle = 0
        polls = 0
        while True:
            if _budget_reached(cfg, env_steps_now(), trainer.cycles, sched.now):
                break
            every = cfg.run.eval_every_updates
            if every and trainer.cycles - last_eval_cycle >= every:
                last_eval_cycle = trainer.cycles
                mean = run_eval()
                if cfg.run.eval_stop_threshold and mean >= cfg.run.eval_stop_threshold:
                    break
            yield Sleep(0.02)
            polls += 1
            if polls % 25 == 0 and sched.now > 0:
                steps = env_steps_now()
                metrics.emit("throughput", env_steps=steps,
                             episodes=sum(w.episodes for w in workers),
                             steps_per_second=steps / sched.now)
        stop.set()

    service.start()
    # monitor goes first so a zero budget stops workers before their first episode
    sched.spawn("monitor", monitor())
    worker_tasks = [sched.spawn(f"worker.{w.worker_id}", w.run(stop)) for w in workers]
    trainer_task = sched.spawn("trainer", trainer.run(cache, wm_buffer, stop))
    prefetch_task = sched.spawn("prefetcher", prefetcher.run(stop))

    def closer() -> Generator:
        for t in worker_tasks:
            yield Wait(t.done)
        service.shutdown()
        yield Wait(trainer_task.done)
        cache.close()
        yield Wait(prefetch_task.done)

    sched.spawn("closer", closer())

    wall_start = time.monotonic()
    try:
        sched.run()
    except BaseException as exc:
        metrics.emit("panic", error=repr(exc))
        raise ExperimentError(f"async run failed: {exc!r}", metrics) from exc
    wall_time = time.monotonic() - wall_start
    leftover = sched.alive_tasks()
    if leftover:
        raise ExperimentError(f"orphaned loops after shutdown: {leftover}", metrics)

    ran_anything = env_steps_now() > 0 or trainer.cycles > 0
    if ran_anything and cfg.run.eval_episodes_per_task > 0 and (
        not eval_points or eval_points[-1].updates != trainer.cycles
    ):
        run_eval()

    report = _build_report(cfg, seed, sched, metrics, workers, trainer, eval_points,
                           wall_time)
    report.extra["buffer_sizes"] = {
        b.kind: len(b) for b in (main_buffer, wm_buffer, img_buffer) if b is not None
    }
    report.extra["prefetch_built"] = prefetcher.built
    report.extra["prefetch_dropped"] = prefetcher.dropped
    report.extra["discarded_imagined"] = sum(w.discarded_imagined for w in workers)
    return report, metrics


def _run_sync(cfg: ExperimentConfig, seed: int) -> tuple[RunReport, MetricsStream]:
    """Barrier baseline: one optimizer step per full round of episodes."""
    sched = Scheduler(real_time=not cfg.run.virtual_clock)
    metrics = MetricsStream(clock=lambda: sched.now,
                            config_hash=config_hash(cfg), seed=seed)
    suite = build_suite(cfg)
    bundle = build_models(cfg, seed, suite)
    service = build_service(cfg, sched, suite, metrics)
    trainer = Trainer(bundle, build_trainer_config(cfg), service, metrics, seed)
    trainer.publish_initial()

    task_stats = TaskStats(suite.cfg.num_tasks, cfg.rollout.resample_window, cfg.rollout.resample_eps)
    worker_cfg = WorkerConfig(n_imagined_per_real=0,
                              episode_deadline=cfg.rollout.episode_deadline,
                              success_threshold=cfg.rollout.success_threshold)
    workers = [
        RolloutWorker(
            worker_id=i, suite=suite, service=service,
            main_buffer=None, wm_buffer=None, img_buffer=None,
            episode_buffer=EpisodeBuffer(cfg.rollout.episode_buffer_capacity),
            task_stats=task_stats, cfg=worker_cfg, run_seed=seed,
            latency=worker_latency(cfg, i), metrics=metrics,
        )
        for i in range(cfg.rollout.num_workers)
    ]
    eval_points: list[EvalPoint] = []

    def env_steps_now() -> int:
        return sum(w.env_steps for w in workers)

    def run_eval() -> float:
        mean, per_task = evaluate_policy(suite, trainer.bundle,
                                         cfg.run.eval_episodes_per_task)
        point = EvalPoint(t=sched.now, env_steps=env_steps_now(),
                          updates=trainer.cycles, mean_return=mean,
                          per_task=per_task)
        eval_points.append(point)
        metrics.emit("eval", env_steps=point.env_steps, updates=point.updates,
                     mean_return=mean, per_task=list(per_task))
        return mean

    def coordinator() -> Generator:
        last_eval_cycle = 0
        while not _budget_reached(cfg, env_steps_now(), trainer.cycles, sched.now):
            round_start = sched.now
            episode_tasks = [
                sched.spawn(
                    f"round.w{w.worker_id}",
                    w.collect_real_episode(task_stats.select_task(w.rng)),
                )
                for w in workers
            ]
            trajs = []
            for w, t in zip(workers, episode_tasks):
                traj = yield Wait(t.done)
                if traj is not None:
                    w.deposit_real(traj)
                    trajs.append(traj)
            round_time = sched.now - round_start
            metrics.emit("sync_round", round_time=round_time, episodes=len(trajs))
            if trajs:
                batch = trainer.build_train_batch(trajs)
                if batch is not None:
                    if cfg.train.train_service_time > 0:
                        yield Sleep(cfg.train.train_service_time)
                    trainer.train_step(batch)
            every = cfg.run.eval_every_updates
            if every and trainer.cycles - last_eval_cycle >= every:
                last_eval_cycle = trainer.cycles
                mean = run_eval()
                if cfg.run.eval_stop_threshold and mean >= cfg.run.eval_stop_threshold:
                    break
        service.shutdown()

    service.start()
    sched.spawn("coordinator", coordinator())
    wall_start = time.monotonic()
    try:
        sched.run()
    except BaseException as exc:
        metrics.emit("panic", error=repr(exc))
        raise ExperimentError(f"run aborted: {exc!r}", metrics) from exc
    wall_time = time.monotonic() - wall_start

    leftover = sched.alive_tasks()
    if leftover:
        raise ExperimentError(f"orphaned loops after run: {leftover}", metrics)

    ran_anything = env_steps_now() > 0 or trainer.cycles > 0
    if ran_anything and cfg.run.eval_episodes_per_task > 0 and (
        not eval_points or eval_points[-1].updates != trainer.cycles
    ):
        run_eval()

    report = _build_report(cfg, seed, sched, metrics, workers, trainer, eval_points,
                           wall_time)
    rounds = metrics.by_event("sync_round")
    report.extra["rounds"] = len(rounds)
    if rounds:
        report.extra["round_time_mean"] = float(np.mean([r["round_time"] for r in rounds]))
    return report, metrics


def _build_report(
    cfg: ExperimentConfig, seed: int, sched: Scheduler, metrics: MetricsStream,
    workers: list[RolloutWorker], trainer: Trainer, eval_points: list[EvalPoint],
    wall_time: float,
) -> RunReport:
    env_steps = sum(w.env_steps for w in workers)
    run_clock = sched.now
    report = RunReport(
        config_hash=metrics.config_hash,
        seed=seed,
        mode=cfg.mode,
        eval_points=list(eval_points),
        env_steps=env_steps,
        imagined_steps=sum(w.imagined_steps for w in workers),
        episodes=sum(w.episodes for w in workers),
        aborted_episodes=sum(w.aborted for w in workers),
        updates=trainer.cycles,
        skipped_updates=trainer.skipped,
        wall_time=wall_time,
        run_clock=run_clock,
        reached_threshold_at=None,
        decisions_per_second=env_steps / run_clock if run_clock > 0 else 0.0,
    )
    threshold = cfg.run.eval_stop_threshold
    if threshold:
        report.reached_threshold_at = report.steps_to_return(threshold)
    report.extra["obs_model_updates"] = trainer.obs_updates
    report.extra["reward_model_updates"] = trainer.reward_updates
    report.extra["final_version"] = trainer.publish_version
    return report

"""Shared factories: small suites, small model bundles, synthetic trajectories."""

from __future__ import annotations

from typing import Any, Generator

import numpy as np
import pytest

from asyncrl.env import GridTaskSuite, LatencyModel, TaskSuiteConfig
from asyncrl.models import (
    ModelBundle,
    ObsModel,
    ObsModelConfig,
    PolicyConfig,
    PolicyModel,
    RewardModel,
    ValueConfig,
    ValueHead,
)
from asyncrl.rollout import Trajectory
from asyncrl.runtime import Scheduler


def make_suite(
    height: int = 4,
    width: int = 4,
    num_tasks: int = 2,
    horizon: int = 12,
    chunk_len: int = 2,
    kinds: tuple[str, ...] = ("reach", "fetch"),
    latency: LatencyModel | None = None,
) -> GridTaskSuite:
    cfg = TaskSuiteConfig(
        height=height, width=width, num_tasks=num_tasks, horizon=horizon,
        chunk_len=chunk_len, kinds=kinds,
        latency=latency if latency is not None else LatencyModel(),
    )
    return GridTaskSuite(cfg)


def make_bundle(
    suite: GridTaskSuite,
    seed: int = 0,
    hidden_dim: int = 16,
    n_steps: int | None = None,
) -> ModelBundle:
    cfg = suite.cfg
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    pol_cfg = PolicyConfig(
        obs_dim=cfg.obs_dim, hidden_dim=hidden_dim, chunk_len=cfg.chunk_len,
        vocab_size=32, action_start=16,
    )
    val_cfg = ValueConfig(
        hidden_dim=hidden_dim,
        n_steps=n_steps if n_steps is not None else cfg.horizon + 16,
        mlp_hidden=8,
    )
    obs_cfg = ObsModelConfig(obs_dim=cfg.obs_dim, chunk_len=cfg.chunk_len,
                             hidden_dim=24)
    return ModelBundle(
        policy=PolicyModel.init(rng, pol_cfg),
        value=ValueHead.init(rng, val_cfg),
        obs_model=ObsModel.init(rng, obs_cfg),
        reward_model=RewardModel.init(rng, cfg.obs_dim, hidden_dim=12),
    )


def make_traj(
    rng: np.random.Generator,
    t_len: int = 3,
    chunk_len: int = 2,
    n_actions: int = 7,
    obs_dim: int = 6,
    source: str = "real",
    done: bool = False,
    task_id: int = 0,
    behavior_version: int = 0,
    rewards: np.ndarray | None = None,
) -> Trajectory:
    """Random but structurally valid trajectory."""
    versions = np.full(t_len, behavior_version, dtype=np.int64)
    return Trajectory(
        task_id=task_id,
        source=source,
        observations=rng.normal(size=(t_len + 1, obs_dim)),
        steps=np.arange(t_len + 1),
        tokens=rng.integers(0, n_actions, size=(t_len, chunk_len)),
        rewards=rewards if rewards is not None else rng.normal(size=t_len),
        behavior_logits=rng.normal(size=(t_len, chunk_len, n_actions)),
        values=rng.normal(size=t_len),
        bootstrap_value=float(rng.normal()),
        done=done,
        behavior_version=behavior_version,
        step_versions=versions,
    )


def run_tasks(*gens: Generator, until: float | None = None) -> list[Any]:
    """Drive generators to completion on a fresh virtual scheduler;
    returns their return values in spawn order."""
    sched = Scheduler()
    tasks = [sched.spawn(f"t{i}", g) for i, g in enumerate(gens)]
    sched.run(until=until)
    return [t.done.value for t in tasks]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)

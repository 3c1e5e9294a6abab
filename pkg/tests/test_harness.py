"""End-to-end runs: builders, greedy eval, budgets, determinism, and the CLI.

Every run here is seconds-scale on the virtual clock; the heavy learning
comparisons live in test_acceptance.py.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from asyncrl.buffers import WORLD_MODEL, ReplayBuffer
from asyncrl.cli import main as cli_main
from asyncrl.env import N_ACTIONS
from asyncrl.config import (
    ExperimentConfig,
    load_config,
    preset_learning,
    preset_smoke,
    preset_throughput,
    save_config,
)
from asyncrl.harness import (
    ExperimentError,
    build_latency,
    build_models,
    build_service,
    build_suite,
    build_trainer_config,
    evaluate_policy,
    pretrain_world_model,
    run_experiment,
    worker_latency,
)
from asyncrl.inference import OBS_MODEL, POLICY, REWARD_MODEL
from asyncrl.metrics import MetricsStream, RunReport
from asyncrl.runtime import Scheduler
from asyncrl.trainer import Trainer


def tiny_cfg(mode: str = "async", **run_changes: object) -> ExperimentConfig:
    """Smoke preset shrunk to a sub-second grid so each test run stays cheap."""
    cfg = preset_smoke().with_mode(mode)
    cfg = cfg.replace_section("env", height=4, width=4, horizon=8,
                              latency_value=0.001)
    cfg = cfg.replace_section("train", batch_episodes=4, wm_batch_episodes=4)
    run = dict(max_env_steps=250, max_updates=6, eval_every_updates=3,
               eval_episodes_per_task=2)
    run.update(run_changes)
    return cfg.replace_section("run", **run)


class PublisherStub:
    def __init__(self, kinds: tuple[str, ...]) -> None:
        self.configs = {k: None for k in kinds}
        self.published: list[tuple[str, int]] = []

    def update_weights(self, weights) -> None:
        self.published.append((weights.kind, weights.version))


# --------------------------------------------------------------------------
# Builders.


def test_build_latency_maps_each_kind() -> None:
    constant = build_latency(preset_smoke())
    assert constant.kind == "constant"
    assert constant.value == pytest.approx(0.002)

    lognormal = build_latency(preset_learning())
    assert lognormal.kind == "lognormal"
    assert lognormal.median == pytest.approx(0.002)
    assert lognormal.sigma == pytest.approx(0.5)

    bimodal = build_latency(preset_throughput())
    assert bimodal.kind == "bimodal"
    assert bimodal.fast == pytest.approx(0.002)
    assert bimodal.slow == pytest.approx(0.2)
    assert bimodal.p_slow == pytest.approx(0.1)


def test_worker_latency_cycles_the_scale_table() -> None:
    cfg = preset_smoke().replace_section("env", worker_latency_scales=(1.0, 3.0))
    assert worker_latency(cfg, 0).scale == pytest.approx(1.0)
    assert worker_latency(cfg, 1).scale == pytest.approx(3.0)
    assert worker_latency(cfg, 2).scale == pytest.approx(1.0)
    assert worker_latency(cfg, 5).scale == pytest.approx(3.0)
    # the base distribution is untouched, only the multiplier changes
    assert worker_latency(cfg, 1).kind == "constant"
    assert worker_latency(cfg, 1).value == pytest.approx(0.002)

    flat = preset_smoke().replace_section("env", worker_latency_scales=())
    assert worker_latency(flat, 3).scale == pytest.approx(1.0)


def test_build_models_step_table_covers_imagination_horizon() -> None:
    cfg = tiny_cfg()
    suite = build_suite(cfg)
    bundle = build_models(cfg, 0, suite)
    # imagined frames extend real step ids by h_img, so the step-embedding
    # table must have horizon + h_img + 1 rows
    assert bundle.value.cfg.n_steps == cfg.env.horizon + cfg.rollout.h_img + 1
    assert bundle.policy.cfg.n_actions == N_ACTIONS
    again = build_models(cfg, 0, suite)
    assert np.array_equal(bundle.policy.params.flatten(),
                          again.policy.params.flatten())
    other = build_models(cfg, 1, suite)
    assert not np.array_equal(bundle.policy.params.flatten(),
                              other.policy.params.flatten())


@pytest.mark.parametrize(
    ("mode", "algorithm", "revalue", "world_model"),
    [
        ("async", "trust", True, False),
        ("async_clip", "clip", True, False),
        ("async_no_revalue", "trust", False, False),
        ("async_wm", "trust", True, True),
        ("sync", "trust", True, False),
    ],
)
def test_build_trainer_config_follows_mode_settings(
    mode: str, algorithm: str, revalue: bool, world_model: bool
) -> None:
    cfg = preset_smoke().with_mode(mode)
    tc = build_trainer_config(cfg)
    assert tc.loss.algorithm == algorithm
    assert tc.revalue is revalue
    assert tc.world_model is world_model
    assert tc.lr == pytest.approx(cfg.train.lr)
    assert tc.k_shards == cfg.train.k_shards


def test_build_service_adds_world_model_windows_only_when_enabled() -> None:
    cfg = tiny_cfg()
    metrics = MetricsStream(clock=lambda: 0.0, config_hash="x", seed=0)
    service = build_service(cfg, Scheduler(), build_suite(cfg), metrics)
    assert set(service.configs) == {POLICY}

    wm_cfg = tiny_cfg("async_wm")
    wm_service = build_service(wm_cfg, Scheduler(), build_suite(wm_cfg), metrics)
    assert set(wm_service.configs) == {POLICY, OBS_MODEL, REWARD_MODEL}
    assert wm_service.configs[OBS_MODEL].batch_size == wm_cfg.service.wm_batch_size


# --------------------------------------------------------------------------
# Greedy evaluation and world-model pretraining.


def test_evaluate_policy_is_deterministic_and_bounded() -> None:
    cfg = tiny_cfg()
    suite = build_suite(cfg)
    bundle = build_models(cfg, 0, suite)
    mean1, per_task1 = evaluate_policy(suite, bundle, episodes_per_task=3)
    mean2, per_task2 = evaluate_policy(suite, bundle, episodes_per_task=3)
    assert mean1 == mean2
    assert per_task1 == per_task2
    assert len(per_task1) == suite.cfg.num_tasks
    assert 0.0 <= mean1 <= 1.0
    assert mean1 == pytest.approx(float(np.mean(per_task1)))


def test_pretrain_world_model_fills_buffer_and_runs_rounds() -> None:
    cfg = tiny_cfg("async_wm", wm_pretrain_episodes=6, wm_pretrain_rounds=2)
    suite = build_suite(cfg)
    bundle = build_models(cfg, 0, suite)
    metrics = MetricsStream(clock=lambda: 0.0, config_hash="x", seed=0)
    publisher = PublisherStub((POLICY, OBS_MODEL, REWARD_MODEL))
    trainer = Trainer(bundle, build_trainer_config(cfg), publisher, metrics, 0)
    wm_buffer = ReplayBuffer(WORLD_MODEL, 64)

    pretrain_world_model(cfg, suite, trainer, wm_buffer, seed=0)

    assert wm_buffer.stats().pushed == 6
    assert len(wm_buffer) == 6
    assert trainer.obs_updates == 2
    assert trainer.reward_updates == 2
    # scripted episodes either solve the task or run out the horizon
    rng = np.random.default_rng(0)
    for traj in wm_buffer.sample(6, rng):
        assert traj.source == "real"
        assert traj.done or traj.t_len == cfg.env.horizon


# --------------------------------------------------------------------------
# Full runs on the virtual clock.


@pytest.mark.parametrize("mode", ["async", "sync"])
def test_zero_budget_run_produces_an_empty_but_valid_report(mode: str) -> None:
    cfg = tiny_cfg(mode, max_env_steps=0, max_updates=0)
    report, metrics = run_experiment(cfg, seed=0)
    assert report.env_steps == 0
    assert report.updates == 0
    assert report.episodes == 0
    assert report.eval_points == []
    assert math.isnan(report.final_return)
    assert report.decisions_per_second == 0.0
    assert {"obs_model_updates", "reward_model_updates", "final_version"} <= set(report.extra)
    assert RunReport.from_dict(report.to_dict()).to_dict() == report.to_dict()
    assert metrics.records is not None


def test_async_run_is_deterministic_on_the_virtual_clock() -> None:
    cfg = tiny_cfg()
    report1, metrics1 = run_experiment(cfg, seed=5)
    report2, metrics2 = run_experiment(cfg, seed=5)

    d1, d2 = report1.to_dict(), report2.to_dict()
    d1.pop("wall_time"), d2.pop("wall_time")
    assert d1 == d2
    assert metrics1.records == metrics2.records

    assert report1.updates >= 1
    # whichever budget bound first, one of them did
    assert (report1.updates >= cfg.run.max_updates
            or report1.env_steps >= cfg.run.max_env_steps)
    assert report1.eval_points, "a finished run appends a final eval"
    assert report1.eval_points[-1].updates == report1.updates

    report3, _ = run_experiment(cfg, seed=6)
    d3 = report3.to_dict()
    d3.pop("wall_time")
    assert d3 != d1


def test_sync_run_enforces_the_round_barrier() -> None:
    cfg = tiny_cfg("sync", max_env_steps=150, max_updates=0)
    cfg = cfg.replace_section("rollout", num_workers=3)
    report, metrics = run_experiment(cfg, seed=2)

    rounds = report.extra["rounds"]
    assert rounds >= 1
    assert rounds == len(metrics.by_event("sync_round"))
    # every round collects exactly one episode per worker, none abort
    assert report.aborted_episodes == 0
    assert report.episodes == rounds * cfg.rollout.num_workers
    assert report.updates <= rounds
    assert report.extra["round_time_mean"] > 0.0
    assert report.eval_points[-1].updates == report.updates
    assert report.decisions_per_second == pytest.approx(
        report.env_steps / report.run_clock)


def test_async_budget_stops_on_updates() -> None:
    cfg = tiny_cfg(max_env_steps=1_000_000, max_updates=3)
    report, _ = run_experiment(cfg, seed=0)
    assert report.updates >= 3
    # the monitor polls between trainer cycles, so the overshoot stays small
    assert report.updates <= 10
    assert report.env_steps < 1_000_000


def test_async_budget_stops_on_run_clock() -> None:
    cfg = tiny_cfg(max_env_steps=1_000_000, max_updates=0, max_run_clock=0.3)
    report, _ = run_experiment(cfg, seed=0)
    assert 0.3 <= report.run_clock <= 1.3


def test_async_wm_run_reports_imagination_traffic() -> None:
    cfg = tiny_cfg("async_wm", max_env_steps=200, max_updates=4,
                   wm_pretrain_episodes=8, wm_pretrain_rounds=2)
    cfg = cfg.replace_section("rollout", n_imagined_per_real=1, h_img=4)
    report, _ = run_experiment(cfg, seed=1)

    assert report.imagined_steps > 0
    assert report.extra["obs_model_updates"] >= cfg.run.wm_pretrain_rounds
    assert report.extra["reward_model_updates"] >= cfg.run.wm_pretrain_rounds
    assert report.extra["discarded_imagined"] >= 0
    assert len(report.extra["buffer_sizes"]) == 3


def test_component_panic_carries_partial_metrics(monkeypatch: pytest.MonkeyPatch) -> None:
    def boom(*args: object, **kwargs: object) -> float:
        raise RuntimeError("eval exploded")

    monkeypatch.setattr("asyncrl.harness.evaluate_policy", boom)
    cfg = tiny_cfg(max_env_steps=1_000_000, max_updates=0,
                   eval_every_updates=1, eval_episodes_per_task=1)
    with pytest.raises(ExperimentError) as excinfo:
        run_experiment(cfg, seed=0)
    assert "eval exploded" in str(excinfo.value)
    partial = excinfo.value.metrics
    assert partial is not None
    panics = partial.by_event("panic")
    assert len(panics) == 1
    assert "eval exploded" in panics[0]["error"]


def test_sync_panic_is_wrapped_too(monkeypatch: pytest.MonkeyPatch) -> None:
    def boom(*args: object, **kwargs: object) -> float:
        raise RuntimeError("eval exploded")

    monkeypatch.setattr("asyncrl.harness.evaluate_policy", boom)
    cfg = tiny_cfg("sync", max_env_steps=1_000_000, max_updates=0,
                   eval_every_updates=1, eval_episodes_per_task=1)
    with pytest.raises(ExperimentError) as excinfo:
        run_experiment(cfg, seed=0)
    assert excinfo.value.metrics is not None


# --------------------------------------------------------------------------
# CLI.


def test_cli_run_writes_artifacts(tmp_path) -> None:
    out = tmp_path / "art"
    code = cli_main(["run", "--preset", "smoke", "--seed", "1",
                     "--env-steps", "0", "--updates", "0", "--out", str(out)])
    assert code == 0
    for name in ("config.yaml", "report.json", "curve.csv", "metrics.jsonl"):
        assert (out / name).exists()
    assert load_config(out / "config.yaml").run.max_env_steps == 0
    assert RunReport.read_json(out / "report.json").mode == "async"
    assert RunReport.read_curve_csv(out / "curve.csv") == []


def test_cli_run_writes_partial_metrics_on_failure(
    tmp_path, monkeypatch: pytest.MonkeyPatch
) -> None:
    def boom(*args: object, **kwargs: object) -> float:
        raise RuntimeError("eval exploded")

    monkeypatch.setattr("asyncrl.harness.evaluate_policy", boom)
    cfg_path = tmp_path / "cfg.yaml"
    save_config(tiny_cfg(max_env_steps=1_000_000, max_updates=0,
                         eval_every_updates=1, eval_episodes_per_task=1),
                cfg_path)
    out = tmp_path / "art"
    code = cli_main(["run", "--config", str(cfg_path), "--out", str(out)])
    assert code == 1
    assert (out / "metrics.jsonl").exists()
    assert not (out / "report.json").exists()


def test_cli_compare_and_scale_workers_smoke(tmp_path) -> None:
    out = tmp_path / "cmp"
    code = cli_main(["compare", "--env-steps", "0", "--updates", "0",
                     "--modes", "async,sync", "--seeds", "0", "--out", str(out)])
    assert code == 0
    assert (out / "compare.json").exists()
    assert (out / "async_s0" / "report.json").exists()
    assert (out / "sync_s0" / "report.json").exists()

    code = cli_main(["scale-workers", "--env-steps", "0", "--updates", "0",
                     "--counts", "1,2"])
    assert code == 0

"""Experiment configuration: typed sections, YAML round-trip, stable hash.

The `mode` field is a label that selects the algorithm switches (surrogate
kind, value recomputation, world model, synchronous barrier).  Everything
else lives in the sections, so two arms of an ablation share the same
mode-excluded hash and differ only in mode.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml


class ConfigSchemaError(Exception):
    pass


@dataclass(frozen=True)
class ModeSettings:
    algorithm: str          # trust | clip
    revalue: bool
    world_model: bool
    synchronous: bool


MODES: dict[str, ModeSettings] = {
    "async": ModeSettings("trust", True, False, False),
    "async_clip": ModeSettings("clip", True, False, False),
    "async_no_revalue": ModeSettings("trust", False, False, False),
    "async_wm": ModeSettings("trust", True, True, False),
    "sync": ModeSettings("trust", True, False, True),
}


@dataclass(frozen=True)
class EnvSection:
    height: int = 8
    width: int = 8
    num_tasks: int = 2
    horizon: int = 32
    chunk_len: int = 4
    kinds: tuple[str, ...] = ("reach", "fetch")
    latency_kind: str = "constant"       # constant | lognormal | bimodal
    latency_value: float = 0.002
    latency_median: float = 0.004
    latency_sigma: float = 0.5
    latency_fast: float = 0.002
    latency_slow: float = 0.2
    latency_p_slow: float = 0.1
    worker_latency_scales: tuple[float, ...] = ()   # empty: all workers at 1.0


@dataclass(frozen=True)
class ModelSection:
    hidden_dim: int = 64
    vocab_size: int = 32
    action_start: int = 16
    value_mlp_hidden: int = 32
    obs_model_hidden: int = 96
    init_scale: float = 0.1


@dataclass(frozen=True)
class ServiceSection:
    batch_size: int = 4
    max_wait: float = 0.002
    service_time: float = 0.001
    wm_batch_size: int = 4
    wm_max_wait: float = 0.002
    wm_service_time: float = 0.0005
    base_seed: int = 7


@dataclass(frozen=True)
class TrainSection:
    gamma: float = 0.99
    lam: float = 0.95
    sigma: float = 0.3
    clip_eps: float = 0.2
    lambda_v: float = 0.5
    lambda_h: float = 0.01
    lr: float = 3e-4
    k_shards: int = 4
    batch_episodes: int = 8
    min_new_pushed: int = 1
    t_obs: int = 4
    t_reward: int = 8
    wm_batch_episodes: int = 8
    train_service_time: float = 0.004


@dataclass(frozen=True)
class RolloutSection:
    num_workers: int = 4
    n_imagined_per_real: int = 2
    h_img: int = 8
    success_threshold: float = 0.9
    episode_deadline: float | None = None
    resample_window: int = 50
    resample_eps: float = 1.0
    episode_buffer_capacity: int = 256
    snap_observations: bool = True


@dataclass(frozen=True)
class RunSection:
    max_env_steps: int = 200_000
    max_updates: int = 0                 # 0: unlimited
    max_run_clock: float = 0.0           # seconds on the run clock; 0: unlimited
    eval_every_updates: int = 25
    eval_episodes_per_task: int = 20
    eval_stop_threshold: float = 0.9     # 0: never early-stop
    virtual_clock: bool = True
    wm_pretrain_episodes: int = 40
    wm_pretrain_rounds: int = 30
    main_capacity: int = 512
    wm_capacity: int = 2048
    img_capacity: int = 4096
    cache_capacity: int = 2


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "async"
    env: EnvSection = field(default_factory=EnvSection)
    model: ModelSection = field(default_factory=ModelSection)
    service: ServiceSection = field(default_factory=ServiceSection)
    train: TrainSection = field(default_factory=TrainSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigSchemaError(
                f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}"
            )

    @property
    def settings(self) -> ModeSettings:
        return MODES[self.mode]

    def with_mode(self, mode: str) -> "ExperimentConfig":
        return dataclasses.replace(self, mode=mode)

    def replace_section(self, name: str, **changes: Any) -> "ExperimentConfig":
        section = dataclasses.replace(getattr(self, name), **changes)
        return dataclasses.replace(self, **{name: section})


# --------------------------------------------------------------------------
# dict / YAML round-trip with unknown-key rejection.


def _to_plain(obj: Any) -> Any:
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(cls: type, data: Any, path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigSchemaError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigSchemaError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, val in data.items():
        f = known[name]
        sub = f"{path}.{name}" if path else name
        if isinstance(val, dict):
            # section given as mapping; resolve the dataclass type via the default
            default = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
            if default is None or not is_dataclass(default):
                raise ConfigSchemaError(f"{sub}: unexpected mapping")
            kwargs[name] = _from_plain(type(default), val, sub)
        elif isinstance(val, list):
            kwargs[name] = tuple(val)
        else:
            kwargs[name] = val
    return cls(**kwargs)


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    return _to_plain(cfg)


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    return _from_plain(ExperimentConfig, data, "")


def load_config(path: str | Path) -> ExperimentConfig:
    data = yaml.safe_load(Path(path).read_text())
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


def config_hash(cfg: ExperimentConfig, include_mode: bool = True) -> str:
    data = config_to_dict(cfg)
    if not include_mode:
        data.pop("mode", None)
    blob = json.dumps(data, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# --------------------------------------------------------------------------
# Presets.


def preset_smoke() -> ExperimentConfig:
    """Seconds-scale run for tests and CLI sanity checks."""
    cfg = ExperimentConfig()
    cfg = cfg.replace_section(
        "env", height=5, width=5, num_tasks=2, horizon=16,
        latency_kind="constant", latency_value=0.002,
    )
    cfg = cfg.replace_section("rollout", num_workers=2, n_imagined_per_real=0)
    cfg = cfg.replace_section(
        "run", max_env_steps=2_000, max_updates=40, eval_every_updates=10,
        eval_episodes_per_task=4, eval_stop_threshold=0.0, wm_pretrain_episodes=0,
    )
    return cfg


def preset_learning() -> ExperimentConfig:
    """Two-task 8x8 learning run; early-stops once greedy eval clears 0.9."""
    cfg = ExperimentConfig()
    cfg = cfg.replace_section(
        "env", latency_kind="lognormal", latency_median=0.002, latency_sigma=0.5,
    )
    cfg = cfg.replace_section("rollout", num_workers=4, n_imagined_per_real=0)
    cfg = cfg.replace_section(
        "run", max_env_steps=200_000, eval_every_updates=25,
        eval_stop_threshold=0.9, wm_pretrain_episodes=0,
    )
    return cfg


def preset_wm() -> ExperimentConfig:
    """Imagination-heavy arm: policy updates consume imagined rollouts."""
    cfg = preset_learning().with_mode("async_wm")
    cfg = cfg.replace_section("rollout", n_imagined_per_real=2)
    cfg = cfg.replace_section("run", wm_pretrain_episodes=40)
    return cfg


def preset_throughput() -> ExperimentConfig:
    """Straggler-dominated latency for async-vs-sync timing comparisons."""
    cfg = ExperimentConfig()
    cfg = cfg.replace_section(
        "env", latency_kind="bimodal", latency_fast=0.002, latency_slow=0.2,
        latency_p_slow=0.1,
    )
    cfg = cfg.replace_section("rollout", num_workers=8, n_imagined_per_real=0)
    cfg = cfg.replace_section(
        "run", max_env_steps=6_000, max_updates=0, eval_every_updates=0,
        eval_stop_threshold=0.0, wm_pretrain_episodes=0,
    )
    return cfg


PRESETS = {
    "smoke": preset_smoke,
    "learning": preset_learning,
    "wm": preset_wm,
    "throughput": preset_throughput,
}


def get_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigSchemaError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return PRESETS[name]()

"""Desk-scale asynchronous RL: decoupled rollout, batched inference,
staleness-corrected optimization, and plug-in imagination, all on one
deterministic cooperative scheduler."""

from .buffers import IMAGINED, MAIN, WORLD_MODEL, Prefetcher, ReplayBuffer, TrainBatch
from .config import (
    MODES,
    PRESETS,
    ExperimentConfig,
    config_hash,
    get_preset,
    load_config,
    save_config,
)
from .env import GridTaskSuite, LatencyModel, Observation, TaskSuiteConfig
from .harness import evaluate_policy, run_experiment
from .inference import (
    OBS_MODEL,
    POLICY,
    REWARD_MODEL,
    BatchWindowConfig,
    InferenceService,
    VersionedWeights,
)
from .metrics import EvalPoint, MetricsStream, RunReport
from .models import ModelBundle, PolicyConfig, PolicyModel, ValueConfig, ValueHead
from .rollout import EpisodeBuffer, RolloutWorker, TaskStats, Trajectory, WorkerConfig
from .runtime import Channel, Scheduler, StopFlag
from .trainer import (
    GaeConfig,
    LossConfig,
    Trainer,
    TrainerConfig,
    compute_gae,
    global_normalize,
    policy_surrogate,
    trust_weight,
)

__version__ = "0.1.0"

__all__ = [
    "IMAGINED", "MAIN", "WORLD_MODEL", "Prefetcher", "ReplayBuffer", "TrainBatch",
    "MODES", "PRESETS", "ExperimentConfig", "config_hash", "get_preset",
    "load_config", "save_config",
    "GridTaskSuite", "LatencyModel", "Observation", "TaskSuiteConfig",
    "evaluate_policy", "run_experiment",
    "OBS_MODEL", "POLICY", "REWARD_MODEL", "BatchWindowConfig",
    "InferenceService", "VersionedWeights",
    "EvalPoint", "MetricsStream", "RunReport",
    "ModelBundle", "PolicyConfig", "PolicyModel", "ValueConfig", "ValueHead",
    "EpisodeBuffer", "RolloutWorker", "TaskStats", "Trajectory", "WorkerConfig",
    "Channel", "Scheduler", "StopFlag",
    "GaeConfig", "LossConfig", "Trainer", "TrainerConfig",
    "compute_gae", "global_normalize", "policy_surrogate", "trust_weight",
    "__version__",
]

"""Structured metrics: an in-memory event stream plus file round-trips.

Every record carries the event name, a timestamp from the run's clock
(virtual or wall), the config hash, the seed, and a schema version, so
curves written by different runs can be compared without guessing.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

SCHEMA_VERSION = 1


class MetricsError(Exception):
    pass


class MetricsStream:
    def __init__(
        self,
        clock: Callable[[], float] | None = None,
        config_hash: str = "",
        seed: int = 0,
    ) -> None:
        self._clock = clock if clock is not None else time.monotonic
        self.config_hash = config_hash
        self.seed = seed
        self.records: list[dict[str, Any]] = []

    def emit(self, event: str, **fields: Any) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "event": event,
            "t": float(self._clock()),
            "config_hash": self.config_hash,
            "seed": self.seed,
            "schema_version": SCHEMA_VERSION,
        }
        for key, val in fields.items():
            if key in rec:
                raise MetricsError(f"field {key!r} collides with envelope")
            rec[key] = _plain(val)
        self.records.append(rec)
        return rec

    def by_event(self, event: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r["event"] == event]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
        out = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(json.loads(line))
        return out


def _plain(val: Any) -> Any:
    """Coerce numpy scalars/arrays so records stay json-serializable."""
    if isinstance(val, (np.floating, np.integer)):
        return val.item()
    if isinstance(val, np.ndarray):
        return val.tolist()
    if isinstance(val, (list, tuple)):
        return [_plain(v) for v in val]
    if isinstance(val, dict):
        return {k: _plain(v) for k, v in val.items()}
    return val


# --------------------------------------------------------------------------
# Run-level summary and learning curves.


@dataclass(frozen=True)
class EvalPoint:
    t: float
    env_steps: int
    updates: int
    mean_return: float
    per_task: tuple[float, ...]


@dataclass
class RunReport:
    config_hash: str = ""
    seed: int = 0
    mode: str = ""
    eval_points: list[EvalPoint] = field(default_factory=list)
    env_steps: int = 0
    imagined_steps: int = 0
    episodes: int = 0
    aborted_episodes: int = 0
    updates: int = 0
    skipped_updates: int = 0
    wall_time: float = 0.0
    run_clock: float = 0.0
    reached_threshold_at: int | None = None
    decisions_per_second: float = 0.0
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def final_return(self) -> float:
        if not self.eval_points:
            return float("nan")
        return self.eval_points[-1].mean_return

    def best_return(self) -> float:
        if not self.eval_points:
            return float("nan")
        return max(p.mean_return for p in self.eval_points)

    def steps_to_return(self, threshold: float) -> int | None:
        """First env-step count whose evaluation reached the threshold."""
        for p in self.eval_points:
            if p.mean_return >= threshold:
                return p.env_steps
        return None

    def to_dict(self) -> dict[str, Any]:
        d = {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "mode": self.mode,
            "env_steps": self.env_steps,
            "imagined_steps": self.imagined_steps,
            "episodes": self.episodes,
            "aborted_episodes": self.aborted_episodes,
            "updates": self.updates,
            "skipped_updates": self.skipped_updates,
            "wall_time": self.wall_time,
            "run_clock": self.run_clock,
            "reached_threshold_at": self.reached_threshold_at,
            "decisions_per_second": self.decisions_per_second,
            "extra": _plain(self.extra),
            "eval_points": [
                {
                    "t": p.t,
                    "env_steps": p.env_steps,
                    "updates": p.updates,
                    "mean_return": p.mean_return,
                    "per_task": list(p.per_task),
                }
                for p in self.eval_points
            ],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunReport":
        points = [
            EvalPoint(
                t=float(p["t"]),
                env_steps=int(p["env_steps"]),
                updates=int(p["updates"]),
                mean_return=float(p["mean_return"]),
                per_task=tuple(float(x) for x in p["per_task"]),
            )
            for p in d.get("eval_points", [])
        ]
        return cls(
            config_hash=d.get("config_hash", ""),
            seed=int(d.get("seed", 0)),
            mode=d.get("mode", ""),
            eval_points=points,
            env_steps=int(d.get("env_steps", 0)),
            imagined_steps=int(d.get("imagined_steps", 0)),
            episodes=int(d.get("episodes", 0)),
            aborted_episodes=int(d.get("aborted_episodes", 0)),
            updates=int(d.get("updates", 0)),
            skipped_updates=int(d.get("skipped_updates", 0)),
            wall_time=float(d.get("wall_time", 0.0)),
            run_clock=float(d.get("run_clock", 0.0)),
            reached_threshold_at=d.get("reached_threshold_at"),
            decisions_per_second=float(d.get("decisions_per_second", 0.0)),
            extra=d.get("extra", {}),
        )

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def read_json(cls, path: str | Path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_curve_csv(self, path: str | Path) -> None:
        n_tasks = len(self.eval_points[0].per_task) if self.eval_points else 0
        header = ["t", "env_steps", "updates", "mean_return"] + [
            f"task_{i}" for i in range(n_tasks)
        ]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for p in self.eval_points:
                writer.writerow(
                    [f"{p.t:.6f}", p.env_steps, p.updates, f"{p.mean_return:.6f}"]
                    + [f"{x:.6f}" for x in p.per_task]
                )

    @staticmethod
    def read_curve_csv(path: str | Path) -> list[EvalPoint]:
        points = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise MetricsError(f"empty curve file: {path}")
            task_cols = [c for c in reader.fieldnames if c.startswith("task_")]
            for row in reader:
                points.append(
                    EvalPoint(
                        t=float(row["t"]),
                        env_steps=int(row["env_steps"]),
                        updates=int(row["updates"]),
                        mean_return=float(row["mean_return"]),
                        per_task=tuple(float(row[c]) for c in task_cols),
                    )
                )
        return points

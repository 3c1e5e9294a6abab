"""Command-line entry points.

  asyncrl run            one experiment, artifacts to --out
  asyncrl compare        same config under several modes (ablations)
  asyncrl scale-workers  throughput scan over worker counts
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from .config import (
    MODES,
    PRESETS,
    ExperimentConfig,
    get_preset,
    load_config,
    save_config,
)
from .harness import ExperimentError, run_experiment
from .metrics import RunReport


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="smoke")
    p.add_argument("--config", type=Path, default=None,
                   help="YAML config; overrides --preset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="artifact directory")
    p.add_argument("--real-clock", action="store_true",
                   help="run on the wall clock instead of the virtual clock")
    p.add_argument("--env-steps", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--updates", type=int, default=None)


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else get_preset(args.preset)
    if args.real_clock:
        cfg = cfg.replace_section("run", virtual_clock=False)
    if args.env_steps is not None:
        cfg = cfg.replace_section("run", max_env_steps=args.env_steps)
    if args.updates is not None:
        cfg = cfg.replace_section("run", max_updates=args.updates)
    if args.workers is not None:
        cfg = cfg.replace_section("rollout", num_workers=args.workers)
    return cfg


def _summary_line(report: RunReport) -> str:
    reach = (f"reached@{report.reached_threshold_at}"
             if report.reached_threshold_at is not None else "not-reached")
    return (
        f"mode={report.mode} seed={report.seed} return={report.final_return:.3f} "
        f"env_steps={report.env_steps} imagined={report.imagined_steps} "
        f"updates={report.updates} clock={report.run_clock:.1f}s "
        f"rate={report.decisions_per_second:.0f}/s {reach}"
    )


def _write_artifacts(out: Path, cfg: ExperimentConfig, report, metrics) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    report.write_json(out / "report.json")
    report.write_curve_csv(out / "curve.csv")
    metrics.write_jsonl(out / "metrics.jsonl")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if args.mode:
        cfg = cfg.with_mode(args.mode)
    try:
        report, metrics = run_experiment(cfg, args.seed)
    except ExperimentError as exc:
        # Abort the run but keep whatever telemetry the components managed
        # to flush before the failure.
        print(f"run failed: {exc}")
        if args.out and exc.metrics is not None:
            args.out.mkdir(parents=True, exist_ok=True)
            exc.metrics.write_jsonl(args.out / "metrics.jsonl")
            print(f"partial metrics written to {args.out / 'metrics.jsonl'}")
        return 1
    print(_summary_line(report))
    if args.out:
        _write_artifacts(args.out, cfg, report, metrics)
        print(f"artifacts written to {args.out}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _load(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = {}
    for mode in args.modes.split(","):
        arm = cfg.with_mode(mode.strip())
        reports = []
        for seed in seeds:
            report, metrics = run_experiment(arm, seed)
            print(_summary_line(report))
            if args.out:
                _write_artifacts(args.out / f"{mode}_s{seed}", arm, report, metrics)
            reports.append(report)
        rows[mode] = reports
    print("\narm summaries (mean over seeds):")
    for mode, reports in rows.items():
        final = sum(r.final_return for r in reports) / len(reports)
        steps = [r.reached_threshold_at for r in reports]
        reached = [s for s in steps if s is not None]
        msg = (f"  {mode}: return={final:.3f} "
               f"reached {len(reached)}/{len(steps)} seeds")
        if reached:
            msg += f", median steps {sorted(reached)[len(reached) // 2]}"
        print(msg)
    if args.out:
        summary = {
            mode: [r.to_dict() for r in reports] for mode, reports in rows.items()
        }
        (args.out / "compare.json").write_text(json.dumps(summary, indent=2))
    return 0


def cmd_scale_workers(args: argparse.Namespace) -> int:
    cfg = _load(args)
    counts = [int(c) for c in args.counts.split(",")]
    print(f"{'workers':>8} {'mode':>6} {'decisions/s':>12} {'clock':>8}")
    for count in counts:
        arm = cfg.replace_section("rollout", num_workers=count)
        modes = ["async", "sync"] if args.with_sync else ["async"]
        for mode in modes:
            report, _ = run_experiment(arm.with_mode(mode), args.seed)
            print(f"{count:>8} {mode:>6} {report.decisions_per_second:>12.1f} "
                  f"{report.run_clock:>7.1f}s")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="asyncrl")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_common(p_run)
    p_run.add_argument("--mode", choices=sorted(MODES), default=None)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run the same config under several modes")
    _add_common(p_cmp)
    p_cmp.add_argument("--modes", default="async,async_no_revalue",
                       help="comma-separated mode list")
    p_cmp.add_argument("--seeds", default="0", help="comma-separated seed list")
    p_cmp.set_defaults(func=cmd_compare)

    p_scale = sub.add_parser("scale-workers", help="throughput over worker counts")
    _add_common(p_scale)
    p_scale.add_argument("--counts", default="1,2,4,8")
    p_scale.add_argument("--with-sync", action="store_true",
                         help="also time the synchronous barrier baseline")
    p_scale.set_defaults(func=cmd_scale_workers)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())

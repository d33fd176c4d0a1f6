"""Command line entry point.

    dropsim run --config cluster.ini --out results/ [--seed N]
                [--policy kunserve|recompute|swap|migrate] [--no-figures]

writes report.csv, events.log, timeline.csv, and the figures into the
output directory.  Exit code 2 flags a config error and names the field.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import metrics, plots, traceio
from .config import POLICIES, ConfigError, SimConfig, load_config, validate
from .engine import run_sim


def _build_trace(cfg: SimConfig, seed: int) -> list[traceio.TraceRecord]:
    tc = cfg.trace
    if tc.source == "file":
        records = traceio.load_trace(tc.path)
        if tc.rescale_factor != 1.0:
            records = traceio.rescale(records, tc.rescale_factor, seed=seed)
        return records
    return traceio.synth_burst(
        tc.duration_s, tc.base_rps, tc.burst_rps, tc.burst_start_s,
        tc.burst_end_s, tc.input_mean, tc.output_mean,
        length_dist=tc.length_dist, sigma=tc.sigma, seed=seed)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
        if args.policy is not None:
            if args.policy not in POLICIES:
                raise ConfigError("policy.kind", f"unknown policy {args.policy!r}")
            cfg.policy.kind = args.policy
        validate(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        return 2

    seed = args.seed if args.seed is not None else cfg.trace.seed
    os.makedirs(args.out, exist_ok=True)
    trace = _build_trace(cfg, seed)
    result = run_sim(cfg, trace, seed=seed)

    log_path = os.path.join(args.out, "events.log")
    with open(log_path, "w", newline="\n") as fh:
        for line in result.log_lines:
            fh.write(line + "\n")

    stats = metrics.collect(result.log_lines)
    stats.drop_events = result.drop_events
    row = metrics.report_row(cfg.policy.kind, stats)
    metrics.write_report(os.path.join(args.out, "report.csv"), [row])
    tl = metrics.timeline_rows(result.log_lines, cfg.report.window_s)
    metrics.write_timeline(os.path.join(args.out, "timeline.csv"), tl)

    if cfg.report.figures and not args.no_figures:
        plots.plot_timeline(tl, os.path.join(args.out, "timeline.png"),
                            title=f"{cfg.policy.kind} seed={seed}")
        plots.plot_latency_cdfs({cfg.policy.kind: stats},
                                os.path.join(args.out, "latency.png"))

    print(f"{cfg.policy.kind}: {row['finished']}/{row['requests']} finished, "
          f"p99 TTFT {row['p99_ttft_s'] or 'n/a'} s, "
          f"p50 TPOT {row['p50_tpot_s'] or 'n/a'} s")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
        validate(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    seed = args.seed if args.seed is not None else cfg.trace.seed
    os.makedirs(args.out, exist_ok=True)
    trace = _build_trace(cfg, seed)
    rows = []
    stats_by_policy = {}
    for policy in args.policies:
        if policy not in POLICIES:
            print(f"config error: policy.kind: unknown policy {policy!r}",
                  file=sys.stderr)
            return 2
        result = run_sim(cfg, trace, policy=policy, seed=seed)
        with open(os.path.join(args.out, f"events_{policy}.log"), "w",
                  newline="\n") as fh:
            for line in result.log_lines:
                fh.write(line + "\n")
        stats = metrics.collect(result.log_lines)
        stats.drop_events = result.drop_events
        stats_by_policy[policy] = stats
        rows.append(metrics.report_row(policy, stats))
    metrics.write_report(os.path.join(args.out, "report.csv"), rows)
    if cfg.report.figures and not args.no_figures:
        plots.plot_latency_cdfs(stats_by_policy,
                                os.path.join(args.out, "latency.png"))
    for row in rows:
        print(f"{row['policy']}: p99 TTFT {row['p99_ttft_s'] or 'n/a'} s, "
              f"p50 TPOT {row['p50_tpot_s'] or 'n/a'} s, "
              f"evictions {row['evictions']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dropsim")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="simulate one policy")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--out", required=True)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--policy", default=None,
                       help="|".join(POLICIES))
    run_p.add_argument("--no-figures", action="store_true")
    run_p.set_defaults(func=cmd_run)

    cmp_p = sub.add_parser("compare", help="same trace under several policies")
    cmp_p.add_argument("--config", required=True)
    cmp_p.add_argument("--out", required=True)
    cmp_p.add_argument("--seed", type=int, default=None)
    cmp_p.add_argument("--policies", nargs="+", default=list(POLICIES))
    cmp_p.add_argument("--no-figures", action="store_true")
    cmp_p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``kvlab`` or ``python3 -m kvlab``."""

from __future__ import annotations

import argparse
import sys

from kvlab.harness import BENCHMARK_WORKLOAD, ConfigError, ExperimentConfig, run_experiment, threads_from_env
from kvlab.policy import POLICY_KINDS, PolicyConfig
from kvlab.simulate import DEFAULT_HORIZON

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    w = BENCHMARK_WORKLOAD
    p = _Parser(prog="kvlab", description="Simulate KV cache compression policies against an uncompressed oracle.")
    g = p.add_argument_group("stream")
    g.add_argument("--dim", type=int, default=w["dim"])
    g.add_argument("--prefill-len", type=int, default=w["prefill_len"])
    g.add_argument("--decode-len", type=int, default=w["decode_len"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scale", type=float, default=w["scale"])
    g.add_argument("--dup-frac", type=float, default=w["dup_frac"])
    g.add_argument("--dup-noise", type=float, default=w["dup_noise"])
    g.add_argument("--query-corr", type=float, default=w["query_corr"], help="lag-one query correlation")
    g.add_argument("--salience", type=float, default=w["salience"], help="heavy-tailed key salience")
    g.add_argument("--query-align", type=float, default=w["query_align"], help="query pull toward salient keys")
    g.add_argument("--trace-in", help="replay a trace file instead of generating a stream")
    g.add_argument("--trace-out", help="save the stream as a trace file")

    g = p.add_argument_group("policy")
    g.add_argument("--policy", action="append", choices=POLICY_KINDS, help="repeatable; default keepkv")
    g.add_argument("--budget-ratio", type=float, default=0.2)
    g.add_argument("--sink-count", type=int, default=4)
    g.add_argument("--threshold", type=float, default=0.8)
    g.add_argument("--alpha", type=float, default=0.9)
    g.add_argument("--window", type=int, default=8)
    g.add_argument("--sigma", type=float, default=1.0)

    g = p.add_argument_group("output")
    g.add_argument("--audit-horizon", type=int, default=DEFAULT_HORIZON)
    g.add_argument("--report-out", help="report path; CSV also writes <stem>.summary.csv")
    g.add_argument("--format", choices=("csv", "json"), default="csv")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    try:
        policies = [
            PolicyConfig(
                policy_kind=kind,
                budget_ratio=args.budget_ratio,
                sink_count=args.sink_count,
                threshold_T=args.threshold,
                alpha=args.alpha,
                window_w=args.window,
                gaussian_sigma=args.sigma,
                seed=args.seed,
            )
            for kind in (args.policy or ["keepkv"])
        ]
        return ExperimentConfig(
            policies=policies,
            dim=args.dim,
            prefill_len=args.prefill_len,
            decode_len=args.decode_len,
            seed=args.seed,
            scale=args.scale,
            dup_frac=args.dup_frac,
            dup_noise=args.dup_noise,
            query_corr=args.query_corr,
            salience=args.salience,
            query_align=args.query_align,
            audit_horizon=args.audit_horizon,
            report_path=args.report_out,
            report_format=args.format,
            trace_in=args.trace_in,
            trace_out=args.trace_out,
            threads=threads_from_env(),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _print_summary(result) -> None:
    for label, run, budget in zip(result.labels, result.outcomes, result.budgets):
        errs = [o.relative_error for o in run]
        mean = sum(errs) / len(errs) if errs else 0.0
        print(f"{label:16s} budget={budget if budget is not None else '-':>5} mean_relative_error={mean:.6g}")


def main(argv=None) -> int:
    try:
        cfg = config_from_args(build_parser().parse_args(argv))
    except ConfigError as exc:
        print(f"kvlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(cfg)
    except ConfigError as exc:
        print(f"kvlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"kvlab: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _print_summary(result)
    return EXIT_OK

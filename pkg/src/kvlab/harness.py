"""Experiment configuration, execution and report files."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kvlab.analysis import StepOutcome
from kvlab.policy import InfeasibleBudgetError, PolicyConfig
from kvlab.simulate import DEFAULT_HORIZON, run_comparison
from kvlab.stream import Stream, generate_stream, load_trace, save_trace

REPORT_COLUMNS = (
    "step",
    "policy",
    "cache_size",
    "entry_count",
    "vote_sum",
    "perturbation_l2",
    "relative_error",
    "epsilon",
    "gamma",
    "bound",
    "bound_holds",
    "event_type",
)
SUMMARY_COLUMNS = (
    "policy",
    "steps",
    "budget",
    "max_cache_size",
    "max_entry_count",
    "mean_relative_error",
    "max_relative_error",
    "merges",
    "evictions",
    "audited_pairs",
    "bounded_pairs",
    "bound_violations",
)

# Workload of the standard comparison: persistent, heavy-tailed attention
# with 20% repeated tokens.
BENCHMARK_WORKLOAD = dict(
    dim=64,
    prefill_len=512,
    decode_len=256,
    scale=8.0,
    dup_frac=0.2,
    dup_noise=1e-3,
    query_corr=0.95,
    salience=0.2,
    query_align=0.8,
)
BENCHMARK_SEEDS = tuple(range(20))


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    policies: list[PolicyConfig]
    dim: int = 64
    prefill_len: int = 512
    decode_len: int = 256
    seed: int = 0
    scale: float = 8.0
    dup_frac: float = 0.2
    dup_noise: float = 1e-3
    query_corr: float = 0.0
    salience: float = 0.0
    query_align: float = 0.0
    audit_horizon: int = DEFAULT_HORIZON
    report_path: str | None = None
    report_format: str = "csv"
    trace_in: str | None = None
    trace_out: str | None = None
    threads: int | None = None

    def __post_init__(self):
        if not self.policies:
            raise ConfigError("at least one policy is required")
        if self.dim < 1 or self.prefill_len < 1 or self.decode_len < 0:
            raise ConfigError("need dim >= 1, prefill length >= 1 and decode length >= 0")
        if self.audit_horizon < 0:
            raise ConfigError("audit horizon must be non-negative")
        if self.report_format not in ("csv", "json"):
            raise ConfigError(f"unknown report format {self.report_format!r}")

    def stream(self) -> Stream:
        if self.trace_in is not None:
            return load_trace(self.trace_in)
        try:
            return generate_stream(
                self.dim,
                self.prefill_len,
                self.decode_len,
                self.seed,
                scale=self.scale,
                dup_frac=self.dup_frac,
                dup_noise=self.dup_noise,
                query_corr=self.query_corr,
                salience=self.salience,
                query_align=self.query_align,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class ExperimentResult:
    labels: list[str]
    outcomes: list[list[StepOutcome]]
    budgets: list[int | None]
    status: str = "ok"
    files: list[Path] = field(default_factory=list)


def policy_labels(policies: list[PolicyConfig]) -> list[str]:
    kinds = [p.policy_kind for p in policies]
    return [k if kinds.count(k) == 1 else f"{k}#{i}" for i, k in enumerate(kinds)]


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def _worst_audit(records):
    bounded = [r for r in records if r.bound is not None]
    if bounded:
        worst = max(bounded, key=lambda r: r.theta / r.bound if r.bound > 0 else np.inf)
        return worst.epsilon, worst.gamma, worst.bound, all(r.bound_holds for r in bounded)
    if records:
        worst = max(records, key=lambda r: r.epsilon)
        return worst.epsilon, worst.gamma, None, None
    return None, None, None, None


def report_rows(labels, outcomes) -> list[dict]:
    """One row per (policy, step), policies in configuration order."""
    rows = []
    for label, run in zip(labels, outcomes):
        for o in run:
            eps, gamma, bound, holds = _worst_audit(o.audits)
            rows.append(
                {
                    "step": o.step,
                    "policy": label,
                    "cache_size": o.cache_size,
                    "entry_count": o.entry_count,
                    "vote_sum": o.vote_sum,
                    "perturbation_l2": o.perturbation_l2,
                    "relative_error": o.relative_error,
                    "epsilon": eps,
                    "gamma": gamma,
                    "bound": bound,
                    "bound_holds": holds,
                    "event_type": o.event_type,
                }
            )
    return rows


def summary_rows(labels, outcomes, budgets) -> list[dict]:
    rows = []
    for label, run, budget in zip(labels, outcomes, budgets):
        records = [r for o in run for r in o.audits]
        bounded = [r for r in records if r.bound is not None]
        errors = [o.relative_error for o in run]
        rows.append(
            {
                "policy": label,
                "steps": len(run),
                "budget": budget,
                "max_cache_size": max((o.cache_size for o in run), default=0),
                "max_entry_count": max((o.entry_count for o in run), default=0),
                "mean_relative_error": float(np.mean(errors)) if errors else 0.0,
                "max_relative_error": max(errors, default=0.0),
                "merges": sum(1 for o in run for _, kind in o.events if kind != "evict"),
                "evictions": sum(1 for o in run for _, kind in o.events if kind == "evict"),
                "audited_pairs": len(records),
                "bounded_pairs": len(bounded),
                "bound_violations": sum(1 for r in bounded if not r.bound_holds),
            }
        )
    return rows


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return _num(value)
    return str(value)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_csv_cell(row[c]) for c in columns])
    return buf.getvalue()


def summary_path(path: Path) -> Path:
    return path.with_name(path.stem + ".summary.csv")


def write_report(path, result: ExperimentResult, fmt: str = "csv") -> list[Path]:
    """Write per-step rows and the per-policy summary.

    CSV output goes to ``path`` plus a sibling ``<stem>.summary.csv`` whose
    first line records the run status. JSON output is a single file holding
    ``status``, ``rows`` and ``summary``.
    """
    path = Path(path)
    rows = report_rows(result.labels, result.outcomes)
    summary = summary_rows(result.labels, result.outcomes, result.budgets)
    if fmt == "json":
        doc = {"status": result.status, "columns": list(REPORT_COLUMNS), "rows": rows, "summary": summary}
        path.write_text(json.dumps(doc, indent=1) + "\n")
        return [path]
    path.write_text(_csv_text(REPORT_COLUMNS, rows))
    side = summary_path(path)
    side.write_text(f"# status: {result.status}\n" + _csv_text(SUMMARY_COLUMNS, summary))
    return [path, side]


def threads_from_env() -> int | None:
    raw = os.environ.get("KVLAB_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"KVLAB_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("KVLAB_THREADS must be positive")
    return n


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Build or load the stream, run every policy and write the report.

    If a run fails, whatever finished is written with a ``failed`` status
    before the exception propagates.
    """
    stream = cfg.stream()
    if cfg.trace_out is not None:
        save_trace(stream, cfg.trace_out)
    labels = policy_labels(cfg.policies)
    try:
        budgets = [p.budget(stream.prefill_len) if p.compresses else None for p in cfg.policies]
    except InfeasibleBudgetError as exc:
        raise ConfigError(str(exc)) from None
    result = ExperimentResult(labels, [], budgets)
    try:
        result.outcomes = run_comparison(stream, cfg.policies, cfg.audit_horizon, cfg.threads)
    except Exception as exc:
        result.status = f"failed: {type(exc).__name__}: {exc}"
        result.labels = result.labels[: len(result.outcomes)]
        if cfg.report_path is not None:
            write_report(cfg.report_path, result, cfg.report_format)
        raise
    if cfg.report_path is not None:
        result.files = write_report(cfg.report_path, result, cfg.report_format)
    return result


BENCHMARK_POLICIES = ("keepkv", "merge-cosine", "evict-heavy")


def run_benchmark(
    seeds=BENCHMARK_SEEDS,
    kinds=BENCHMARK_POLICIES,
    budget_ratio: float = 0.2,
    horizon: int = DEFAULT_HORIZON,
    threads: int | None = None,
    **workload,
) -> dict:
    """Mean relative error per policy over the seeded benchmark streams.

    Returns ``{"per_seed": {kind: [...]}, "mean": {kind: float}, "runs": {...}}``
    where ``runs[kind]`` holds the step outcomes of every seed.
    """
    params = dict(BENCHMARK_WORKLOAD) | workload
    policies = [PolicyConfig(k, budget_ratio=budget_ratio) for k in kinds]
    per_seed: dict = {k: [] for k in kinds}
    runs: dict = {k: [] for k in kinds}
    for seed in seeds:
        stream = ExperimentConfig(policies=policies, seed=seed, **params).stream()
        for kind, outcomes in zip(kinds, run_comparison(stream, policies, horizon, threads)):
            per_seed[kind].append(float(np.mean([o.relative_error for o in outcomes])))
            runs[kind].append(outcomes)
    return {"per_seed": per_seed, "mean": {k: float(np.mean(v)) for k, v in per_seed.items()}, "runs": runs}

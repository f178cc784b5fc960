"""Acceptance criteria, each run at its stated tolerance.

Every test prints one PASS/FAIL line; the lines are repeated in the terminal
summary. Set ``KVLAB_UPDATE_BASELINE=1`` to rewrite the committed benchmark
baseline instead of comparing against it.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from kvlab.analysis import attention_sag_audit, eviction_perturbation_closed_form
from kvlab.attention import KvCache, attend_arrays, raw_scores
from kvlab.harness import (
    BENCHMARK_POLICIES,
    BENCHMARK_SEEDS,
    BENCHMARK_WORKLOAD,
    ExperimentConfig,
    run_benchmark,
    run_experiment,
)
from kvlab.merging import DegenerateMergeError, MergeInputs, convex_weights_cosine, convex_weights_gaussian, zip_merge
from kvlab.policy import PolicyConfig
from kvlab.predictor import EmaState, ema_estimate, ema_init_prefill, ema_update
from kvlab.simulate import Simulation
from kvlab.stream import generate_stream
from oracles import softmax_attention

BASELINE = Path(__file__).parent / "data" / "baseline.json"
DIMS = (4, 16, 64)


def _cache(keys, values):
    cache = KvCache(keys.shape[1])
    for k, v in zip(keys, values):
        cache.append(k, v)
    return cache


def test_zip_merge_is_lossless_at_merge_time(criterion):
    rng = np.random.default_rng(100)
    start = time.perf_counter()
    worst, trials, refused = 0.0, 0, 0
    while trials < 1200:
        d = DIMS[trials % 3]
        n = int(rng.integers(4, 65))
        keys, values, q = rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=d)
        votes = rng.integers(1, 4, size=n)
        idx = rng.choice(n, size=int(rng.integers(2, min(5, n) + 1)), replace=False)
        s = raw_scores(q, keys[idx])
        try:
            key, value, p = zip_merge(MergeInputs.of(keys[idx], values[idx], votes[idx], s))
        except DegenerateMergeError:
            refused += 1
            continue
        keep = np.setdiff1d(np.arange(n), idx)
        before = attend_arrays(keys, values, votes, q).output
        after = attend_arrays(np.vstack([keys[keep], key]), np.vstack([values[keep], value]), np.append(votes[keep], p), q).output
        worst = max(worst, np.linalg.norm(after - before) / np.linalg.norm(before))
        trials += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    assert criterion(
        "1 ZIP losslessness", ok, f"{trials} trials, max rel err {worst:.2e} (tol 1e-9), {refused} degenerate, {elapsed:.1f}s"
    )


def test_convex_merges_sag(criterion):
    rng = np.random.default_rng(200)
    start = time.perf_counter()
    failures, trials, min_gap = 0, 0, np.inf
    for t in range(1200):
        d = DIMS[t % 3]
        n = int(rng.integers(4, 65))
        keys, values, q = rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=d)
        # at least one entry stays outside the merge; a whole-cache merge has A'_r = sum A_j = 1
        idx = list(rng.choice(n, size=int(rng.integers(2, min(5, n - 1) + 1)), replace=False))
        cache = _cache(keys, values)
        inputs = MergeInputs.of(keys[idx], values[idx])
        for w in (convex_weights_cosine(inputs), convex_weights_gaussian(inputs, float(rng.uniform(0.5, 3.0)))):
            merged, total, sag = attention_sag_audit(cache, idx, w, q)
            failures += not sag
            min_gap = min(min_gap, (total - merged) / total)
            trials += 1
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 10
    assert criterion(
        "2a attention sag (distinct keys)",
        ok,
        f"{trials} merges, {failures} without sag, min relative gap {min_gap:.2e}, {elapsed:.1f}s",
    )


@pytest.mark.xfail(
    strict=True,
    reason="a one-vote convex merge of m >= 2 identical entries gets 1/m of their score mass; "
    "only the score inequality s_r <= sum w s is tight there",
)
def test_convex_merge_of_identical_keys_keeps_attention(criterion):
    rng = np.random.default_rng(201)
    worst = 0.0
    for t in range(1000):
        d = DIMS[t % 3]
        n = int(rng.integers(4, 65))
        keys, values, q = rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=d)
        idx = list(rng.choice(n, size=int(rng.integers(2, min(5, n - 1) + 1)), replace=False))
        keys[idx] = keys[idx[0]]
        w = convex_weights_cosine(MergeInputs.of(keys[idx], values[idx]))
        merged, total, _ = attention_sag_audit(_cache(keys, values), idx, w, q)
        worst = max(worst, abs(merged - total))
    ok = worst <= 1e-12
    criterion("2b identical keys |A'_r - sum A_j| <= 1e-12", ok, f"1000 trials, max gap {worst:.3e}")
    assert ok


def test_eviction_closed_form(criterion):
    rng = np.random.default_rng(300)
    start = time.perf_counter()
    worst, trials, multi = 0.0, 0, 0
    while trials < 1200:
        d = DIMS[trials % 3]
        n = int(rng.integers(4, 65))
        keys, values, q = rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=d)
        ones = np.ones(n, dtype=np.int64)
        full = attend_arrays(keys, values, ones, q)
        gone = np.sort(rng.choice(n, size=int(rng.integers(1, n)), replace=False))
        if full.attention[gone].sum() >= 1 - 1e-6:
            continue
        keep = np.setdiff1d(np.arange(n), gone)
        direct = attend_arrays(keys[keep], values[keep], ones[keep], q).output
        closed = eviction_perturbation_closed_form(full.output, full.attention[gone], values[gone])
        worst = max(worst, float(np.abs(closed - direct).max()))
        trials += 1
        multi += len(gone) > 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 5
    assert criterion(
        "3 eviction closed form", ok, f"{trials} trials ({multi} multi-token), max abs err {worst:.2e}, {elapsed:.1f}s"
    )


def _bound_audit(seeds, **workload):
    pairs = bounded = violations = 0
    worst = 0.0
    for seed in seeds:
        params = dict(BENCHMARK_WORKLOAD) | workload
        stream = ExperimentConfig(policies=[PolicyConfig()], seed=seed, **params).stream()
        sim = Simulation(stream, PolicyConfig("keepkv", budget_ratio=0.2), horizon=16)
        sim.run()
        for audit in sim.audits:
            for rec in audit.records:
                pairs += 1
                if rec.bound is not None:
                    bounded += 1
                    violations += not rec.bound_holds
                    worst = max(worst, rec.theta / rec.bound if rec.bound > 0 else 0.0)
    return pairs, bounded, violations, worst


def test_multi_step_bound_holds(criterion):
    start = time.perf_counter()
    seeds = range(20)
    bench = _bound_audit(seeds)
    iid = _bound_audit(seeds, query_corr=0.0, salience=0.0, query_align=0.0)
    elapsed = time.perf_counter() - start
    ok = bench[2] == 0 and iid[2] == 0 and bench[1] > 0 and iid[1] > 0 and elapsed < 120
    assert criterion(
        "4 perturbation bound",
        ok,
        f"benchmark workload {bench[1]}/{bench[0]} bounded pairs, {bench[2]} violations, max theta/bound {bench[3]:.2e}; "
        f"i.i.d. workload {iid[1]}/{iid[0]} bounded, {iid[2]} violations, max {iid[3]:.2e}; {elapsed:.1f}s",
    )


def test_zero_perturbation_limits(criterion):
    start = time.perf_counter()
    dup_events = dup_records = 0
    dup_worst = 0.0
    for seed in range(6):
        stream = generate_stream(32, 256, 64, seed, dup_frac=0.3, dup_noise=0.0, query_corr=0.9)
        sim = Simulation(stream, PolicyConfig("keepkv", budget_ratio=0.2), horizon=16)
        sim.run()
        for audit in sim.audits:
            idx = audit.participants
            same = (
                np.all(audit.keys[idx] == audit.keys[idx[-1]])
                and np.all(audit.values[idx] == audit.values[idx[-1]])
                and np.all(audit.estimates == audit.estimates[-1])
            )
            if not same:
                continue
            dup_events += 1
            for rec in audit.records:
                dup_records += 1
                dup_worst = max(dup_worst, rec.relative_theta)

    fed_events = 0
    fed_worst = 0.0
    for seed in range(6):
        stream = generate_stream(32, 256, 64, seed)
        sim = Simulation(stream, PolicyConfig("keepkv", budget_ratio=0.2, score_source="next"), horizon=16)
        sim.run()
        for audit in sim.audits:
            rec = next((r for r in audit.records if r.step == audit.step + 1), None)
            if rec is not None:
                fed_events += 1
                fed_worst = max(fed_worst, rec.relative_theta)
    elapsed = time.perf_counter() - start
    ok_a = dup_events > 0 and dup_worst <= 1e-9
    ok_b = fed_events > 0 and fed_worst <= 1e-9
    criterion("5a duplicate merges", ok_a, f"{dup_events} events, {dup_records} audited steps, max rel theta {dup_worst:.2e}")
    criterion("5b oracle-fed merges", ok_b, f"{fed_events} events audited at t+1, max rel theta {fed_worst:.2e}")
    assert ok_a and ok_b and elapsed < 60


def test_ema_constants_and_worked_examples(criterion):
    start = time.perf_counter()
    worst = 0.0
    for alpha in (0.5, 0.9, 0.99):
        for s in (0.37, 1.0, 7.5):
            state = EmaState()
            for n in range(1, 101):
                state = ema_update(state, s, alpha)
                worst = max(worst, abs(ema_estimate(state, alpha) - s))
            for n in range(1, 10):
                worst = max(worst, abs(ema_estimate(ema_init_prefill([s] * n, alpha, 8), alpha) - s))
    prefill = ema_init_prefill([1.0, 3.0], 0.5)
    decode = ema_update(ema_update(EmaState(), 1.0, 0.5), 3.0, 0.5)
    examples = prefill.smoothed == 1.75 and ema_estimate(prefill, 0.5) == ema_estimate(decode, 0.5) == 1.75 / 0.75
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and examples and elapsed < 1
    assert criterion("6 EMA correctness", ok, f"max |estimate - s| {worst:.2e}, worked examples {examples}, {elapsed:.2f}s")


def test_oracle_equivalence(criterion):
    rng = np.random.default_rng(700)
    start = time.perf_counter()
    worst = 0.0
    for t in range(150):
        d = DIMS[t % 3]
        n = int(rng.integers(1, 65))
        keys, values, q = rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.normal(size=d)
        got = attend_arrays(keys, values, np.ones(n, dtype=np.int64), q).output
        want = softmax_attention(q.tolist(), keys.tolist(), values.tolist())
        worst = max(worst, float(np.abs(got - np.array(want)).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 1
    assert criterion("7 oracle equivalence", ok, f"150 instances, max abs err {worst:.2e}, {elapsed:.2f}s")


@pytest.fixture(scope="module")
def benchmark():
    start = time.perf_counter()
    result = run_benchmark(BENCHMARK_SEEDS, BENCHMARK_POLICIES)
    result["elapsed"] = time.perf_counter() - start
    return result


def test_comparative_quality(benchmark, criterion):
    means = benchmark["mean"]
    record = {
        "workload": dict(BENCHMARK_WORKLOAD),
        "budget_ratio": 0.2,
        "seeds": list(BENCHMARK_SEEDS),
        "mean_relative_error": {k: repr(v) for k, v in means.items()},
        "per_seed": {k: [repr(x) for x in v] for k, v in benchmark["per_seed"].items()},
    }
    if os.environ.get("KVLAB_UPDATE_BASELINE") or not BASELINE.exists():
        BASELINE.write_text(json.dumps(record, indent=1) + "\n")
        pytest.fail(f"baseline written to {BASELINE}; rerun to compare", pytrace=False)
    stored = json.loads(BASELINE.read_text())
    matches = stored["mean_relative_error"] == record["mean_relative_error"] and stored["per_seed"] == record["per_seed"]
    order = means["keepkv"] <= means["merge-cosine"] and means["keepkv"] <= means["evict-heavy"]
    wins = sum(a <= b for a, b in zip(benchmark["per_seed"]["keepkv"], benchmark["per_seed"]["evict-heavy"]))
    ok = order and matches and benchmark["elapsed"] < 300
    assert criterion(
        "8 comparative quality",
        ok,
        "mean rel err "
        + ", ".join(f"{k} {v:.4f}" for k, v in means.items())
        + f"; keepkv <= evict-heavy on {wins}/{len(BENCHMARK_SEEDS)} seeds; baseline bit-exact {matches}; "
        f"{benchmark['elapsed']:.0f}s",
    )


def test_determinism_and_budget(benchmark, criterion, tmp_path):
    budget = PolicyConfig(budget_ratio=0.2).budget(BENCHMARK_WORKLOAD["prefill_len"])
    over = 0
    steps = 0
    for runs in benchmark["runs"].values():
        for outcomes in runs:
            for o in outcomes:
                steps += 1
                over += o.cache_size > budget + 1 or o.entry_count > budget
    files = []
    for name in ("a", "b"):
        cfg = ExperimentConfig(
            policies=[PolicyConfig(k, budget_ratio=0.2) for k in BENCHMARK_POLICIES],
            seed=7,
            report_path=str(tmp_path / f"{name}.csv"),
            **BENCHMARK_WORKLOAD,
        )
        files.append([p.read_bytes() for p in run_experiment(cfg).files])
    identical = files[0] == files[1]
    ok = identical and over == 0
    assert criterion(
        "9 determinism and budget",
        ok,
        f"reports byte-identical {identical}; {over} of {steps} steps over budget {budget} (+1 before compression)",
    )

"""Decode-loop simulation of one compression policy against a shared oracle."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from kvlab.analysis import MergeAudit, StepOutcome, step_outcome, theorem3_audit
from kvlab.attention import KvCache, attend, attend_arrays, raw_scores
from kvlab.policy import CompressionResult, PolicyConfig, compress, compress_prefill
from kvlab.predictor import ema_init_prefill
from kvlab.stream import Stream

DEFAULT_HORIZON = 16


def oracle_outputs(stream: Stream) -> np.ndarray:
    """Uncompressed attention output for every decode step, shape ``(N, d)``."""
    out = np.empty((stream.decode_len, stream.dim))
    for j, t in enumerate(range(stream.prefill_len, len(stream))):
        n = t + 1
        out[j] = attend_arrays(
            stream.keys[:n], stream.values[:n], np.ones(n, dtype=np.int64), stream.queries[t]
        ).output
    return out


class Simulation:
    """Run one policy over a stream, auditing every ZIP merge for ``horizon`` steps.

    Steps are numbered by token position starting at 1: the prefill
    compression happens at step ``L`` and decode steps are ``L+1 .. L+N``.
    Each decode step appends the new pair, attends, feeds the raw scores to
    every entry's predictor, audits earlier merges, and compresses back to
    budget on overflow.
    """

    def __init__(self, stream: Stream, cfg: PolicyConfig, horizon: int = DEFAULT_HORIZON):
        self.stream = stream
        self.cfg = cfg
        self.horizon = horizon
        self.cache = KvCache(stream.dim, window=cfg.window_w)
        self.budget = cfg.budget(stream.prefill_len) if cfg.compresses else None
        self.audits: list[MergeAudit] = []
        self.merge_events: list = []
        self._live: list[MergeAudit] = []
        self._next_id = 0

    def _prefill(self) -> None:
        s, cfg = self.stream, self.cfg
        L = s.prefill_len
        for i in range(L):
            self.cache.append(s.keys[i], s.values[i])
        keys = s.keys[:L]
        first = max(0, L - 1 - cfg.window_w)
        window_scores = np.stack([raw_scores(s.queries[k], keys) for k in range(first, L)])
        logits = s.queries[:L] @ keys.T / math.sqrt(s.dim)
        logits[np.triu_indices(L, 1)] = -np.inf
        attn = np.exp(logits - logits.max(axis=1, keepdims=True))
        attn /= attn.sum(axis=1, keepdims=True)
        totals = attn.sum(axis=0)
        for i, entry in enumerate(self.cache):
            rows = window_scores[max(i, first) - first :, i]
            entry.ema = ema_init_prefill(rows, cfg.alpha, cfg.window_w)
            entry.attention_total = float(totals[i])

    def _merge_scores(self, t: int) -> np.ndarray | None:
        """Scores for merge rules at step ``t`` (None means EMA estimates)."""
        source = self.cfg.score_source
        if source == "ema":
            return None
        idx = t - 1 if source == "current" else min(t, len(self.stream) - 1)
        return raw_scores(self.stream.queries[idx], self.cache.arrays()[0])

    def _register(self, step: int, result: CompressionResult) -> list:
        events = []
        for ev in result.merges:
            eid = self._next_id
            self._next_id += 1
            events.append((eid, ev.kind))
            self.merge_events.append((eid, step, ev))
            if ev.kind == "zip" and self.horizon > 0:
                audit = MergeAudit(eid, step, ev, self.horizon)
                self.audits.append(audit)
                self._live.append(audit)
        for _ in range(result.hard_evicted):
            events.append((self._next_id, "evict"))
            self._next_id += 1
        return events

    def run(self, oracle: np.ndarray | None = None) -> list[StepOutcome]:
        s, cfg = self.stream, self.cfg
        L = s.prefill_len
        if oracle is None:
            oracle = oracle_outputs(s)
        self._prefill()
        if self.budget is not None and len(self.cache) > self.budget:
            self._register(L, compress_prefill(self.cache, cfg, self._merge_scores(L), self.budget))

        outcomes = []
        for j, t in enumerate(range(L + 1, len(s) + 1)):
            q = s.queries[t - 1]
            self.cache.append(s.keys[t - 1], s.values[t - 1])
            result = attend(self.cache, q)
            cache_size = len(self.cache)
            for entry, score, a in zip(self.cache.entries, result.scores, result.attention):
                entry.ema.absorb(float(score), cfg.alpha)
                entry.attention_total += float(a)

            records = [theorem3_audit(a, t, q) for a in self._live if a.active(t)]
            self._live = [a for a in self._live if t < a.step + a.horizon]

            events = []
            kind = "none"
            if self.budget is not None and cache_size > self.budget:
                res = compress(self.cache, cfg, self.budget, self._merge_scores(t))
                events = self._register(t, res)
                kind = "+".join(n for n, hit in (("merge", res.merges), ("evict", res.hard_evicted)) if hit) or "none"
            outcomes.append(
                step_outcome(
                    t,
                    oracle[j],
                    result.output,
                    cache_size=cache_size,
                    entry_count=len(self.cache),
                    vote_sum=self.cache.vote_sum,
                    event_type=kind,
                    events=events,
                    audits=records,
                )
            )
        return outcomes


def run_comparison(
    stream: Stream,
    configs: list[PolicyConfig],
    horizon: int = DEFAULT_HORIZON,
    threads: int | None = None,
) -> list[list[StepOutcome]]:
    """Run every policy on the same stream against one shared oracle.

    Results are returned in ``configs`` order regardless of ``threads``.
    """
    oracle = oracle_outputs(stream)

    def one(cfg):
        return Simulation(stream, cfg, horizon).run(oracle)

    if threads and threads > 1 and len(configs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, configs))
    return [one(cfg) for cfg in configs]

"""Compression policies: which entries stay, which go, and where merged ones land.

Selection keeps the sink tokens, a recent window, and then the most important
of the remaining entries. Merging policies map each evicted entry to the
retained key with the highest cosine similarity, provided it exceeds the
threshold; evicted entries without such a partner are dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from kvlab.attention import CacheEntry, KvCache
from kvlab.merging import (
    DegenerateMergeError,
    MergeInputs,
    ZeroNormKeyError,
    cam_merge,
    convex_merge,
    convex_weights_cosine,
    convex_weights_gaussian,
    zip_key_scale,
    zip_merge,
)
from kvlab.predictor import merged_ema

POLICY_KINDS = ("full", "evict-window", "evict-heavy", "merge-cosine", "merge-gaussian", "merge-cam", "keepkv")
MERGING_KINDS = ("merge-cosine", "merge-gaussian", "merge-cam", "keepkv")
IMPORTANCE_KINDS = ("ema", "cumulative", "window")
SCORE_SOURCES = ("ema", "current", "next")


class InfeasibleBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    """Compression policy and its knobs.

    ``score_source`` picks the scores fed to score-based merges: the EMA
    estimate (normal operation), the true scores under the current query, or
    the true scores under the next query (an oracle used only for audits).
    ``max_key_scale`` bounds how far a ZIP merged key may be stretched
    relative to the score-weighted mean key before the merge is refused.
    """

    policy_kind: str = "keepkv"
    budget_ratio: float = 0.2
    sink_count: int = 4
    recent_to_heavy_ratio: float = 4.0
    threshold_T: float = 0.8
    alpha: float = 0.9
    window_w: int = 8
    gaussian_sigma: float = 1.0
    seed: int = 0
    importance: str = "ema"
    score_source: str = "ema"
    max_key_scale: float = 4.0

    def __post_init__(self):
        if self.policy_kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy {self.policy_kind!r}; expected one of {POLICY_KINDS}")
        if not 0.0 < self.budget_ratio <= 1.0:
            raise ValueError("budget_ratio must lie in (0, 1]")
        if self.sink_count < 0:
            raise ValueError("sink_count must be non-negative")
        if not self.recent_to_heavy_ratio > 0:
            raise ValueError("recent_to_heavy_ratio must be positive")
        if not -1.0 <= self.threshold_T <= 1.0:
            raise ValueError("threshold_T must lie in [-1, 1]")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.window_w < 1:
            raise ValueError("window_w must be positive")
        if not self.gaussian_sigma > 0.0:
            raise ValueError("gaussian_sigma must be positive")
        if self.importance not in IMPORTANCE_KINDS:
            raise ValueError(f"unknown importance signal {self.importance!r}")
        if self.score_source not in SCORE_SOURCES:
            raise ValueError(f"unknown score source {self.score_source!r}")
        if not self.max_key_scale >= 1.0:
            raise ValueError("max_key_scale must be at least 1")

    @property
    def compresses(self) -> bool:
        return self.policy_kind != "full" and self.budget_ratio < 1.0

    @property
    def merges(self) -> bool:
        return self.policy_kind in MERGING_KINDS

    def budget(self, prefill_len: int) -> int:
        """Entry budget ``ceil(budget_ratio * L)``."""
        size = math.ceil(Fraction(self.budget_ratio).limit_denominator(10**9) * prefill_len)
        if size < self.sink_count + 1:
            raise InfeasibleBudgetError(
                f"budget {size} cannot hold {self.sink_count} sink tokens plus one recent token"
            )
        return size

    def recent_count(self, target_size: int) -> int:
        free = target_size - self.sink_count
        if self.policy_kind == "evict-window":
            return free
        ratio = Fraction(self.recent_to_heavy_ratio).limit_denominator(10**6)
        return math.ceil(free * ratio / (ratio + 1))


@dataclass(frozen=True)
class CompressionPlan:
    retained: tuple[int, ...]
    evicted: tuple[int, ...]
    merge_targets: dict = field(default_factory=dict)


@dataclass
class MergeEvent:
    """One merge, with the cache state it was applied to.

    ``participants`` index rows of the snapshot arrays; the target is last.
    ``scores`` are the per-participant scores the merge rule consumed.
    """

    kind: str
    snapshot_keys: np.ndarray
    snapshot_values: np.ndarray
    snapshot_votes: np.ndarray
    participants: tuple[int, ...]
    scores: np.ndarray
    key: np.ndarray
    value: np.ndarray
    votes: int


@dataclass
class CompressionResult:
    merges: list[MergeEvent] = field(default_factory=list)
    hard_evicted: int = 0
    refused: int = 0
    scores: np.ndarray | None = None

    def extend(self, other: CompressionResult) -> None:
        self.merges.extend(other.merges)
        self.hard_evicted += other.hard_evicted
        self.refused += other.refused
        self.scores = other.scores


def importance_scores(cache: KvCache, cfg: PolicyConfig) -> np.ndarray:
    """Per-entry importance for heavy-hitter selection.

    Score estimates are multiplied by the entry's votes so that an entry is
    ranked by the attention mass it carries. Accumulated attention already
    includes the votes.
    """
    if cfg.importance == "cumulative":
        return np.array([e.attention_total for e in cache])
    votes = np.array([e.votes for e in cache], dtype=np.float64)
    if cfg.importance == "ema":
        return votes * ema_scores(cache, cfg)
    return votes * np.array([np.mean(e.ema.window) if e.ema.window else 0.0 for e in cache])


def ema_scores(cache: KvCache, cfg: PolicyConfig) -> np.ndarray:
    return np.array([e.ema.estimate(cfg.alpha) for e in cache])


def select_eviction(cache: KvCache, importance, cfg: PolicyConfig, target_size: int) -> CompressionPlan:
    """Keep sinks, the recent window, then the most important of the rest.

    Ties in importance go to the lower index.
    """
    n = len(cache)
    importance = np.asarray(importance, dtype=np.float64)
    if importance.shape != (n,):
        raise ValueError("importance must align with cache entries")
    if target_size > n:
        raise ValueError(f"target size {target_size} exceeds entry count {n}")
    if target_size >= n:
        return CompressionPlan(tuple(range(n)), ())
    if target_size < cfg.sink_count + 1:
        raise InfeasibleBudgetError(f"target {target_size} cannot hold {cfg.sink_count} sinks plus a recent entry")

    keep = set(range(min(cfg.sink_count, n)))
    keep.update(range(n - cfg.recent_count(target_size), n))
    heavy_slots = target_size - len(keep)
    if heavy_slots > 0:
        middle = [i for i in range(n) if i not in keep]
        middle.sort(key=lambda i: (-importance[i], i))
        keep.update(middle[:heavy_slots])
    retained = tuple(sorted(keep))
    evicted = tuple(i for i in range(n) if i not in keep)
    return CompressionPlan(retained, evicted)


def _unit_keys(keys: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(keys, axis=1)
    if np.any(norms == 0.0):
        raise ZeroNormKeyError("cosine similarity undefined for a zero-norm key")
    return keys / norms[:, None]


def select_merge_targets(cache: KvCache, plan: CompressionPlan, cfg: PolicyConfig) -> CompressionPlan:
    """Map each evicted entry to its most similar retained non-sink key above ``threshold_T``."""
    if set(plan.retained) & set(plan.evicted) or len(plan.retained) + len(plan.evicted) != len(cache):
        raise ValueError("plan does not partition the cache")
    candidates = [i for i in plan.retained if i >= cfg.sink_count]
    if not plan.evicted or not candidates:
        return CompressionPlan(plan.retained, plan.evicted, {})
    unit = _unit_keys(cache.arrays()[0])
    sims = unit[list(plan.evicted)] @ unit[candidates].T
    targets = {}
    for row, e in enumerate(plan.evicted):
        best = int(np.argmax(sims[row]))
        if sims[row, best] > cfg.threshold_T:
            targets[e] = candidates[best]
    return CompressionPlan(plan.retained, plan.evicted, targets)


def _merge_group(snapshot, idx: list[int], cfg: PolicyConfig, scores: np.ndarray):
    keys, values, votes = snapshot
    inputs = MergeInputs(keys[idx], values[idx], votes[idx], scores[idx])
    kind = cfg.policy_kind
    if kind == "keepkv":
        rho = zip_key_scale(inputs)
        if not 1.0 / cfg.max_key_scale <= rho <= cfg.max_key_scale:
            raise DegenerateMergeError(f"ZIP key scale {rho:.3g} outside the allowed range")
        key, value, merged_votes = zip_merge(inputs)
        return "zip", inputs, key, value, merged_votes
    if kind == "merge-cosine":
        key, value = convex_merge(inputs, convex_weights_cosine(inputs))
        return "convex-cosine", inputs, key, value, 1
    if kind == "merge-gaussian":
        key, value = convex_merge(inputs, convex_weights_gaussian(inputs, cfg.gaussian_sigma))
        return "convex-gaussian", inputs, key, value, 1
    # value-only merge weighted by the entries' scores
    key, value = cam_merge(inputs, inputs.scores / inputs.scores.sum())
    return "cam", inputs, key, value, 1


def apply_merges(
    cache: KvCache,
    groups: dict,
    drop: list[int],
    cfg: PolicyConfig,
    scores: np.ndarray,
    refuse_drops: bool,
) -> CompressionResult:
    """Apply ``target -> members`` merges and delete ``drop``.

    When a ZIP merge is refused its members are deleted if ``refuse_drops``,
    otherwise they stay in the cache.
    """
    keys, values, votes = cache.arrays()
    snapshot = (keys.copy(), values.copy(), votes.copy())
    result = CompressionResult()
    scores = np.array(scores, dtype=np.float64)
    removed = set(drop)
    for target in sorted(groups):
        members = sorted(groups[target])
        idx = members + [target]
        try:
            kind, inputs, key, value, merged_votes = _merge_group(snapshot, idx, cfg, scores)
        except DegenerateMergeError:
            result.refused += 1
            if refuse_drops:
                removed.update(members)
                result.hard_evicted += len(members)
            continue
        parts = [cache[i] for i in idx]
        entry = CacheEntry(
            key,
            value,
            merged_votes,
            merged_ema([p.ema for p in parts], [p.votes for p in parts], cfg.alpha),
            frozenset().union(*(p.origin for p in parts)),
            sum(p.attention_total for p in parts),
        )
        result.merges.append(
            MergeEvent(kind, *snapshot, tuple(idx), inputs.scores.copy(), key.copy(), value.copy(), merged_votes)
        )
        scores[target] = float(inputs.votes @ inputs.scores) / inputs.votes.sum()
        cache.entries[target] = entry
        removed.update(members)
    result.hard_evicted += len(drop)
    keep = [i for i in range(len(cache)) if i not in removed]
    cache.entries = [cache.entries[i] for i in keep]
    cache.invalidate()
    result.scores = scores[keep]
    return result


def compress(
    cache: KvCache, cfg: PolicyConfig, target_size: int, scores: np.ndarray | None = None
) -> CompressionResult:
    """Evict down to ``target_size``, merging evictees into similar survivors when the policy merges.

    ``scores`` feed score-based merge rules; they default to the EMA estimates.
    """
    if scores is None:
        scores = ema_scores(cache, cfg)
    if len(cache) <= target_size:
        return CompressionResult(scores=np.asarray(scores, dtype=np.float64))
    plan = select_eviction(cache, importance_scores(cache, cfg), cfg, target_size)
    groups: dict = {}
    if cfg.merges:
        plan = select_merge_targets(cache, plan, cfg)
        for e, c in plan.merge_targets.items():
            groups.setdefault(c, []).append(e)
    drop = [e for e in plan.evicted if e not in plan.merge_targets]
    return apply_merges(cache, groups, drop, cfg, scores, refuse_drops=True)


def merge_first_groups(cache: KvCache, cfg: PolicyConfig, reduction: int) -> dict:
    """Greedy similarity grouping used before prefill eviction.

    Scans pairs ``(i, j)``, ``i < j``, of non-sink entries in index order and
    folds ``j`` into ``i`` when their key cosine exceeds the threshold and
    neither has been folded yet. Stops once ``reduction`` entries are absorbed.
    """
    groups: dict = {}
    n = len(cache)
    if reduction <= 0 or n - cfg.sink_count < 2:
        return groups
    unit = _unit_keys(cache.arrays()[0])
    absorbed = np.zeros(n, dtype=bool)
    count = 0
    for i in range(cfg.sink_count, n - 1):
        if absorbed[i]:
            continue
        sims = unit[i + 1 :] @ unit[i]
        for off in np.flatnonzero(sims > cfg.threshold_T):
            j = i + 1 + int(off)
            if absorbed[j]:
                continue
            absorbed[j] = True
            groups.setdefault(i, []).append(j)
            count += 1
            if count == reduction:
                return groups
    return groups


def compress_prefill(
    cache: KvCache, cfg: PolicyConfig, scores: np.ndarray | None = None, target_size: int | None = None
) -> CompressionResult:
    """One-off compression after the last prefill step.

    ``keepkv`` merges similar pairs first and evicts afterwards; the other
    policies evict first and then merge.
    """
    if target_size is None:
        target_size = cfg.budget(len(cache))
    if scores is None:
        scores = ema_scores(cache, cfg)
    result = CompressionResult(scores=np.asarray(scores, dtype=np.float64))
    if cfg.policy_kind == "keepkv" and len(cache) > target_size:
        groups = merge_first_groups(cache, cfg, len(cache) - target_size)
        if groups:
            result.extend(apply_merges(cache, groups, [], cfg, result.scores, refuse_drops=False))
    result.extend(compress(cache, cfg, target_size, result.scores))
    return result

"""Oracle comparisons and audits of compression against the uncompressed cache."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kvlab.attention import Attention, KvCache, as_vector, attend, attend_arrays, raw_scores
from kvlab.merging import MergeInputs, convex_merge
from kvlab.policy import MergeEvent

EVICTION_GUARD = 1e-12


class AuditError(ValueError):
    pass


@dataclass
class AuditRecord:
    """Evaluation of one merge event at one later step."""

    event_id: int
    step: int
    epsilon: float
    gamma: float
    theta: float
    reference_norm: float
    bound: float | None
    bound_holds: bool | None

    @property
    def relative_theta(self) -> float:
        return self.theta / max(self.reference_norm, 1e-30)


@dataclass
class StepOutcome:
    step: int
    oracle_output: np.ndarray
    compressed_output: np.ndarray
    perturbation_l2: float
    relative_error: float
    cache_size: int
    entry_count: int
    vote_sum: int
    event_type: str = "none"
    events: list = field(default_factory=list)
    audits: list = field(default_factory=list)


def step_outcome(step: int, oracle: np.ndarray, compressed: np.ndarray, **kwargs) -> StepOutcome:
    diff = float(np.linalg.norm(compressed - oracle))
    rel = diff / max(float(np.linalg.norm(oracle)), 1e-30) if diff > 0.0 else 0.0
    return StepOutcome(step, oracle, compressed, diff, rel, **kwargs)


def oracle_step(shadow: KvCache, q) -> np.ndarray:
    """Output of plain attention over the never-compressed cache."""
    return attend(shadow, q).output


def eviction_perturbation_closed_form(output, attentions, values) -> np.ndarray:
    """Output after dropping entries, from the pre-eviction output alone.

    ``(o - sum_j A_j v_j) / (1 - sum_j A_j)`` where ``A_j`` are the
    pre-eviction attentions of the dropped entries.
    """
    output = as_vector(output)
    a = np.asarray(attentions, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return output.copy()
    v = np.asarray(values, dtype=np.float64).reshape(a.size, -1)
    total = float(a.sum())
    if total >= 1.0 - EVICTION_GUARD:
        raise AuditError(f"evicted attention mass {total!r} leaves nothing to renormalize")
    return (output - a @ v) / (1.0 - total)


def merged_attention(
    keys: np.ndarray,
    values: np.ndarray,
    votes: np.ndarray,
    participants,
    merged: tuple[np.ndarray, np.ndarray, int],
    q,
) -> tuple[float, float, Attention, Attention]:
    """Attention on a merged entry versus the summed attention of its participants.

    Returns ``(A'_r, sum_j A_j, before, after)`` under query ``q``; the merged
    entry is appended after the surviving rows.
    """
    q = as_vector(q, keys.shape[1])
    before = attend_arrays(keys, values, votes, q)
    post_keys, post_values, post_votes = apply_merge_arrays(keys, values, votes, participants, merged)
    after = attend_arrays(post_keys, post_values, post_votes, q)
    return float(after.attention[-1]), float(before.attention[list(participants)].sum()), before, after


def apply_merge_arrays(keys, values, votes, participants, merged):
    keep = np.ones(keys.shape[0], dtype=bool)
    keep[list(participants)] = False
    key, value, p = merged
    return (
        np.vstack([keys[keep], key]),
        np.vstack([values[keep], value]),
        np.append(votes[keep], p),
    )


def attention_sag_audit(cache: KvCache, participants, weights, q) -> tuple[float, float, bool]:
    """Check that a convex merge lowers the merged entry's attention.

    ``participants`` index ``cache`` with the target last. Returns
    ``(A'_r, sum_j A_j, sag)`` with ``sag = A'_r < sum_j A_j``. Sag needs at
    least one entry outside the merge: merging the whole cache leaves both
    sides equal to 1.
    """
    keys, values, votes = cache.arrays()
    idx = list(participants)
    k_r, v_r = convex_merge(MergeInputs.of(keys[idx], values[idx]), weights)
    merged, total, _, _ = merged_attention(keys, values, votes, idx, (k_r, v_r, 1), q)
    return merged, total, merged < total


def convex_score_gap(keys, weights, q) -> tuple[float, float]:
    """Raw score of a convex-merged key against the weighted mean of the participants' scores.

    Returns ``(s_r, sum_j w_j s_j)``. The first never exceeds the second and
    they coincide exactly when all keys do. Sag itself is strict even then,
    because ``sum_j w_j s_j < sum_j s_j`` for two or more participants.
    """
    keys = np.asarray(keys, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    q = as_vector(q, keys.shape[1])
    merged = float(raw_scores(q, (w @ keys)[None, :])[0])
    return merged, float(w @ raw_scores(q, keys))


class MergeAudit:
    """Counterfactual record of one ZIP merge for checking the multi-step bound.

    Holds the cache as it was just before the merge. At a later step the
    perturbation is measured between that snapshot and the same snapshot with
    only this merge applied, both under the later query.
    """

    def __init__(self, event_id: int, step: int, event: MergeEvent, horizon: int = 16):
        self.event_id = event_id
        self.step = step
        self.horizon = horizon
        self.event = event
        self.participants = list(event.participants)
        self.keys = event.snapshot_keys
        self.values = event.snapshot_values
        self.votes = event.snapshot_votes
        self.estimates = np.asarray(event.scores, dtype=np.float64)
        self.merged = (event.key, event.value, event.votes)
        self.post = apply_merge_arrays(self.keys, self.values, self.votes, self.participants, self.merged)
        p = self.votes[self.participants]
        self.merged_estimate = float(p @ self.estimates) / event.votes
        part_values = self.values[self.participants]
        spread = np.linalg.norm(part_values[:, None, :] - self.values[None, :, :], axis=2)
        self.gamma = float(spread.max())
        self.records: list[AuditRecord] = []

    @classmethod
    def of(cls, event_id, step, keys, values, votes, participants, estimates, merged, horizon=16) -> MergeAudit:
        event = MergeEvent(
            "zip",
            np.asarray(keys, dtype=np.float64),
            np.asarray(values, dtype=np.float64),
            np.asarray(votes, dtype=np.int64),
            tuple(participants),
            np.asarray(estimates, dtype=np.float64),
            *merged,
        )
        return cls(event_id, step, event, horizon)

    def active(self, step: int) -> bool:
        return self.step < step <= self.step + self.horizon

    def theta(self, q) -> tuple[float, float]:
        """``(||o - o'||, ||o||)`` between snapshot and merged snapshot under ``q``."""
        q = as_vector(q, self.keys.shape[1])
        before = attend_arrays(self.keys, self.values, self.votes, q).output
        after = attend_arrays(*self.post, q).output
        return float(np.linalg.norm(before - after)), float(np.linalg.norm(before))

    def epsilon(self, q) -> float:
        """Largest relative score-prediction error over participants and the merged entry."""
        q = as_vector(q, self.keys.shape[1])
        true = raw_scores(q, self.keys[self.participants])
        true_r = float(raw_scores(q, self.merged[0][None, :])[0])
        errs = np.abs(1.0 - self.estimates / true)
        return max(float(errs.max()), abs(1.0 - self.merged_estimate / true_r))


def bound_value(epsilon: float, gamma: float) -> float | None:
    """``2 eps (1 + eps) gamma / (1 - eps)^2``, or ``None`` when ``eps >= 1``."""
    if not epsilon < 1.0:
        return None
    return 2.0 * epsilon * (1.0 + epsilon) * gamma / (1.0 - epsilon) ** 2


def theorem3_audit(audit: MergeAudit, step: int, q) -> AuditRecord:
    """Measure the merge's perturbation at ``step`` and compare it with the bound."""
    if not audit.active(step):
        raise AuditError(f"step {step} outside audit window ({audit.step}, {audit.step + audit.horizon}]")
    theta, ref = audit.theta(q)
    eps = audit.epsilon(q)
    bound = bound_value(eps, audit.gamma)
    holds = None if bound is None else theta < bound
    record = AuditRecord(audit.event_id, step, eps, audit.gamma, theta, ref, bound, holds)
    audit.records.append(record)
    return record


def predictor_errors(stream, alpha: float = 0.9, window: int = 8) -> dict[str, np.ndarray]:
    """Per decode step mean ``|1 - estimate / actual|`` of each score predictor.

    Every token of the uncompressed history is tracked from its insertion.
    At step ``t`` an estimate built from queries before ``t`` is compared with
    the value under ``q_t``: raw scores for the EMA and window-mean
    predictors, normalized attention for the cumulative baseline.
    """
    n, L = len(stream), stream.prefill_len
    smoothed = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    recent = np.zeros((n, window))
    attn_sum = np.zeros(n)
    errors = {name: np.empty(stream.decode_len) for name in ("ema", "window", "cumulative")}
    for t in range(n):
        keys = stream.keys[: t + 1]
        s = raw_scores(stream.queries[t], keys)
        a = s / s.sum()
        if t >= L:
            seen = count[: t + 1] > 0
            ema = smoothed[: t + 1] / (1.0 - alpha ** count[: t + 1].clip(min=1))
            depth = np.minimum(count[: t + 1], window).clip(min=1)
            win = recent[: t + 1].sum(axis=1) / depth
            cum = attn_sum[: t + 1] / count[: t + 1].clip(min=1)
            errors["ema"][t - L] = np.mean(np.abs(1.0 - ema[seen] / s[seen]))
            errors["window"][t - L] = np.mean(np.abs(1.0 - win[seen] / s[seen]))
            errors["cumulative"][t - L] = np.mean(np.abs(1.0 - cum[seen] / a[seen]))
        smoothed[: t + 1] = alpha * smoothed[: t + 1] + (1.0 - alpha) * s
        recent[np.arange(t + 1), count[: t + 1] % window] = s
        count[: t + 1] += 1
        attn_sum[: t + 1] += a
    return errors

"""Merge rules for collapsing several cache entries into one.

Every function takes a :class:`MergeInputs` whose *last* participant is the
retained target; the others are the evicted members merged into it.

Convex rules (cosine or Gaussian-kernel weights, and the value-only variant)
ignore vote counts. ZIP merging uses votes and scores so that, for the query
the scores came from, the merged entry carries exactly the score mass and
score-weighted value of its participants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHT_SUM_TOL = 1e-9
SOLVABILITY_TOL = 1e-12


class ZeroNormKeyError(ValueError):
    pass


class WeightSumError(ValueError):
    pass


class DegenerateMergeError(ValueError):
    """The ZIP scale factor is undefined; the caller must not merge."""


@dataclass(frozen=True)
class MergeInputs:
    keys: np.ndarray
    values: np.ndarray
    votes: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        keys = np.atleast_2d(np.asarray(self.keys, dtype=np.float64))
        values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        m = keys.shape[0]
        votes = np.ones(m, dtype=np.int64) if self.votes is None else np.asarray(self.votes, dtype=np.int64)
        scores = np.ones(m) if self.scores is None else np.asarray(self.scores, dtype=np.float64)
        if m == 0:
            raise ValueError("a merge needs at least one participant")
        if values.shape != keys.shape or votes.shape != (m,) or scores.shape != (m,):
            raise ValueError("participant keys, values, votes and scores are misaligned")
        if np.any(votes < 1):
            raise ValueError("votes must be positive")
        if not np.all(scores > 0.0):
            raise ValueError("scores must be strictly positive")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "votes", votes)
        object.__setattr__(self, "scores", scores)

    @classmethod
    def of(cls, keys, values, votes=None, scores=None) -> MergeInputs:
        return cls(keys, values, votes, scores)

    def __len__(self) -> int:
        return self.keys.shape[0]


def cosine_to_target(keys: np.ndarray) -> np.ndarray:
    """Cosine similarity of every row of ``keys`` with the last row."""
    norms = np.linalg.norm(keys, axis=1)
    if np.any(norms == 0.0):
        raise ZeroNormKeyError("cosine similarity undefined for a zero-norm key")
    return keys @ keys[-1] / (norms * norms[-1])


def _softmax(logits: np.ndarray) -> np.ndarray:
    w = np.exp(logits - logits.max())
    return w / w.sum()


def convex_weights_cosine(inputs: MergeInputs) -> np.ndarray:
    """Weights proportional to ``exp(cos(k_j, k_target))``."""
    if len(inputs) < 2:
        raise ValueError("need at least two participants")
    return _softmax(cosine_to_target(inputs.keys))


def convex_weights_gaussian(inputs: MergeInputs, sigma: float) -> np.ndarray:
    """Weights proportional to ``exp(-|k_j - k_target|^2 / (2 sigma^2))``."""
    if len(inputs) < 2:
        raise ValueError("need at least two participants")
    if not sigma > 0.0:
        raise ValueError("sigma must be positive")
    sq = np.sum((inputs.keys - inputs.keys[-1]) ** 2, axis=1)
    return _softmax(-sq / (2.0 * sigma**2))


def _check_weights(weights, m: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (m,):
        raise ValueError(f"expected {m} weights, got shape {w.shape}")
    if np.any(w < 0.0) or abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise WeightSumError(f"weights must be non-negative and sum to 1 (sum={w.sum()!r})")
    return w


def convex_merge(inputs: MergeInputs, weights) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of keys and values. The merged entry keeps one vote."""
    w = _check_weights(weights, len(inputs))
    return w @ inputs.keys, w @ inputs.values


def cam_merge(inputs: MergeInputs, weights) -> tuple[np.ndarray, np.ndarray]:
    """Merge values convexly and keep the target key verbatim."""
    w = _check_weights(weights, len(inputs))
    return inputs.keys[-1].copy(), w @ inputs.values


def zip_terms(inputs: MergeInputs) -> tuple[float, float, float]:
    """Return ``(sum p s, sum p, sum p s ln s)`` for the participants."""
    mass = inputs.votes * inputs.scores
    return float(mass.sum()), float(inputs.votes.sum()), float(mass @ np.log(inputs.scores))


def zip_key_scale(inputs: MergeInputs) -> float:
    """Ratio between the ZIP merged key and the score-weighted mean key.

    Equals 1 when all scores coincide; large or negative values mean the
    merged key is far from the participants' span of typical magnitudes.
    """
    total, votes, denom = zip_terms(inputs)
    if abs(denom) < SOLVABILITY_TOL:
        raise DegenerateMergeError(f"sum p s ln s = {denom:.3e} is too close to zero")
    return (np.log(total) - np.log(votes)) * total / denom


def zip_merge(inputs: MergeInputs) -> tuple[np.ndarray, np.ndarray, int]:
    """Zero-perturbation merge with vote accumulation.

    With ``w_i = p_i s_i``::

        v_r = sum(w_i v_i) / sum(w_i)
        k_r = C * sum(w_i k_i),  C = ln(sum(w_i) / sum(p_i)) / sum(w_i ln s_i)
        p_r = sum(p_i)

    If ``s_i = exp(q.k_i / sqrt(d))`` for some query ``q`` then
    ``p_r * exp(q.k_r / sqrt(d)) == sum(w_i)`` and attention under ``q`` is
    unchanged by the merge.
    """
    if len(inputs) < 2:
        raise ValueError("need at least two participants")
    total, votes, denom = zip_terms(inputs)
    if abs(denom) < SOLVABILITY_TOL:
        raise DegenerateMergeError(f"sum p s ln s = {denom:.3e} is too close to zero")
    mass = inputs.votes * inputs.scores
    scale = (np.log(total) - np.log(votes)) / denom
    key = scale * (mass @ inputs.keys)
    value = mass @ inputs.values / total
    return key, value, int(inputs.votes.sum())

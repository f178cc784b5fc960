"""Per-entry attention-score predictors.

The main predictor is an exponential moving average of raw (pre-softmax)
scores with bias correction. Cumulative and sliding-window means are kept as
baselines for comparing prediction error.
"""

from __future__ import annotations

from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

DEFAULT_ALPHA = 0.9
DEFAULT_WINDOW = 8


class UninitializedStateError(ValueError):
    """Raised when an estimate is requested from a state with no scores."""


@dataclass
class EmaState:
    """Smoothed score, number of absorbed scores, and the last few raw scores."""

    smoothed: float = 0.0
    count: int = 0
    window: deque = field(default_factory=lambda: deque(maxlen=DEFAULT_WINDOW))

    def absorb(self, score: float, alpha: float) -> None:
        """In-place version of :func:`ema_update`."""
        if not score > 0.0:
            raise ValueError(f"raw score must be positive, got {score!r}")
        self.smoothed = alpha * self.smoothed + (1.0 - alpha) * score
        self.count += 1
        self.window.append(score)

    def estimate(self, alpha: float) -> float:
        if self.count < 1:
            raise UninitializedStateError("EMA state has not absorbed any score")
        return self.smoothed / (1.0 - alpha**self.count)

    def copy(self) -> EmaState:
        return EmaState(self.smoothed, self.count, deque(self.window, maxlen=self.window.maxlen))


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")


def ema_init_prefill(scores: Sequence[float], alpha: float, window: int = DEFAULT_WINDOW) -> EmaState:
    """Initialise a state from the scores seen over the last prefill steps.

    ``scores`` is chronological (newest last) and holds at most ``window + 1``
    values. The result equals folding :func:`ema_update` over ``scores`` from
    an empty state.
    """
    _check_alpha(alpha)
    if len(scores) == 0:
        raise ValueError("prefill window is empty")
    if len(scores) > window + 1:
        raise ValueError(f"got {len(scores)} prefill scores for window {window}")
    state = EmaState(window=deque(maxlen=window))
    for s in scores:
        state.absorb(float(s), alpha)
    return state


def ema_update(state: EmaState, score: float, alpha: float) -> EmaState:
    """Return a new state with ``score`` absorbed: ``S <- alpha*S + (1-alpha)*s``."""
    _check_alpha(alpha)
    new = state.copy()
    new.absorb(float(score), alpha)
    return new


def ema_estimate(state: EmaState, alpha: float) -> float:
    """Bias-corrected estimate ``S / (1 - alpha**n)`` with ``n`` the absorbed count."""
    return state.estimate(alpha)


def baseline_estimate_cumulative(history: Sequence[float]) -> float:
    """Mean of every observed (normalized) score."""
    if len(history) == 0:
        raise ValueError("empty score history")
    return float(np.mean(history))


def baseline_estimate_window(history: Sequence[float], window: int) -> float:
    """Mean of the last ``window`` raw scores."""
    if len(history) == 0:
        raise ValueError("empty score history")
    if window < 1:
        raise ValueError("window must be positive")
    return float(np.mean(history[-window:]))


def merged_ema(states: Sequence[EmaState], votes: Sequence[int], alpha: float) -> EmaState:
    """Predictor state for an entry formed by merging ``states``.

    The merged estimate is the vote-weighted mean of the participants'
    estimates, so ``sum(votes) * merged == sum(p_i * s_i)``. The absorbed count
    is the largest participant count and the smoothed value is back-solved
    from it. Window buffers are averaged position-wise from the newest end.
    """
    _check_alpha(alpha)
    if len(states) != len(votes) or len(states) == 0:
        raise ValueError("states and votes must be non-empty and aligned")
    estimates = [s.estimate(alpha) for s in states]
    total = float(sum(votes))
    estimate = sum(p * e for p, e in zip(votes, estimates)) / total
    count = max(s.count for s in states)

    depth = min(len(s.window) for s in states)
    maxlen = max((s.window.maxlen or 0) for s in states) or None
    window: deque = deque(maxlen=maxlen)
    if depth:
        rows = np.array([list(s.window)[-depth:] for s in states])
        window.extend((np.asarray(votes, dtype=float) @ rows / total).tolist())
    return EmaState(estimate * (1.0 - alpha**count), count, window)

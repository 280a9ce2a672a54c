"""Dynamic sample filtering on group reward spread.

Groups whose reward standard deviation falls below a running percentile of
recent group spreads are resampled: a low-spread group carries almost no
ranking signal once rewards are normalised within the group.  Every generated
group's spread enters the history, including rejected ones; dropping them
would ratchet the threshold upward without bound.  A finite retry budget with
fallback-accept keeps the trainer making progress.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = ["StdHistory", "Decision", "threshold", "admit"]


class Decision(enum.Enum):
    ACCEPT = "accept"
    RESAMPLE = "resample"


@dataclass
class StdHistory:
    """Ring buffer of recent group reward spreads plus the filter settings."""

    window: int = 200
    percentile: float = 10.0
    warmup_min: int = 20
    max_resamples: int = 5
    values: deque = field(default_factory=deque)

    def __post_init__(self):
        if not 0.0 < self.percentile < 100.0:
            raise ValueError("percentile must lie in (0, 100)")
        if self.window < 1 or self.warmup_min < 1 or self.max_resamples < 0:
            raise ValueError("invalid filter settings")
        self.values = deque(self.values, maxlen=self.window)

    def push(self, group_std: float) -> None:
        self.values.append(float(group_std))

    def __len__(self) -> int:
        return len(self.values)


def threshold(history: StdHistory) -> float | None:
    """Percentile of the buffered spreads, or None while warming up.

    Uses linear interpolation between closest order statistics.
    """
    if len(history) < history.warmup_min:
        return None
    return float(np.percentile(np.fromiter(history.values, dtype=np.float64), history.percentile))


def admit(history: StdHistory, group_std: float, resamples_used: int = 0) -> Decision:
    """Accept or resample one freshly generated group.

    The group's spread is recorded in the history either way.  Resampling
    only triggers while the threshold is active and retry budget remains;
    an exhausted budget falls back to accepting the group.
    """
    cutoff = threshold(history)
    history.push(group_std)
    if cutoff is None or group_std >= cutoff:
        return Decision.ACCEPT
    if resamples_used >= history.max_resamples:
        return Decision.ACCEPT
    return Decision.RESAMPLE

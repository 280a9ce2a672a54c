"""Per-step transition probabilities of the unmasking process.

Given the prediction rows for the masked positions and one step's outcome
(samples, confidences, keep/remask split), three log-probability definitions
are provided for the move to the next canvas:

* ``AR_STYLE``     - product of confidences over every masked position, the
  naive reading that treats each parallel sample as if it were committed.
* ``EXACT``        - product of confidences over the kept positions times,
  for each remasked position, the total probability of sampling any token
  whose probability lies strictly below the smallest kept confidence.  This
  is the true probability of the next canvas under the decoder's selection
  rule, because every remasked sample below that threshold leads to the same
  next state.
* ``UNMASKED_ONLY`` - product of confidences over the kept positions alone,
  a cheaper surrogate that ignores the remasked factor entirely.

``enumerate_next_states`` is the independent check: it walks every joint
sampling, pushes each through the same tie-broken selection the decoder
uses, and accumulates exact next-state probabilities.  On tie-free instances
the ``EXACT`` definition must agree with it to float precision; instances
where a remasked token's probability exactly equals the threshold are tie
cases, which are reported rather than asserted.

Gradients treat the below-threshold token sets and the identity of the
minimum-confidence kept position as locally constant; that is the
almost-everywhere gradient of this piecewise-smooth function, and boundary
configurations are excluded from gradient checks by resampling.
"""

from __future__ import annotations

import enum
import itertools
from typing import NamedTuple

import numpy as np

from . import decoder
from .policy import ProbMatrix

__all__ = [
    "TransitionKind",
    "DegenerateOutcomeError",
    "logprob_ar",
    "logprob_exact",
    "logprob_unmasked",
    "step_logprob",
    "step_logprob_upstream",
    "enumerate_next_states",
    "signature_of_outcome",
    "representative_outcome",
    "oracle_check",
]

MAX_ENUMERATION = 10**6


class TransitionKind(enum.Enum):
    AR_STYLE = "ar"
    EXACT = "exact"
    UNMASKED_ONLY = "unmasked"


class DegenerateOutcomeError(ValueError):
    """A factor of the transition probability is exactly zero.

    Raised when a confidence is 0 or when a remasked position has no token
    mass strictly below the selection threshold (a measure-zero tie
    configuration under continuous prediction rows).
    """


def _check_consistent(probs: ProbMatrix, outcome: "decoder.StepOutcome") -> None:
    if not np.array_equal(probs.positions, outcome.positions):
        raise ValueError("outcome does not belong to this probability matrix")
    if np.any((outcome.sampled < 0) | (outcome.sampled >= probs.num_categories)):
        raise ValueError("sampled token out of range")


def logprob_ar(probs: ProbMatrix, outcome: "decoder.StepOutcome") -> float:
    """Sum of log confidences over all masked positions."""
    _check_consistent(probs, outcome)
    rows = probs.rows
    cs = rows[np.arange(rows.shape[0]), outcome.sampled]
    if np.any(cs == 0.0):
        raise DegenerateOutcomeError("confidence of a sampled token is exactly zero")
    return float(probs.log_rows[np.arange(rows.shape[0]), outcome.sampled].sum())


def logprob_unmasked(probs: ProbMatrix, outcome: "decoder.StepOutcome") -> float:
    """Sum of log confidences over the kept positions only."""
    _check_consistent(probs, outcome)
    idx = np.flatnonzero(outcome.chosen)
    cs = probs.rows[idx, outcome.sampled[idx]]
    if np.any(cs == 0.0):
        raise DegenerateOutcomeError("confidence of a kept token is exactly zero")
    return float(probs.log_rows[idx, outcome.sampled[idx]].sum())


def logprob_exact(probs: ProbMatrix, outcome: "decoder.StepOutcome") -> float:
    """Kept confidences times below-threshold mass at each remasked position.

    The threshold is the minimum confidence among kept positions; tokens with
    probability exactly equal to it are excluded (strict inequality, matching
    the strict comparison in the keep rule).
    """
    _check_consistent(probs, outcome)
    kept = np.flatnonzero(outcome.chosen)
    if kept.size == 0:
        raise ValueError("a step must keep at least one position")
    cs_kept = probs.rows[kept, outcome.sampled[kept]]
    if np.any(cs_kept == 0.0):
        raise DegenerateOutcomeError("confidence of a kept token is exactly zero")
    total = float(probs.log_rows[kept, outcome.sampled[kept]].sum())
    min_cs = cs_kept.min()
    remasked_rows = probs.rows[~outcome.chosen]
    if remasked_rows.size:
        mass = np.where(remasked_rows < min_cs, remasked_rows, 0.0).sum(axis=1)
        if np.any(mass <= 0.0):
            bad = probs.positions[~outcome.chosen][mass <= 0.0]
            raise DegenerateOutcomeError(
                f"remasked positions {bad.tolist()} have no token mass "
                f"strictly below the selection threshold {min_cs!r}"
            )
        total += float(np.log(mass).sum())
    return total


_LOGPROB_FNS = {
    TransitionKind.AR_STYLE: logprob_ar,
    TransitionKind.EXACT: logprob_exact,
    TransitionKind.UNMASKED_ONLY: logprob_unmasked,
}


def step_logprob(kind: TransitionKind, probs: ProbMatrix, outcome) -> float:
    return _LOGPROB_FNS[kind](probs, outcome)


def step_logprob_upstream(
    kind: TransitionKind, probs: ProbMatrix, outcome
) -> tuple[float, np.ndarray]:
    """Step log-prob plus its gradient expressed on the log-probability rows.

    The returned matrix ``u`` satisfies: d(logprob)/d(logit row i) equals the
    softmax backward of ``u`` row i.  For kept positions this is a one-hot at
    the sampled token; for remasked positions under ``EXACT`` it is the row's
    probability mass restricted to the below-threshold set, renormalised by
    that set's total mass (sets held locally constant, see module docstring).
    """
    value = step_logprob(kind, probs, outcome)
    m, k = probs.rows.shape
    upstream = np.zeros((m, k))
    kept = np.flatnonzero(outcome.chosen)
    if kind is TransitionKind.AR_STYLE:
        upstream[np.arange(m), outcome.sampled] = 1.0
    elif kind is TransitionKind.UNMASKED_ONLY:
        upstream[kept, outcome.sampled[kept]] = 1.0
    else:
        upstream[kept, outcome.sampled[kept]] = 1.0
        min_cs = probs.rows[kept, outcome.sampled[kept]].min()
        remasked = ~outcome.chosen
        if remasked.any():
            below_mass = np.where(probs.rows[remasked] < min_cs, probs.rows[remasked], 0.0)
            upstream[remasked] = below_mass / below_mass.sum(axis=1, keepdims=True)
    return value, upstream


class NextState(NamedTuple):
    """Signature of one possible next canvas: kept positions and their tokens."""

    positions: tuple[int, ...]
    values: tuple[int, ...]


def signature_of_outcome(outcome: "decoder.StepOutcome") -> NextState:
    pos = outcome.chosen_positions()
    vals = outcome.chosen_values()
    order = np.argsort(pos)
    return NextState(tuple(int(p) for p in pos[order]), tuple(int(v) for v in vals[order]))


def enumerate_next_states(probs: ProbMatrix, num_to_keep: int) -> dict[NextState, float]:
    """Exact next-state distribution by brute force over all joint samplings.

    Walks every token assignment to the masked positions, applies the same
    confidence selection (including its lowest-index tie-break) the decoder
    applies, and sums joint probabilities by resulting next state.  The
    returned probabilities sum to 1 up to float accumulation error.
    """
    rows = probs.rows
    m, k = rows.shape
    if k**m > MAX_ENUMERATION:
        raise ValueError(f"enumeration of {k}**{m} joint samplings exceeds the guard")
    if num_to_keep > m:
        raise ValueError("cannot keep more positions than are masked")
    out: dict[NextState, float] = {}
    row_idx = np.arange(m)
    for combo in itertools.product(range(k), repeat=m):
        tokens = np.asarray(combo)
        confs = rows[row_idx, tokens]
        joint = float(confs.prod())
        if joint == 0.0:
            continue
        chosen = decoder.cam_select(confs, num_to_keep)
        pos = probs.positions[chosen]
        key = NextState(tuple(int(p) for p in pos), tuple(int(v) for v in tokens[chosen]))
        out[key] = out.get(key, 0.0) + joint
    return out


def representative_outcome(probs: ProbMatrix, signature: NextState) -> "decoder.StepOutcome":
    """Build one outcome realising ``signature``.

    Remasked positions are assigned their least likely token, which on any
    signature reachable by the decoder lies strictly below the selection
    threshold, so the constructed outcome is a valid keep/remask split.
    """
    m = probs.num_rows
    pos_to_row = {int(p): r for r, p in enumerate(probs.positions)}
    sampled = probs.rows.argmin(axis=1).astype(np.int64)
    chosen = np.zeros(m, dtype=bool)
    for p, v in zip(signature.positions, signature.values):
        row = pos_to_row[p]
        sampled[row] = v
        chosen[row] = True
    confidences = probs.rows[np.arange(m), sampled]
    return decoder.StepOutcome(
        sampled=sampled,
        confidences=confidences,
        chosen=chosen,
        positions=probs.positions,
        prob_matrix=probs,
    )


class OracleCheck(NamedTuple):
    enumerated: float
    modeled: float
    abs_diff: float


def oracle_check(probs: ProbMatrix, outcome) -> OracleCheck:
    """Compare the closed-form exact definition against brute-force enumeration."""
    table = enumerate_next_states(probs, outcome.num_chosen)
    enumerated = table.get(signature_of_outcome(outcome), 0.0)
    try:
        modeled = float(np.exp(logprob_exact(probs, outcome)))
    except DegenerateOutcomeError:
        modeled = 0.0
    return OracleCheck(enumerated, modeled, abs(enumerated - modeled))

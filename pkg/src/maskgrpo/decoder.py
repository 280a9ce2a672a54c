"""Iterative parallel-unmasking decoder.

Each iteration samples a token for every masked position, scores each sample
by its own probability (its confidence), keeps the scheduled number of most
confident samples, and remasks the rest.  Confidence ties are broken toward
the lowest canvas index so the selection is a deterministic function of the
confidences; no exploration noise is added to the scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import transition
from .canvas import CanvasState, Prompt, UnmaskSchedule, apply_step
from .policy import PolicyParams, ProbMatrix, policy_forward

__all__ = [
    "StepOutcome",
    "Trajectory",
    "sample_step",
    "cam_select",
    "rollout",
    "rng_for_stream",
    "dump_trajectory",
]


def rng_for_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based stream split: one independent generator per (seed, stream)."""
    return np.random.Generator(np.random.Philox(key=(int(seed) ^ int(stream)) & ((1 << 128) - 1)))


@dataclass(frozen=True)
class StepOutcome:
    """Samples, confidences, and the keep/remask split for one iteration."""

    sampled: np.ndarray
    confidences: np.ndarray
    chosen: np.ndarray
    positions: np.ndarray
    prob_matrix: ProbMatrix | None = field(default=None, compare=False)

    def __post_init__(self):
        m = self.positions.size
        if not (self.sampled.shape == self.confidences.shape == self.chosen.shape == (m,)):
            raise ValueError("per-position fields must align with masked positions")

    @property
    def num_chosen(self) -> int:
        return int(self.chosen.sum())

    def chosen_positions(self) -> np.ndarray:
        return self.positions[self.chosen]

    def chosen_values(self) -> np.ndarray:
        return self.sampled[self.chosen]


@dataclass
class Trajectory:
    """Full decoding rollout: T+1 canvas states plus per-step bookkeeping.

    ``old_logprobs`` carries the log transition probability of each step under
    the policy that generated it, for the chosen probability definition.
    """

    states: list[CanvasState]
    outcomes: list[StepOutcome]
    old_logprobs: np.ndarray
    prompt: Prompt
    kind: "transition.TransitionKind"
    temperature: float
    seed: int
    reward: float = float("nan")

    @property
    def total_steps(self) -> int:
        return len(self.outcomes)

    @property
    def final_state(self) -> CanvasState:
        return self.states[-1]


def sample_step(probs: ProbMatrix, rng: np.random.Generator):
    """Sample every row independently; confidence is the sampled token's probability."""
    rows = probs.rows
    m, k = rows.shape
    u = rng.random(m)
    cum = np.cumsum(rows, axis=1)
    # u is scaled by the row total so slightly-under-1 sums stay unbiased; the
    # >= keeps zero-probability tokens unreachable and the clamp guards the
    # top edge.  Never samples the mask category (rows have width K).
    sampled = np.minimum((u[:, None] * cum[:, -1:] >= cum).sum(axis=1), k - 1)
    confidences = rows[np.arange(m), sampled]
    return sampled.astype(np.int64), confidences


def cam_select(confidences, num_to_keep: int) -> np.ndarray:
    """Boolean keep-mask for the ``num_to_keep`` most confident rows.

    Ties are broken toward the lowest index, making the selection a total
    order even on degenerate (equal-confidence) inputs.
    """
    confidences = np.asarray(confidences, dtype=np.float64)
    if num_to_keep > confidences.size:
        raise ValueError(
            f"cannot keep {num_to_keep} of {confidences.size} candidates"
        )
    order = np.argsort(-confidences, kind="stable")
    chosen = np.zeros(confidences.size, dtype=bool)
    chosen[order[:num_to_keep]] = True
    return chosen


def rollout(
    params: PolicyParams,
    prompt: Prompt,
    schedule: UnmaskSchedule,
    kind: "transition.TransitionKind",
    temperature: float = 1.0,
    seed: int = 0,
    keep_probs: bool = True,
) -> Trajectory:
    """Decode a full canvas and record everything needed to re-score it later."""
    arch = params.arch
    if schedule.total_tokens != arch.length:
        raise ValueError("schedule does not cover the canvas")
    rng = rng_for_stream(seed)
    state = CanvasState.all_masked(arch.length, arch.num_categories)
    states = [state]
    outcomes: list[StepOutcome] = []
    old_logprobs = np.zeros(schedule.total_steps)
    for t, n_t in enumerate(schedule.counts):
        probs = policy_forward(params, state, prompt, temperature)
        sampled, confidences = sample_step(probs, rng)
        chosen = cam_select(confidences, n_t)
        outcome = StepOutcome(
            sampled=sampled,
            confidences=confidences,
            chosen=chosen,
            positions=probs.positions,
            prob_matrix=probs if keep_probs else None,
        )
        old_logprobs[t] = transition.step_logprob(kind, probs, outcome)
        state = apply_step(state, outcome.chosen_positions(), outcome.chosen_values())
        states.append(state)
        outcomes.append(outcome)
    return Trajectory(
        states=states,
        outcomes=outcomes,
        old_logprobs=old_logprobs,
        prompt=prompt,
        kind=kind,
        temperature=temperature,
        seed=seed,
    )


def dump_trajectory(traj: Trajectory, fh) -> None:
    """Line-oriented debug dump of one rollout."""
    for t, outcome in enumerate(traj.outcomes):
        pos = ",".join(map(str, outcome.chosen_positions()))
        vals = ",".join(map(str, outcome.chosen_values()))
        confs = ",".join(f"{c:.6f}" for c in outcome.confidences)
        fh.write(
            f"step={t} chosen_positions=[{pos}] values=[{vals}] "
            f"confidences=[{confs}] logprob={traj.old_logprobs[t]:.6f}\n"
        )
    final = "".join(str(v) for v in traj.final_state.tokens)
    fh.write(f"final={final} reward={traj.reward}\n")

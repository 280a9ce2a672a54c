"""Group-relative policy optimisation over unmasking rollouts.

Each iteration rolls out a group of canvases for one prompt, scores them with
a terminal reward, normalises rewards within the group (mean 0, population
std 1), and ascends a clipped importance-ratio surrogate.  There is no value
network: the group normalisation is the whole baseline.  The importance
ratio of a step is taken on the step's transition probability under the
configured definition, recomputed against the rollout-time value.

Rewards are terminal and broadcast: every step of a trajectory shares the
trajectory's single normalised advantage.

Two cost reducers are available: scoring the surrogate only on a subset of
the steps, and rolling out with fewer unmasking steps during training while
evaluation keeps the full schedule.
"""

from __future__ import annotations

import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import filtering, transition
from .canvas import Prompt, UnmaskSchedule, schedule_cosine, schedule_uniform
from .decoder import Trajectory, rollout
from .policy import (
    PolicyArch,
    PolicyParams,
    init_params,
    policy_forward_cached,
    policy_backward,
)
from .rewards import RewardFn
from .transition import TransitionKind

__all__ = [
    "Reduction",
    "GrpoConfig",
    "Group",
    "AdamState",
    "TrainSetup",
    "TrainResult",
    "METRICS_COLUMNS",
    "group_advantages",
    "kl_step",
    "grpo_loss_and_grad",
    "adam_step",
    "evaluate",
    "train",
]

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "iter",
    "mean_reward",
    "std_reward",
    "filtered_groups",
    "resamples",
    "loss",
    "mean_ratio",
    "clip_frac",
    "mean_kl",
    "grad_norm",
    "wall_ms",
)


class ReductionKind(enum.Enum):
    NONE = "none"
    COMPUTE_SUBSET = "subset"
    UNMASK_REDUCE = "unmask"


@dataclass(frozen=True)
class Reduction:
    """Which steps are scored (subset) or rolled out (reduced schedule)."""

    kind: ReductionKind = ReductionKind.NONE
    start: int = 0
    stop: int = 0
    train_steps: int = 0

    @classmethod
    def none(cls) -> "Reduction":
        return cls()

    @classmethod
    def compute_subset(cls, start: int, stop: int) -> "Reduction":
        if start < 0 or stop <= start:
            raise ValueError("subset range must be nonempty and nonnegative")
        return cls(kind=ReductionKind.COMPUTE_SUBSET, start=start, stop=stop)

    @classmethod
    def unmask_reduce(cls, train_steps: int) -> "Reduction":
        if train_steps < 1:
            raise ValueError("reduced step count must be positive")
        return cls(kind=ReductionKind.UNMASK_REDUCE, train_steps=train_steps)


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 6
    clip_eps: float = 0.2
    kl_beta: float = 0.0
    inner_epochs: int = 1
    learning_rate: float = 1e-3
    adam_beta1: float = 0.95
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gamma: float = 1.0  # stored for the MDP bookkeeping; unused by the update
    kind: TransitionKind = TransitionKind.EXACT
    reduction: Reduction = field(default_factory=Reduction.none)
    temperature: float = 1.0
    iterations: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group size must be at least 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip epsilon must lie in (0, 1)")
        if self.kl_beta < 0.0:
            raise ValueError("KL weight must be nonnegative")
        if self.inner_epochs < 1:
            raise ValueError("inner epochs must be at least 1")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.iterations < 0:
            raise ValueError("iteration count must be nonnegative")


@dataclass
class Group:
    """One prompt's rollouts with their rewards and normalised advantages."""

    prompt: Prompt
    trajectories: list[Trajectory]
    rewards: np.ndarray
    advantages: np.ndarray
    degenerate: bool = False


def group_advantages(rewards) -> tuple[np.ndarray, bool]:
    """Standardise rewards within the group: (r - mean) / population std.

    A spread below 1e-12 yields all-zero advantages and raises the degenerate
    flag: such a group carries no ranking signal.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ValueError("need at least two rewards to normalise")
    mean = rewards.mean()
    std = np.sqrt(((rewards - mean) ** 2).mean())
    if std < 1e-12:
        return np.zeros_like(rewards), True
    return (rewards - mean) / std, False


def kl_step(rows_new: np.ndarray, rows_ref: np.ndarray) -> float:
    """Categorical KL(new || ref) summed over the given rows."""
    rows_new = np.asarray(rows_new, dtype=np.float64)
    rows_ref = np.asarray(rows_ref, dtype=np.float64)
    if rows_new.shape != rows_ref.shape:
        raise ValueError(f"row shapes differ: {rows_new.shape} vs {rows_ref.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        contrib = np.where(rows_new > 0.0, rows_new * (np.log(rows_new) - np.log(rows_ref)), 0.0)
    return float(contrib.sum())


def active_steps(reduction: Reduction, total_steps: int) -> np.ndarray:
    """Step indices of one trajectory that enter the surrogate objective."""
    if reduction.kind is ReductionKind.COMPUTE_SUBSET:
        if reduction.stop > total_steps:
            raise ValueError("subset range exceeds the trajectory")
        return np.arange(reduction.start, reduction.stop)
    return np.arange(total_steps)


def grpo_loss_and_grad(
    groups: list[Group],
    params: PolicyParams,
    ref_params: PolicyParams | None,
    config: GrpoConfig,
    compute_grad: bool = True,
) -> tuple[float, dict]:
    """Surrogate objective and its gradient, accumulated into ``params.grads``.

    For every active step the step log-probability is recomputed under the
    current parameters with the recorded samples and keep/remask split held
    fixed; the ratio against the rollout-time value enters the clipped
    surrogate.  The accumulated gradient is of the negated objective so a
    minimising optimiser performs ascent.  Rollout-time log-probs ride with
    the trajectories.  ``compute_grad=False`` evaluates the objective only,
    for finite-difference probes.
    """
    if config.kl_beta > 0.0 and ref_params is None:
        raise ValueError("reference parameters required when the KL weight is positive")
    total_terms = 0
    objective = 0.0
    ratio_sum = 0.0
    clipped_count = 0
    kl_sum = 0.0
    lo, hi = 1.0 - config.clip_eps, 1.0 + config.clip_eps
    n_groups = len(groups)
    for group in groups:
        n_traj = len(group.trajectories)
        for j, traj in enumerate(group.trajectories):
            adv = float(group.advantages[j])
            steps = active_steps(config.reduction, traj.total_steps)
            norm = 1.0 / (n_groups * n_traj * steps.size)
            for t in steps:
                outcome = traj.outcomes[t]
                probs, cache = policy_forward_cached(
                    params, traj.states[t], traj.prompt, traj.temperature
                )
                if compute_grad:
                    new_logp, upstream = transition.step_logprob_upstream(
                        traj.kind, probs, outcome
                    )
                else:
                    new_logp, upstream = transition.step_logprob(traj.kind, probs, outcome), None
                ratio = float(np.exp(new_logp - traj.old_logprobs[t]))
                if not np.isfinite(ratio):
                    raise FloatingPointError(
                        f"non-finite importance ratio at trajectory {j}, step {t}"
                    )
                unclipped = ratio * adv
                clipped = min(max(ratio, lo), hi) * adv
                term = min(unclipped, clipped)
                coef = adv * ratio if unclipped <= clipped else 0.0
                kl = 0.0
                kl_up = None
                if config.kl_beta > 0.0:
                    ref_probs = policy_forward_cached(
                        ref_params, traj.states[t], traj.prompt, traj.temperature
                    )[0]
                    idx = np.flatnonzero(outcome.chosen)
                    kl = kl_step(probs.rows[idx], ref_probs.rows[idx])
                    if compute_grad:
                        kl_up = np.zeros_like(upstream)
                        kl_up[idx] = probs.rows[idx] * (
                            probs.log_rows[idx] - ref_probs.log_rows[idx]
                        )
                    term -= config.kl_beta * kl
                objective += norm * term
                ratio_sum += ratio
                clipped_count += int(ratio < lo or ratio > hi)
                kl_sum += kl
                total_terms += 1
                if not compute_grad:
                    continue
                # Gradient of the negated objective.
                back = (-norm * coef) * upstream
                if kl_up is not None:
                    back += (norm * config.kl_beta) * kl_up
                policy_backward(
                    params, traj.states[t], traj.prompt, traj.temperature, back, cache=cache
                )
    stats = {
        "mean_ratio": ratio_sum / total_terms if total_terms else 0.0,
        "clip_frac": clipped_count / total_terms if total_terms else 0.0,
        "mean_kl": kl_sum / total_terms if total_terms else 0.0,
    }
    return objective, stats


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0

    @classmethod
    def for_params(cls, params: PolicyParams) -> "AdamState":
        return cls(m=np.zeros_like(params.params), v=np.zeros_like(params.params))


def adam_step(params: PolicyParams, state: AdamState, config: GrpoConfig) -> None:
    """One Adam update on the accumulated gradient; grads are zeroed after."""
    g = params.grads
    state.step_count += 1
    state.m = config.adam_beta1 * state.m + (1.0 - config.adam_beta1) * g
    state.v = config.adam_beta2 * state.v + (1.0 - config.adam_beta2) * g * g
    m_hat = state.m / (1.0 - config.adam_beta1**state.step_count)
    v_hat = state.v / (1.0 - config.adam_beta2**state.step_count)
    params.params -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    params.zero_grads()


# Stream tags keep prompt sampling, rollouts, and evaluation on disjoint
# generator keys for one experiment seed.
_TAG_PROMPT = 1 << 56
_TAG_ROLLOUT = 2 << 56
_TAG_EVAL = 3 << 56


def _rollout_stream(iteration: int, attempt: int, member: int) -> int:
    return _TAG_ROLLOUT | (iteration << 24) | (attempt << 16) | member


@dataclass
class TrainSetup:
    """Everything the trainer needs beyond the optimisation config."""

    config: GrpoConfig
    arch: PolicyArch
    reward_fn: RewardFn
    prompt_sampler: Callable[[np.random.Generator], Prompt]
    schedule_kind: str = "cosine"
    total_steps: int = 8
    filter_settings: filtering.StdHistory | None = None
    threads: int = 1
    eval_rollouts: int = 0

    def schedule_for(self, steps: int) -> UnmaskSchedule:
        builder = {"cosine": schedule_cosine, "uniform": schedule_uniform}[self.schedule_kind]
        return builder(steps, self.arch.length)


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list[dict]
    eval_rewards: np.ndarray


def _roll_group(
    params: PolicyParams,
    prompt: Prompt,
    schedule: UnmaskSchedule,
    config: GrpoConfig,
    seeds: list[int],
    threads: int,
) -> list[Trajectory]:
    def one(seed: int) -> Trajectory:
        return rollout(
            params,
            prompt,
            schedule,
            config.kind,
            temperature=config.temperature,
            seed=seed,
            keep_probs=False,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, seeds))
    return [one(s) for s in seeds]


def evaluate(
    params: PolicyParams,
    prompt: Prompt,
    schedule: UnmaskSchedule,
    config: GrpoConfig,
    reward_fn: RewardFn,
    num_rollouts: int,
    seed_base: int,
) -> np.ndarray:
    """Rewards of fresh rollouts on the given (typically full) schedule."""
    out = np.zeros(num_rollouts)
    for i in range(num_rollouts):
        traj = rollout(
            params,
            prompt,
            schedule,
            config.kind,
            temperature=config.temperature,
            seed=seed_base ^ (_TAG_EVAL | i),
            keep_probs=False,
        )
        out[i] = reward_fn(traj.final_state, prompt)
    return out


def train(
    setup: TrainSetup,
    init: PolicyParams | None = None,
    on_metrics: Callable[[dict, PolicyParams], None] | None = None,
) -> TrainResult:
    """Run the full training loop and return final parameters plus metrics.

    One group per iteration: sample a prompt, roll out ``group_size``
    trajectories (on the reduced schedule when configured), score, filter on
    reward spread, normalise, then take ``inner_epochs`` surrogate/optimiser
    steps.  Exhausting the resample budget logs a warning and falls back to
    the last group.
    """
    config = setup.config
    full_schedule = setup.schedule_for(setup.total_steps)
    if config.reduction.kind is ReductionKind.UNMASK_REDUCE:
        train_schedule = setup.schedule_for(config.reduction.train_steps)
    else:
        train_schedule = full_schedule
    if config.reduction.kind is ReductionKind.COMPUTE_SUBSET:
        active_steps(config.reduction, train_schedule.total_steps)  # validate range

    params = init.copy() if init is not None else init_params(setup.arch, config.seed)
    ref_params = params.copy() if config.kl_beta > 0.0 else None
    opt = AdamState.for_params(params)
    history = setup.filter_settings or filtering.StdHistory()
    metrics: list[dict] = []

    for it in range(config.iterations):
        t0 = time.perf_counter()
        prompt = setup.prompt_sampler(
            np.random.Generator(np.random.Philox(key=config.seed ^ (_TAG_PROMPT | it)))
        )
        attempt = 0
        filtered = 0
        resamples = 0
        while True:
            seeds = [
                config.seed ^ _rollout_stream(it, attempt, j)
                for j in range(config.group_size)
            ]
            trajs = _roll_group(params, prompt, train_schedule, config, seeds, setup.threads)
            rewards = np.array([setup.reward_fn(tr.final_state, prompt) for tr in trajs])
            for tr, r in zip(trajs, rewards):
                tr.reward = float(r)
            std = float(np.sqrt(((rewards - rewards.mean()) ** 2).mean()))
            cutoff = filtering.threshold(history)
            below = cutoff is not None and std < cutoff
            decision = filtering.admit(history, std, attempt)
            filtered += int(below)
            if decision is filtering.Decision.RESAMPLE:
                resamples += 1
                attempt += 1
                continue
            if below:
                log.warning(
                    "iteration %d: resample budget exhausted, accepting group with std %.3g",
                    it,
                    std,
                )
            break

        advantages, degenerate = group_advantages(rewards)
        group = Group(
            prompt=prompt,
            trajectories=trajs,
            rewards=rewards,
            advantages=advantages,
            degenerate=degenerate,
        )
        objective = 0.0
        stats = {"mean_ratio": 0.0, "clip_frac": 0.0, "mean_kl": 0.0}
        grad_norm = 0.0
        for _ in range(config.inner_epochs):
            params.zero_grads()
            objective, stats = grpo_loss_and_grad([group], params, ref_params, config)
            grad_norm = float(np.linalg.norm(params.grads))
            adam_step(params, opt, config)

        row = {
            "iter": it,
            "mean_reward": float(rewards.mean()),
            "std_reward": std,
            "filtered_groups": filtered,
            "resamples": resamples,
            "loss": objective,
            "mean_ratio": stats["mean_ratio"],
            "clip_frac": stats["clip_frac"],
            "mean_kl": stats["mean_kl"],
            "grad_norm": grad_norm,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        metrics.append(row)
        if on_metrics is not None:
            on_metrics(row, params)

    eval_rewards = np.zeros(0)
    if setup.eval_rollouts > 0:
        prompt = setup.prompt_sampler(
            np.random.Generator(np.random.Philox(key=config.seed ^ _TAG_PROMPT))
        )
        eval_rewards = evaluate(
            params,
            prompt,
            full_schedule,
            config,
            setup.reward_fn,
            setup.eval_rollouts,
            config.seed,
        )
    return TrainResult(params=params, metrics=metrics, eval_rewards=eval_rewards)

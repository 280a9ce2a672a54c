"""Experiment harness: config files, CLI entry point, verification suites.

Config files are flat ``key=value`` text, one key per line, ``#`` comments.
Unknown keys are errors; missing keys take the documented defaults.  The CLI
exposes training, sampling from a checkpoint, the transition-probability
oracle comparison, finite-difference gradient checks, and the
discrete-diffusion property suite.  Exit codes: 0 ok, 1 a verification
assertion failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from collections import Counter
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from . import discrete_diffusion as dd
from . import filtering, grpo, transition
from .canvas import CanvasState, Prompt, TaskKind, apply_step, schedule_cosine, schedule_uniform
from .decoder import StepOutcome, cam_select, dump_trajectory, rollout, sample_step
from .policy import (
    CheckpointError,
    PolicyArch,
    PolicyParams,
    init_params,
    load_checkpoint,
    policy_forward,
    policy_backward,
    save_checkpoint,
)
from .rewards import reward_fn_for
from .transition import TransitionKind

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "run_verify",
    "run_gradcheck",
    "run_d3pm_suite",
    "cmd_train",
    "cmd_sample",
    "cmd_verify",
    "cmd_gradcheck",
    "cmd_d3pm",
    "main",
]


class ConfigError(Exception):
    pass


_TRANSITION_NAMES = {
    "ar": TransitionKind.AR_STYLE,
    "exact": TransitionKind.EXACT,
    "unmasked": TransitionKind.UNMASKED_ONLY,
}


@dataclass
class ExperimentConfig:
    canvas_n: int = 16
    canvas_k: int = 4
    hidden: int = 64
    embed: int = 16
    schedule: str = "cosine"
    steps: int = 8
    train_steps: int = 0  # 0 = train on the full schedule
    temperature: float = 1.0
    transition: str = "exact"
    group_size: int = 6
    clip_eps: float = 0.2
    kl_beta: float = 0.0
    inner_epochs: int = 1
    learning_rate: float = 1e-3
    adam_beta1: float = 0.95
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gamma: float = 1.0
    reduction: str = "none"
    subset_start: int = 0
    subset_stop: int = 0
    iterations: int = 200
    seed: int = 0
    reward: str = "pattern"
    reward_target: str = ""  # comma-separated tokens; empty = i mod K
    reward_value: int = 0
    reward_count: int = -1  # -1 = N // 2
    filter_window: int = 200
    filter_q: float = 10.0
    filter_warmup: int = 20
    filter_max_resamples: int = 5
    out_dir: str = "runs"
    checkpoint_every: int = 0
    eval_rollouts: int = 16
    threads: int = 1

    def arch(self) -> PolicyArch:
        return PolicyArch(
            length=self.canvas_n,
            num_categories=self.canvas_k,
            hidden=self.hidden,
            embed=self.embed,
        )

    def reduction_obj(self) -> grpo.Reduction:
        if self.reduction == "none":
            return grpo.Reduction.none()
        if self.reduction == "subset":
            return grpo.Reduction.compute_subset(self.subset_start, self.subset_stop)
        return grpo.Reduction.unmask_reduce(self.train_steps)

    def grpo_config(self) -> grpo.GrpoConfig:
        return grpo.GrpoConfig(
            group_size=self.group_size,
            clip_eps=self.clip_eps,
            kl_beta=self.kl_beta,
            inner_epochs=self.inner_epochs,
            learning_rate=self.learning_rate,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            gamma=self.gamma,
            kind=_TRANSITION_NAMES[self.transition],
            reduction=self.reduction_obj(),
            temperature=self.temperature,
            iterations=self.iterations,
            seed=self.seed,
        )

    def target_tokens(self) -> tuple[int, ...]:
        if not self.reward_target:
            return tuple(i % self.canvas_k for i in range(self.canvas_n))
        return tuple(int(v) for v in self.reward_target.split(","))

    def prompt(self) -> Prompt:
        if self.reward == "pattern":
            return Prompt.pattern_match(self.target_tokens(), self.canvas_k, self.embed)
        count = self.reward_count if self.reward_count >= 0 else self.canvas_n // 2
        return Prompt.token_count(
            self.reward_value, count, self.canvas_n, self.canvas_k, self.embed
        )

    def filter_history(self) -> filtering.StdHistory:
        return filtering.StdHistory(
            window=self.filter_window,
            percentile=self.filter_q,
            warmup_min=self.filter_warmup,
            max_resamples=self.filter_max_resamples,
        )

    def train_setup(self) -> grpo.TrainSetup:
        prompt = self.prompt()
        kind = TaskKind.PATTERN_MATCH if self.reward == "pattern" else TaskKind.TOKEN_COUNT
        return grpo.TrainSetup(
            config=self.grpo_config(),
            arch=self.arch(),
            reward_fn=reward_fn_for(kind),
            prompt_sampler=lambda rng: prompt,
            schedule_kind=self.schedule,
            total_steps=self.steps,
            filter_settings=self.filter_history(),
            threads=self.threads,
            eval_rollouts=self.eval_rollouts,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_CHOICES = {
    "schedule": ("cosine", "uniform"),
    "transition": tuple(_TRANSITION_NAMES),
    "reduction": ("none", "subset", "unmask"),
    "reward": ("pattern", "count"),
}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if key in _CHOICES and raw not in _CHOICES[key]:
        raise ValueError(f"must be one of {', '.join(_CHOICES[key])}")
    return raw


def _validate(cfg: ExperimentConfig) -> None:
    checks = [
        (cfg.canvas_n >= 1, "canvas_n must be >= 1"),
        (cfg.canvas_k >= 2, "canvas_k must be >= 2"),
        (1 <= cfg.steps <= cfg.canvas_n, "steps must satisfy 1 <= T <= canvas_n"),
        (
            cfg.train_steps == 0 or 1 <= cfg.train_steps <= cfg.steps,
            "train_steps must satisfy 1 <= T_train <= steps",
        ),
        (
            cfg.reduction != "unmask" or cfg.train_steps >= 1,
            "reduction=unmask requires train_steps",
        ),
        (
            cfg.reduction == "unmask" or cfg.train_steps == 0,
            "train_steps is only meaningful with reduction=unmask",
        ),
        (
            cfg.reduction != "subset"
            or (0 <= cfg.subset_start < cfg.subset_stop <= cfg.steps),
            "subset range must satisfy 0 <= start < stop <= steps",
        ),
        (cfg.threads >= 1, "threads must be >= 1"),
        (cfg.eval_rollouts >= 0, "eval_rollouts must be >= 0"),
        (cfg.checkpoint_every >= 0, "checkpoint_every must be >= 0"),
    ]
    if cfg.reward == "pattern" and cfg.reward_target:
        target = cfg.target_tokens()
        checks.append((len(target) == cfg.canvas_n, "reward_target length must equal canvas_n"))
        checks.append(
            (
                all(0 <= v < cfg.canvas_k for v in target),
                "reward_target tokens must lie in [0, canvas_k)",
            )
        )
    if cfg.reward == "count":
        checks.append(
            (0 <= cfg.reward_value < cfg.canvas_k, "reward_value must lie in [0, canvas_k)")
        )
        checks.append(
            (
                cfg.reward_count == -1 or 0 <= cfg.reward_count <= cfg.canvas_n,
                "reward_count must lie in [0, canvas_n]",
            )
        )
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    # Surface the range checks of the derived objects too.
    cfg.grpo_config()
    cfg.filter_history()
    cfg.prompt()


def parse_config(path: str) -> ExperimentConfig:
    """Read a key=value config file with line-accurate diagnostics."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = ExperimentConfig()
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {text!r}")
        key, _, raw = text.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            setattr(cfg, key, _convert(key, raw))
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: invalid value for {key}: {exc}") from exc
    try:
        _validate(cfg)
    except (ConfigError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def cmd_train(config_path: str, out_override: str | None = None) -> int:
    cfg = parse_config(config_path)
    out_dir = out_override or os.environ.get("MASKGRPO_OUT") or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    setup = cfg.train_setup()
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(grpo.METRICS_COLUMNS)

        def on_metrics(row: dict, params: PolicyParams) -> None:
            writer.writerow(_fmt(row[c]) for c in grpo.METRICS_COLUMNS)
            fh.flush()
            if cfg.checkpoint_every and (row["iter"] + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(params, os.path.join(out_dir, f"ckpt_{row['iter'] + 1:06d}.ckpt"))

        result = grpo.train(setup, on_metrics=on_metrics)
    final_path = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(result.params, final_path)
    if result.metrics:
        last = result.metrics[-1]
        print(f"trained {len(result.metrics)} iterations, final mean reward {last['mean_reward']:.4f}")
    if result.eval_rewards.size:
        print(
            f"evaluation on the full {cfg.steps}-step schedule: "
            f"mean reward {result.eval_rewards.mean():.4f} over {result.eval_rewards.size} rollouts"
        )
    print(f"metrics: {csv_path}")
    print(f"checkpoint: {final_path}")
    return 0


def _parse_prompt_spec(spec: str, arch: PolicyArch) -> Prompt:
    kind, _, rest = spec.partition(":")
    if kind == "pattern":
        target = tuple(int(v) for v in rest.split(","))
        if len(target) != arch.length:
            raise ConfigError(
                f"pattern prompt needs {arch.length} tokens, got {len(target)}"
            )
        return Prompt.pattern_match(target, arch.num_categories, arch.embed)
    if kind == "count":
        parts = rest.split(",")
        if len(parts) != 2:
            raise ConfigError("count prompt spec must be count:VALUE,TARGET")
        return Prompt.token_count(
            int(parts[0]), int(parts[1]), arch.length, arch.num_categories, arch.embed
        )
    raise ConfigError(f"unknown prompt kind {kind!r} (expected pattern: or count:)")


def cmd_sample(
    ckpt_path: str,
    prompt_spec: str,
    count: int,
    steps: int = 0,
    schedule: str = "cosine",
    kind: str = "unmasked",
    temperature: float = 1.0,
    seed: int = 0,
    out=None,
) -> int:
    out = out or sys.stdout
    params = load_checkpoint(ckpt_path)
    arch = params.arch
    prompt = _parse_prompt_spec(prompt_spec, arch)
    total_steps = steps or min(8, arch.length)
    builder = schedule_cosine if schedule == "cosine" else schedule_uniform
    sched = builder(total_steps, arch.length)
    tkind = _TRANSITION_NAMES[kind]
    freq: Counter = Counter()
    for i in range(count):
        traj = rollout(
            params,
            prompt,
            sched,
            tkind,
            temperature=temperature,
            seed=seed ^ ((4 << 56) | i),
            keep_probs=False,
        )
        if i < 5:
            out.write(f"--- rollout {i} ---\n")
            dump_trajectory(traj, out)
        freq["".join(map(str, traj.final_state.tokens))] += 1
    out.write(f"--- canvas frequencies over {count} rollouts ---\n")
    for canvas, n in sorted(freq.items(), key=lambda kv: (-kv[1], kv[0])):
        out.write(f"{canvas} {n} {n / count:.4f}\n")
    return 0


class VerifyReport(NamedTuple):
    trials: int
    worst_oracle_diff: float
    worst_enum_sum_diff: float
    worst_model_sum_diff: float
    ordering_violations: int
    skipped_ties: int

    @property
    def passed(self) -> bool:
        return (
            self.worst_oracle_diff < 1e-10
            and self.worst_enum_sum_diff < 1e-10
            and self.worst_model_sum_diff < 1e-10
            and self.ordering_violations == 0
        )


def _random_prob_rows(rng: np.random.Generator, m: int, k: int) -> np.ndarray:
    raw = rng.gamma(shape=1.0, scale=1.0, size=(m, k)) + 1e-6
    return raw / raw.sum(axis=1, keepdims=True)


def run_verify(trials: int, seed: int) -> VerifyReport:
    """Randomised oracle comparison for the transition-probability definitions.

    Per trial: random prediction rows, a sampled outcome, then (a) the exact
    definition against brute-force enumeration, (b) enumeration and model
    normalisation, (c) the AR <= exact <= kept-only ordering chain.  Tie
    instances (exact float equality at the threshold) are skipped, not
    asserted.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    worst_oracle = worst_enum_sum = worst_model_sum = 0.0
    violations = 0
    skipped = 0
    for _ in range(trials):
        m = int(rng.integers(1, 5))
        k = int(rng.integers(2, 5))
        n_keep = int(rng.integers(1, min(2, m) + 1))
        probs = transition.ProbMatrix.from_rows(_random_prob_rows(rng, m, k))
        sampled, confs = sample_step(probs, rng)
        chosen = cam_select(confs, n_keep)
        outcome = StepOutcome(
            sampled=sampled, confidences=confs, chosen=chosen, positions=probs.positions
        )
        min_cs = confs[chosen].min()
        if not np.all(chosen) and np.any(probs.rows[~chosen] == min_cs):
            skipped += 1
            continue
        check = transition.oracle_check(probs, outcome)
        worst_oracle = max(worst_oracle, check.abs_diff)
        table = transition.enumerate_next_states(probs, n_keep)
        worst_enum_sum = max(worst_enum_sum, abs(sum(table.values()) - 1.0))
        model_sum = 0.0
        for sig in table:
            rep = transition.representative_outcome(probs, sig)
            model_sum += float(np.exp(transition.logprob_exact(probs, rep)))
        worst_model_sum = max(worst_model_sum, abs(model_sum - 1.0))
        lp_ar = transition.logprob_ar(probs, outcome)
        lp_exact = transition.logprob_exact(probs, outcome)
        lp_kept = transition.logprob_unmasked(probs, outcome)
        # 1e-12 slack absorbs the different float paths of equal-value cases.
        if not (lp_ar <= lp_exact + 1e-12 and lp_exact <= lp_kept + 1e-12):
            violations += 1
        if np.all(chosen) and not (lp_ar == lp_exact == lp_kept):
            violations += 1
    return VerifyReport(
        trials=trials,
        worst_oracle_diff=worst_oracle,
        worst_enum_sum_diff=worst_enum_sum,
        worst_model_sum_diff=worst_model_sum,
        ordering_violations=violations,
        skipped_ties=skipped,
    )


class GradcheckReport(NamedTuple):
    trials: int
    worst_rel_err: float
    clip_fraction: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_err < 1e-4


def _grad_mismatch(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst per-coordinate error: relative where meaningful, absolute near zero."""
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(denom > 0, diff / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.where(diff <= 1e-8, 0.0, rel).max(initial=0.0))


def _fd_gradient(fn, params: PolicyParams, step: float) -> np.ndarray:
    base = params.params.copy()
    grad = np.zeros_like(base)
    for i in range(base.size):
        params.params[i] = base[i] + step
        hi = fn()
        params.params[i] = base[i] - step
        lo = fn()
        params.params[i] = base[i]
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


def _random_logprob_instance(rng: np.random.Generator):
    """Generic (params, state, prompt, outcome) away from selection boundaries."""
    k = int(rng.integers(2, 5))
    n = int(rng.integers(2, 6))
    arch = PolicyArch(length=n, num_categories=k, hidden=6, embed=4)
    while True:
        params = init_params(arch, seed=int(rng.integers(2**32)))
        params.params += rng.normal(scale=0.1, size=params.params.shape)
        prompt = Prompt.pattern_match(rng.integers(0, k, size=n), k, 4)
        state = CanvasState.all_masked(n, k)
        reveal = int(rng.integers(0, n))  # leave at least one position masked
        if reveal:
            pos = rng.choice(n, size=reveal, replace=False)
            state = apply_step(state, pos, rng.integers(0, k, size=reveal))
        temperature = 0.5 + rng.random()
        probs = policy_forward(params, state, prompt, temperature)
        sampled, confs = sample_step(probs, rng)
        m = probs.num_rows
        n_keep = int(rng.integers(1, m + 1))
        chosen = cam_select(confs, n_keep)
        outcome = StepOutcome(
            sampled=sampled, confidences=confs, chosen=chosen, positions=probs.positions
        )
        kept_confs = np.sort(confs[chosen])
        min_cs = kept_confs[0]
        margin = 1e-5
        if kept_confs.size > 1 and kept_confs[1] - kept_confs[0] < margin:
            continue  # ambiguous threshold identity
        remasked_rows = probs.rows[~chosen]
        if np.any(np.abs(remasked_rows - min_cs) < margin):
            continue  # token mass too close to the threshold
        below_mass = np.where(remasked_rows < min_cs, remasked_rows, 0.0).sum(axis=1)
        if remasked_rows.size and np.any(below_mass < margin):
            continue  # nearly-empty below-threshold mass
        return params, state, prompt, temperature, outcome


def run_gradcheck(trials: int, seed: int, step: float = 1e-6) -> GradcheckReport:
    """Central finite differences against the analytic gradients.

    Checks every parameter coordinate of each step log-probability definition
    on random instances, then the full clipped surrogate objective with the
    KL weight at 0 and 0.5.  Boundary configurations (kept-confidence ties,
    token mass at the threshold, ratios at the clip edges) are resampled
    away: the gradients are defined almost everywhere and the checks probe
    generic points.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    worst = 0.0
    clipped_terms = 0
    total_terms = 0
    for kind in TransitionKind:
        for _ in range(trials):
            params, state, prompt, temperature, outcome = _random_logprob_instance(rng)
            _, upstream = transition.step_logprob_upstream(
                kind, policy_forward(params, state, prompt, temperature), outcome
            )
            params.zero_grads()
            policy_backward(params, state, prompt, temperature, upstream)
            analytic = params.grads.copy()

            def value() -> float:
                return transition.step_logprob(
                    kind, policy_forward(params, state, prompt, temperature), outcome
                )

            numeric = _fd_gradient(value, params, step)
            worst = max(worst, _grad_mismatch(analytic, numeric))

    for beta in (0.0, 0.5):
        for _ in range(trials):
            group, params, ref_params, config = _random_objective_instance(rng, beta)
            params.zero_grads()
            _, stats = grpo.grpo_loss_and_grad([group], params, ref_params, config)
            analytic = -params.grads.copy()  # accumulated gradient is of -objective
            clipped_terms += round(
                stats["clip_frac"] * config.group_size * group.trajectories[0].total_steps
            )
            total_terms += config.group_size * group.trajectories[0].total_steps

            def objective() -> float:
                value, _ = grpo.grpo_loss_and_grad(
                    [group], params, ref_params, config, compute_grad=False
                )
                return value

            numeric = _fd_gradient(objective, params, step=1e-5)
            worst = max(worst, _grad_mismatch(analytic, numeric))
    return GradcheckReport(
        trials=trials,
        worst_rel_err=worst,
        clip_fraction=clipped_terms / total_terms if total_terms else 0.0,
    )


def _random_objective_instance(rng: np.random.Generator, beta: float):
    """Frozen rollout batch at a generic point of the surrogate objective."""
    from .grpo import Group, GrpoConfig, group_advantages

    k, n, t, g = 3, 4, 2, 3
    arch = PolicyArch(length=n, num_categories=k, hidden=4, embed=2)
    kind = list(TransitionKind)[int(rng.integers(0, 3))]
    config = GrpoConfig(
        group_size=g,
        kl_beta=beta,
        kind=kind,
        temperature=0.5 + rng.random(),
        seed=int(rng.integers(2**32)),
    )
    sched = schedule_cosine(t, n)
    while True:
        params = init_params(arch, seed=int(rng.integers(2**32)))
        params.params += rng.normal(scale=0.1, size=params.params.shape)
        ref_params = None
        if beta > 0.0:
            ref_params = params.copy()
            ref_params.params += rng.normal(scale=0.1, size=ref_params.params.shape)
        prompt = Prompt.pattern_match(rng.integers(0, k, size=n), k, arch.embed)
        trajs = [
            rollout(
                params,
                prompt,
                sched,
                config.kind,
                temperature=config.temperature,
                seed=int(rng.integers(2**63)),
            )
            for _ in range(g)
        ]
        # Jittered rollout-time log-probs spread the ratios so the clip branch
        # is exercised; they are constants of the objective either way.
        for traj in trajs:
            traj.old_logprobs = traj.old_logprobs + rng.normal(scale=0.25, size=t)
        rewards = rng.random(g)
        advantages, _ = group_advantages(rewards)
        group = Group(
            prompt=prompt,
            trajectories=trajs,
            rewards=rewards,
            advantages=advantages,
        )
        if _objective_is_generic(group, params, config):
            return group, params, ref_params, config


def _objective_is_generic(group, params, config) -> bool:
    margin = 1e-3
    lo, hi = 1.0 - config.clip_eps, 1.0 + config.clip_eps
    for traj in group.trajectories:
        for t, outcome in enumerate(traj.outcomes):
            probs = policy_forward(params, traj.states[t], traj.prompt, traj.temperature)
            kept = np.flatnonzero(outcome.chosen)
            confs = np.sort(probs.rows[kept, outcome.sampled[kept]])
            if confs.size > 1 and confs[1] - confs[0] < 1e-5:
                return False
            if np.any(np.abs(probs.rows[~outcome.chosen] - confs[0]) < 1e-5):
                return False
            try:
                new_logp = transition.step_logprob(traj.kind, probs, outcome)
            except transition.DegenerateOutcomeError:
                return False
            ratio = float(np.exp(new_logp - traj.old_logprobs[t]))
            if abs(ratio - lo) < margin or abs(ratio - hi) < margin:
                return False
    return True


class D3pmReport(NamedTuple):
    worst_row_sum: float
    worst_marginal_diff: float
    worst_posterior_diff: float
    min_elbo_term: float
    worst_true_posterior_elbo: float

    @property
    def passed(self) -> bool:
        return (
            self.worst_row_sum <= 1e-12
            and self.worst_marginal_diff <= 1e-12
            and self.worst_posterior_diff <= 1e-12
            and self.min_elbo_term >= -1e-15
            and self.worst_true_posterior_elbo <= 1e-12
        )


def run_d3pm_suite(seed: int = 0) -> D3pmReport:
    """Property suite for the discrete-diffusion companion module."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    builders = {
        dd.MatrixKind.UNIFORM: dd.build_uniform_q,
        dd.MatrixKind.ABSORBING: dd.build_absorbing_q,
    }
    worst_row = 0.0
    worst_marg = 0.0
    worst_post = 0.0
    min_term = np.inf
    worst_true_elbo = 0.0
    for kind in dd.MatrixKind:
        for _ in range(20):
            num_states = int(rng.integers(2, 5))
            steps = int(rng.integers(1, 65))
            rates = rng.uniform(0.0, 1.0, size=steps)
            cum = np.eye(num_states)
            for rate in rates:
                q = builders[kind](num_states, rate).q
                worst_row = max(worst_row, float(np.abs(q.sum(axis=1) - 1.0).max()))
                cum = cum @ q
                worst_row = max(worst_row, float(np.abs(cum.sum(axis=1) - 1.0).max()))
            if kind is dd.MatrixKind.ABSORBING:
                survive = float(np.prod(1.0 - rates))
                for x0 in range(num_states - 1):
                    closed = np.zeros(num_states)
                    closed[x0] = survive
                    closed[-1] = 1.0 - survive
                    marg = dd.forward_marginal(x0, num_states, rates, kind)
                    worst_marg = max(worst_marg, float(np.abs(marg - closed).max()))
    for kind in dd.MatrixKind:
        for _ in range(10):
            num_states = int(rng.integers(2, 5))
            max_steps = int(np.floor(np.log(10**4) / np.log(num_states)))
            steps = int(rng.integers(1, max_steps + 1))
            rates = rng.uniform(0.05, 0.95, size=steps)
            q_t = builders[kind](num_states, rates[-1])
            qbar_prev = dd.cumulative_q(num_states, rates[:-1], kind)
            marg = dd.forward_marginal(0, num_states, rates, kind)
            for x_t in range(num_states):
                if marg[x_t] <= 0.0:
                    continue
                fast = dd.reverse_posterior(x_t, 0, q_t, qbar_prev)
                slow = dd.reverse_posterior_enumerated(x_t, 0, num_states, rates, kind)
                worst_post = max(worst_post, float(np.abs(fast - slow).max()))
    for kind in dd.MatrixKind:
        for _ in range(5):
            num_states = int(rng.integers(2, 4))
            steps = int(rng.integers(1, 4))
            rates = rng.uniform(0.1, 0.9, size=steps)
            x0 = int(rng.integers(0, num_states - 1 if kind is dd.MatrixKind.ABSORBING else num_states))
            true_pred = np.zeros((steps, num_states, num_states))
            true_pred[:, :, x0] = 1.0
            terms, total = dd.elbo_terms(x0, num_states, rates, kind, true_pred)
            worst_true_elbo = max(worst_true_elbo, abs(total))
            noisy = rng.dirichlet(np.ones(num_states), size=(steps, num_states))
            terms, _ = dd.elbo_terms(x0, num_states, rates, kind, noisy)
            min_term = min(min_term, float(terms.min()))
    return D3pmReport(
        worst_row_sum=worst_row,
        worst_marginal_diff=worst_marg,
        worst_posterior_diff=worst_post,
        min_elbo_term=float(min_term),
        worst_true_posterior_elbo=worst_true_elbo,
    )


def cmd_verify(trials: int, seed: int, out=None) -> int:
    out = out or sys.stdout
    report = run_verify(trials, seed)
    out.write(
        f"verify: trials={report.trials} skipped_ties={report.skipped_ties}\n"
        f"  worst |closed-form - enumeration|   = {report.worst_oracle_diff:.3e}\n"
        f"  worst |sum(enumeration) - 1|        = {report.worst_enum_sum_diff:.3e}\n"
        f"  worst |sum(closed-form) - 1|        = {report.worst_model_sum_diff:.3e}\n"
        f"  ordering violations                 = {report.ordering_violations}\n"
    )
    out.write("verify: PASS\n" if report.passed else "verify: FAIL\n")
    return 0 if report.passed else 1


def cmd_gradcheck(trials: int, seed: int, out=None) -> int:
    out = out or sys.stdout
    report = run_gradcheck(trials, seed)
    out.write(
        f"gradcheck: trials={report.trials} per definition plus objective\n"
        f"  worst per-coordinate error = {report.worst_rel_err:.3e}\n"
        f"  clipped surrogate terms    = {report.clip_fraction:.1%}\n"
    )
    out.write("gradcheck: PASS\n" if report.passed else "gradcheck: FAIL\n")
    return 0 if report.passed else 1


def cmd_d3pm(out=None) -> int:
    out = out or sys.stdout
    report = run_d3pm_suite()
    out.write(
        f"d3pm suite:\n"
        f"  worst row-sum deviation        = {report.worst_row_sum:.3e}\n"
        f"  worst closed-form marginal gap = {report.worst_marginal_diff:.3e}\n"
        f"  worst posterior vs paths gap   = {report.worst_posterior_diff:.3e}\n"
        f"  smallest elbo term             = {report.min_elbo_term:.3e}\n"
        f"  elbo at the true posterior     = {report.worst_true_posterior_elbo:.3e}\n"
    )
    out.write("d3pm: PASS\n" if report.passed else "d3pm: FAIL\n")
    return 0 if report.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="maskgrpo",
        description="Desk-scale GRPO fine-tuning of masked parallel-unmasking policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment from a config file")
    p_train.add_argument("-c", "--config", required=True)
    p_train.add_argument("-o", "--out-dir", default=None)

    p_sample = sub.add_parser("sample", help="decode canvases from a checkpoint")
    p_sample.add_argument("-k", "--checkpoint", required=True)
    p_sample.add_argument("-p", "--prompt", required=True, help="pattern:T0,T1,... or count:VALUE,TARGET")
    p_sample.add_argument("-n", "--count", type=int, default=1)
    p_sample.add_argument("-T", "--steps", type=int, default=0)
    p_sample.add_argument("--schedule", choices=("cosine", "uniform"), default="cosine")
    p_sample.add_argument(
        "--kind",
        choices=tuple(_TRANSITION_NAMES),
        default="unmasked",
        help="log-prob definition for the dump; the kept-only default stays defined on tied confidences",
    )
    p_sample.add_argument("--temperature", type=float, default=1.0)
    p_sample.add_argument("-s", "--seed", type=int, default=0)

    p_verify = sub.add_parser("verify", help="brute-force oracle comparison")
    p_verify.add_argument("-n", "--trials", type=int, default=1000)
    p_verify.add_argument("-s", "--seed", type=int, default=0)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("-n", "--trials", type=int, default=100)
    p_grad.add_argument("-s", "--seed", type=int, default=0)

    sub.add_parser("d3pm", help="discrete-diffusion property suite")

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out_dir)
        if args.command == "sample":
            return cmd_sample(
                args.checkpoint,
                args.prompt,
                args.count,
                steps=args.steps,
                schedule=args.schedule,
                kind=args.kind,
                temperature=args.temperature,
                seed=args.seed,
            )
        if args.command == "verify":
            return cmd_verify(args.trials, args.seed)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.trials, args.seed)
        return cmd_d3pm()
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

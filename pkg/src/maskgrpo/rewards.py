"""Rule-based terminal rewards on completed canvases, bounded to [0, 1]."""

from __future__ import annotations

from typing import Callable

from .canvas import CanvasState, Prompt, TaskKind

__all__ = ["reward_pattern", "reward_count", "reward_fn_for"]

RewardFn = Callable[[CanvasState, Prompt], float]


def reward_pattern(final: CanvasState, prompt: Prompt) -> float:
    """Fraction of positions whose token equals the prompt's target grid."""
    target = prompt.payload
    if len(target) != final.length:
        raise ValueError("target grid length does not match canvas")
    matches = int((final.tokens == list(target)).sum())
    return matches / final.length


def reward_count(final: CanvasState, prompt: Prompt) -> float:
    """1 minus the normalised distance between the token count and its target."""
    value, want = prompt.payload
    have = int((final.tokens == value).sum())
    return 1.0 - abs(have - want) / final.length


_BY_KIND: dict[TaskKind, RewardFn] = {
    TaskKind.PATTERN_MATCH: reward_pattern,
    TaskKind.TOKEN_COUNT: reward_count,
}


def reward_fn_for(kind: TaskKind) -> RewardFn:
    return _BY_KIND[kind]

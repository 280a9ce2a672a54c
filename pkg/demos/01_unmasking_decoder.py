#!/usr/bin/env python3
"""Walk through one parallel-unmasking rollout, step by step.

The canvas starts fully masked.  Each iteration the policy predicts a token
distribution for every masked position, one token is sampled per position,
and only the most confident samples (per the schedule) are kept; the rest
are remasked and retried next iteration.
"""

import sys

import numpy as np

from maskgrpo import (
    PolicyArch,
    Prompt,
    TransitionKind,
    init_params,
    rollout,
    schedule_cosine,
    schedule_uniform,
)
from maskgrpo.decoder import dump_trajectory

N, K, T = 12, 4, 5

print("== Unmasking schedules ==")
print(f"cosine  T={T}, N={N}:", schedule_cosine(T, N).counts, "(few early, many late)")
print(f"uniform T={T}, N={N}:", schedule_uniform(T, N).counts)
print()

arch = PolicyArch(length=N, num_categories=K, hidden=32, embed=8)
params = init_params(arch, seed=7)
target = [i % K for i in range(N)]
prompt = Prompt.pattern_match(target, K, arch.embed)

print("== One rollout, untrained policy ==")
traj = rollout(params, prompt, schedule_cosine(T, N), TransitionKind.EXACT, seed=42)
dump_trajectory(traj, sys.stdout)
print()

print("== The canvas fills in from all-masked to complete ==")
for state in traj.states:
    tokens = "".join("." if m else str(v) for v, m in zip(state.tokens, state.mask_flags))
    print(f"  t={state.iteration}  {tokens}  ({state.num_masked} masked)")
print()

print("== Determinism: same seed, same trajectory ==")
again = rollout(params, prompt, schedule_cosine(T, N), TransitionKind.EXACT, seed=42)
print("identical final canvas:", np.array_equal(traj.final_state.tokens, again.final_state.tokens))
print("identical step log-probs:", np.array_equal(traj.old_logprobs, again.old_logprobs))

"""Process verifier: noisy [0,1] action scores, best-of-K, pseudo-entropy.

The base quality oracle peeks at the latent state (a test-only privilege: the
latent state is reconstructible from the context because latent dynamics are
deterministic) and is then corrupted with per-candidate additive uniform
jitter. The jitter width is calibrated so that any good/bad pair is misranked
with probability at most eta_v: for independent U(-w, w) jitter the misrank
probability of a pair with base-score gap d is (2w - d)^2 / (8 w^2), so
solving for the minimal gap gives w = gap / (2 (1 - sqrt(2 eta_v))).

Base scores sit in a narrow band around 0.5 so the jitter never hits the
[0, 1] clip for eta_v <= 0.3; inside that range the pairwise misrank bound is
exact, not merely approximate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .domain import Context
from .env import ACTION_HAZARD, HazardChainEnv

BASE_OPTIMAL = 0.62
BASE_NEUTRAL = 0.50
BASE_HAZARD = 0.38

# smallest good/bad base gap under the default gamma threshold
PAIR_GAP = BASE_OPTIMAL - BASE_NEUTRAL


def jitter_width(eta_v: float, gap: float = PAIR_GAP) -> float:
    """Uniform jitter half-width giving pairwise misrank probability eta_v."""
    if not (0.0 <= eta_v < 0.5):
        raise ValueError("eta_v must lie in [0, 0.5)")
    if eta_v == 0.0:
        return 0.0
    return gap / (2.0 * (1.0 - math.sqrt(2.0 * eta_v)))


@dataclass(frozen=True)
class EnvActionQuality:
    """Latent-state-aware base scores for every action at a context."""

    env: HazardChainEnv

    def __call__(self, ctx: Context) -> np.ndarray:
        task = self.env.parse_goal(ctx.goal)
        state = self.env.replay(task, ctx.actions)
        base = np.full(self.env.config.action_count, BASE_NEUTRAL)
        base[self.env.optimal_action(task, state)] = BASE_OPTIMAL
        base[ACTION_HAZARD] = BASE_HAZARD
        return base


@dataclass(frozen=True)
class VerifierSpec:
    """Quality oracle + pairwise noise level + good-set threshold."""

    quality: Callable[[Context], np.ndarray]
    eta_v: float = 0.05
    gamma_threshold: float = 0.55

    def __post_init__(self):
        if not (0.0 <= self.eta_v < 0.5):
            raise ValueError("eta_v must lie in [0, 0.5)")
        if not (0.0 <= self.gamma_threshold <= 1.0):
            raise ValueError("gamma_threshold must lie in [0, 1]")

    @classmethod
    def for_env(cls, env: HazardChainEnv, eta_v: float = 0.05,
                gamma_threshold: float = 0.55) -> "VerifierSpec":
        return cls(quality=EnvActionQuality(env), eta_v=eta_v,
                   gamma_threshold=gamma_threshold)


def _score_from_base(base: float, eta_v: float, rng: np.random.Generator) -> float:
    w = jitter_width(eta_v)
    value = base if w == 0.0 else base + rng.uniform(-w, w)
    return float(min(1.0, max(0.0, value)))


def score(spec: VerifierSpec, ctx: Context, action: int, rng: np.random.Generator) -> float:
    """Noisy score for one action; deterministic given the rng state."""
    base = np.asarray(spec.quality(ctx), dtype=float)
    if not (0 <= action < len(base)):
        raise ValueError(f"action {action} outside the scored range")
    return _score_from_base(float(base[action]), spec.eta_v, rng)


def score_candidates(
    spec: VerifierSpec, ctx: Context, actions, rng: np.random.Generator
) -> np.ndarray:
    """Scores for a candidate list; one independent jitter draw per candidate."""
    base = np.asarray(spec.quality(ctx), dtype=float)
    return np.array([_score_from_base(float(base[a]), spec.eta_v, rng) for a in actions])


def best_of_k(spec: VerifierSpec, ctx: Context, candidates, rng: np.random.Generator):
    """argmax-by-score selection; ties break toward the lowest candidate index."""
    if len(candidates) < 1:
        raise ValueError("need at least one candidate")
    scores = score_candidates(spec, ctx, [a for a, _ in candidates], rng)
    idx = int(np.argmax(scores))
    return candidates[idx][0], float(scores[idx]), scores


def pseudo_entropy(scores) -> float:
    """Normalized entropy of the softmax over verifier scores, in [0, 1].

    Serves as the black-box uncertainty proxy when policy log-probabilities
    are unavailable.
    """
    s = np.asarray(scores, dtype=float)
    if s.size < 2:
        raise ValueError("pseudo-entropy needs at least two scores")
    z = s - s.max()
    p = np.exp(z)
    p /= p.sum()
    h = -float(np.sum(p * np.log(p)))
    return h / math.log(s.size)

"""Policies: scripted teacher, linear-softmax student, behavioral cloning.

The student is deliberately low-capacity (linear softmax over hand-coded
context features) so it stays brittle under out-of-distribution corruption;
that residual brittleness is what the router is trained to price.

BC uses full-batch gradient descent with a backtracking line search, which
makes the per-epoch training loss non-increasing by construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import seeds
from .domain import Context, PerturbedEpisode, PerturbationSeed, StepRecord
from .env import MAX_SUBGOALS, HazardChainEnv

POLICY_SCHEMA = "policy@1"


@dataclass(frozen=True)
class PolicyFeaturizer:
    """Hand-coded context features: last-observation token indicators,
    observable progress summary, step fraction, last-action one-hot."""

    vocab_size: int
    action_count: int
    horizon: int
    prog_base: int

    @property
    def dim(self) -> int:
        return self.vocab_size + 2 + self.action_count

    @classmethod
    def for_env(cls, env: HazardChainEnv) -> "PolicyFeaturizer":
        return cls(
            vocab_size=env.config.goal_vocab_size,
            action_count=env.config.action_count,
            horizon=env.config.horizon,
            prog_base=env.tokens.prog_base,
        )

    def __call__(self, ctx: Context) -> np.ndarray:
        x = np.zeros(self.dim)
        for tok in ctx.last_observation:
            if 0 <= tok < self.vocab_size:
                x[tok] = 1.0
            if self.prog_base <= tok <= self.prog_base + MAX_SUBGOALS:
                x[self.vocab_size] = (tok - self.prog_base) / MAX_SUBGOALS
        x[self.vocab_size + 1] = ctx.step_index / self.horizon
        if ctx.actions:
            last = ctx.actions[-1]
            if 0 <= last < self.action_count:
                x[self.vocab_size + 2 + last] = 1.0
        return x

    def matrix(self, contexts) -> np.ndarray:
        return np.stack([self(c) for c in contexts]) if contexts else np.zeros((0, self.dim))


@dataclass
class SoftmaxPolicy:
    """pi(a|x) = softmax(theta^T phi(x) / temperature); stage tags provenance."""

    theta: np.ndarray
    bias: np.ndarray
    featurizer: PolicyFeaturizer
    temperature: float = 1.0
    stage: str = "init"

    @classmethod
    def zeros(cls, featurizer: PolicyFeaturizer, stage: str = "init") -> "SoftmaxPolicy":
        return cls(
            theta=np.zeros((featurizer.dim, featurizer.action_count)),
            bias=np.zeros(featurizer.action_count),
            featurizer=featurizer,
            stage=stage,
        )

    def logits(self, ctx: Context) -> np.ndarray:
        return self.featurizer(ctx) @ self.theta + self.bias

    def log_distribution(self, ctx: Context) -> np.ndarray:
        z = self.logits(ctx) / self.temperature
        z = z - z.max()
        return z - np.log(np.exp(z).sum())

    def action_distribution(self, ctx: Context) -> np.ndarray:
        p = np.exp(self.log_distribution(ctx))
        return p / p.sum()

    def sample_candidates(self, ctx: Context, k: int, rng: np.random.Generator):
        """K i.i.d. draws with their log-probabilities."""
        if k < 1:
            raise ValueError("need at least one candidate")
        logp = self.log_distribution(ctx)
        probs = np.exp(logp)
        probs = probs / probs.sum()
        draws = rng.choice(self.featurizer.action_count, size=k, p=probs)
        return [(int(a), float(logp[a])) for a in draws]

    def param_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.theta).tobytes())
        h.update(np.ascontiguousarray(self.bias).tobytes())
        return h.hexdigest()

    def clone(self, stage: str | None = None) -> "SoftmaxPolicy":
        return SoftmaxPolicy(
            theta=self.theta.copy(),
            bias=self.bias.copy(),
            featurizer=self.featurizer,
            temperature=self.temperature,
            stage=self.stage if stage is None else stage,
        )

    def frozen_reference(self) -> "FrozenReference":
        theta = self.theta.copy()
        bias = self.bias.copy()
        theta.setflags(write=False)
        bias.setflags(write=False)
        return FrozenReference(theta=theta, bias=bias, param_hash=self.param_hash())

    # checkpoint: one JSON header line + raw float64 parameter bytes
    def save(self, path, extra: dict | None = None) -> None:
        flat = np.concatenate([self.theta.ravel(), self.bias.ravel()])
        header = {
            "schema": POLICY_SCHEMA,
            "feature_dim": self.featurizer.dim,
            "action_count": self.featurizer.action_count,
            "vocab_size": self.featurizer.vocab_size,
            "horizon": self.featurizer.horizon,
            "prog_base": self.featurizer.prog_base,
            "temperature": self.temperature,
            "stage": self.stage,
            "hash": self.param_hash(),
        }
        if extra:
            header.update(extra)
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
            fh.write(flat.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "SoftmaxPolicy":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            if header.get("schema") != POLICY_SCHEMA:
                raise ValueError(f"not a policy checkpoint: {path}")
            flat = np.frombuffer(fh.read(), dtype="<f8")
        featurizer = PolicyFeaturizer(
            vocab_size=header["vocab_size"],
            action_count=header["action_count"],
            horizon=header["horizon"],
            prog_base=header["prog_base"],
        )
        dim, a = header["feature_dim"], header["action_count"]
        policy = cls(
            theta=flat[: dim * a].reshape(dim, a).copy(),
            bias=flat[dim * a :].copy(),
            featurizer=featurizer,
            temperature=header["temperature"],
            stage=header["stage"],
        )
        if policy.param_hash() != header["hash"]:
            raise ValueError("policy checkpoint hash mismatch")
        return policy


@dataclass(frozen=True)
class FrozenReference:
    """Bit-exact parameter snapshot used as the fixed preference reference."""

    theta: np.ndarray
    bias: np.ndarray
    param_hash: str

    def current_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.theta).tobytes())
        h.update(np.ascontiguousarray(self.bias).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class TeacherPolicy:
    """Scripted planner with full latent-state access and a small error rate."""

    error_rate: float = 0.02

    def __post_init__(self):
        if not (0.0 <= self.error_rate < 1.0):
            raise ValueError("teacher error rate must lie in [0, 1)")

    def act(self, env: HazardChainEnv, state, rng: np.random.Generator) -> int:
        task = env.task_spec(state.task_id)
        planned = env.optimal_action(task, state)
        if self.error_rate > 0.0 and rng.random() < self.error_rate:
            return int(rng.integers(env.config.action_count))
        return planned


def run_teacher_episode(
    env: HazardChainEnv,
    task_id: int,
    z: int,
    teacher: TeacherPolicy,
    kind: str,
) -> PerturbedEpisode:
    """Roll the teacher once; deterministic given (env config, task, z)."""
    seed = PerturbationSeed(z)
    rng = seeds.stream(env.config.rng_seed, "teacher", task_id, z)
    state, ctx = env.reset(task_id, seed)
    steps = []
    success = False
    for t in range(env.config.horizon):
        action = teacher.act(env, state, rng)
        state, obs, terminal, success = env.step(state, action, seed, t)
        steps.append(
            StepRecord(
                context=ctx,
                candidates=(),
                verifier_scores=(),
                chosen_action=action,
                executor="LLM",
            )
        )
        ctx = ctx.advanced(action, obs)
        if terminal:
            break
    return PerturbedEpisode(
        task_id=task_id,
        seed=seed,
        steps=tuple(steps),
        success=success,
        llm_calls=len(steps),
        kind=kind,
    )


def collect_teacher_trajectories(
    env: HazardChainEnv,
    teacher: TeacherPolicy,
    task_ids,
    pert_seeds_per_task: int = 5,
) -> list[PerturbedEpisode]:
    """One clean demonstration plus perturbed replays per task."""
    clean_env = env.clean_variant()
    pool: list[PerturbedEpisode] = []
    for task_id in task_ids:
        z = seeds.mix(env.config.rng_seed, "exp", task_id)
        pool.append(run_teacher_episode(clean_env, task_id, z, teacher, kind="exp"))
        for j in range(pert_seeds_per_task):
            z = seeds.mix(env.config.rng_seed, "pert", task_id, j)
            pool.append(run_teacher_episode(env, task_id, z, teacher, kind="pert"))
    return pool


def bc_dataset(pool, featurizer: PolicyFeaturizer):
    """(features, expert actions) from the episode-success subset of the pool."""
    contexts, actions, sources = [], [], []
    for ep in pool:
        if not ep.success:
            continue
        for step in ep.steps:
            contexts.append(step.context)
            actions.append(step.chosen_action)
            sources.append((ep.task_id, ep.seed.z))
    return featurizer.matrix(contexts), np.array(actions, dtype=int), sources


def bc_loss_and_grad(theta: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of the expert action and its exact gradient."""
    logits = x @ theta + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    loss = float(np.mean(logz - logits[np.arange(len(y)), y]))
    probs = np.exp(logits - logz[:, None])
    probs[np.arange(len(y)), y] -= 1.0
    probs /= len(y)
    return loss, x.T @ probs, probs.sum(axis=0)


def train_bc(
    pool,
    featurizer: PolicyFeaturizer,
    epochs: int = 80,
    lr: float = 4.0,
    tol: float = 0.0,
) -> tuple[SoftmaxPolicy, list[float]]:
    """Full-batch descent on the success-only subset; loss never increases.

    Returns the trained policy (stage 'bc') and the per-epoch loss trace.
    """
    x, y, _ = bc_dataset(pool, featurizer)
    if len(y) == 0:
        raise ValueError(
            "behavioral cloning needs at least one successful episode in the pool"
        )
    theta = np.zeros((featurizer.dim, featurizer.action_count))
    bias = np.zeros(featurizer.action_count)
    loss, g_theta, g_bias = bc_loss_and_grad(theta, bias, x, y)
    trace = [loss]
    for _ in range(epochs):
        step = lr
        accepted = False
        for _ in range(50):
            theta2 = theta - step * g_theta
            bias2 = bias - step * g_bias
            loss2, g_theta2, g_bias2 = bc_loss_and_grad(theta2, bias2, x, y)
            if loss2 <= loss:
                theta, bias = theta2, bias2
                loss, g_theta, g_bias = loss2, g_theta2, g_bias2
                accepted = True
                break
            step /= 2.0
        trace.append(loss)
        if not accepted:
            break
        grad_norm = np.sqrt((g_theta**2).sum() + (g_bias**2).sum())
        if grad_norm < tol:
            break
    return SoftmaxPolicy(theta, bias, featurizer, stage="bc"), trace

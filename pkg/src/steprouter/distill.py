"""Recovery distillation: preference pairs from BC rollouts, DPO against a
frozen reference, and cross-seed consistency regularization.

Pairing rule: sample K candidates from the BC policy at every pooled context
and score them. If the best candidate clears the verifier threshold the pair
is (best, worst); otherwise the teacher is queried and the pair is (teacher
action, best candidate). Consistency pairs replay the clean expert action
sequence under two different perturbation seeds, so both contexts share the
same latent state by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import seeds
from .domain import Context
from .env import HazardChainEnv
from .policy import FrozenReference, SoftmaxPolicy, TeacherPolicy
from .verifier import VerifierSpec, score_candidates

SOURCE_VERIFIER = "VerifierRanked"
SOURCE_TEACHER = "TeacherRecovered"


@dataclass(frozen=True)
class PreferencePair:
    context: Context
    a_plus: int
    a_minus: int
    source: str

    def __post_init__(self):
        if self.a_plus == self.a_minus:
            raise ValueError("preference pair needs distinct actions")
        if self.source not in (SOURCE_VERIFIER, SOURCE_TEACHER):
            raise ValueError(f"unknown pair source {self.source!r}")


@dataclass(frozen=True)
class DistillConfig:
    beta: float = 0.1
    lambda_cons: float = 0.20
    epochs: int = 80
    lr: float = 4.0
    grad_tol: float = 0.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.lambda_cons < 0:
            raise ValueError("lambda_cons must be nonnegative")


def build_preferences(
    bc_policy: SoftmaxPolicy,
    pool,
    spec: VerifierSpec,
    teacher: TeacherPolicy,
    env: HazardChainEnv,
    k: int = 5,
    cons_pairs_per_task: int = 4,
):
    """Construct (preference pairs, consistency view pairs, counters) from the pool.

    At most one pair per context; contexts whose candidates collapse onto a
    single action (or where the teacher agrees with the best candidate) are
    skipped and counted.
    """
    if bc_policy.stage != "bc":
        raise ValueError("preference pairs must be generated by the BC policy")
    if k < 2:
        raise ValueError("need K >= 2 candidates to rank")
    rng_cand = seeds.stream(env.config.rng_seed, "pairs", "candidates")
    rng_score = seeds.stream(env.config.rng_seed, "pairs", "scores")
    rng_teacher = seeds.stream(env.config.rng_seed, "pairs", "teacher")
    pairs: list[PreferencePair] = []
    counters = {"verifier_ranked": 0, "teacher_recovered": 0, "skipped": 0}
    for ep in pool:
        for step in ep.steps:
            ctx = step.context
            cands = bc_policy.sample_candidates(ctx, k, rng_cand)
            actions = [a for a, _ in cands]
            scores = score_candidates(spec, ctx, actions, rng_score)
            best = int(np.argmax(scores))
            worst = int(np.argmin(scores))
            if scores[best] >= spec.gamma_threshold:
                if actions[best] == actions[worst]:
                    counters["skipped"] += 1
                    continue
                pairs.append(
                    PreferencePair(ctx, actions[best], actions[worst], SOURCE_VERIFIER)
                )
                counters["verifier_ranked"] += 1
            else:
                task = env.parse_goal(ctx.goal)
                state = env.replay(task, ctx.actions)
                recovered = teacher.act(env, state, rng_teacher)
                if recovered == actions[best]:
                    counters["skipped"] += 1
                    continue
                pairs.append(
                    PreferencePair(ctx, recovered, actions[best], SOURCE_TEACHER)
                )
                counters["teacher_recovered"] += 1
    views = build_consistency_views(pool, env, pairs_per_task=cons_pairs_per_task)
    return pairs, views, counters


def build_consistency_views(pool, env: HazardChainEnv, pairs_per_task: int = 4):
    """Paired contexts under different seeds for identical latent trajectories.

    Each pair replays the task's clean expert action sequence under two
    perturbation seeds; since latent transitions ignore observations, every
    step of the two replays shares its latent state.
    """
    clean_by_task = {}
    pert_seeds_by_task: dict[int, list[int]] = {}
    for ep in pool:
        if ep.kind == "exp":
            clean_by_task.setdefault(ep.task_id, ep)
        elif ep.kind == "pert":
            pert_seeds_by_task.setdefault(ep.task_id, []).append(ep.seed.z)
    views: list[tuple[Context, Context]] = []
    for task_id, clean_ep in sorted(clean_by_task.items()):
        zs = sorted(pert_seeds_by_task.get(task_id, []))
        if len(zs) < 2:
            continue
        actions = [s.chosen_action for s in clean_ep.steps]
        contexts = {z: _replay_contexts(env, task_id, actions, z) for z in zs}
        z_pairs = [(zs[i], zs[(i + 1) % len(zs)]) for i in range(len(zs))]
        for z_a, z_b in z_pairs[:pairs_per_task]:
            views.extend(zip(contexts[z_a], contexts[z_b]))
    return views


def _replay_contexts(env: HazardChainEnv, task_id: int, actions, z: int):
    """Contexts visited when replaying a fixed action sequence under seed z."""
    from .domain import PerturbationSeed

    seed = PerturbationSeed(z)
    state, ctx = env.reset(task_id, seed)
    out = [ctx]
    for t, action in enumerate(actions):
        state, obs, terminal, _ = env.step(state, action, seed, t)
        ctx = ctx.advanced(action, obs)
        if terminal:
            break
        out.append(ctx)
    return out


def dpo_margin(
    theta: np.ndarray,
    bias: np.ndarray,
    ref: FrozenReference,
    phi: np.ndarray,
    a_plus: int,
    a_minus: int,
    beta: float,
) -> float:
    """The preference score difference u (log-ratio margin scaled by beta)."""
    logits = phi @ theta + bias
    ref_logits = phi @ ref.theta + ref.bias
    return float(
        beta
        * (
            (logits[a_plus] - logits[a_minus])
            - (ref_logits[a_plus] - ref_logits[a_minus])
        )
    )


def dpo_loss(
    policy: SoftmaxPolicy, ref: FrozenReference, pair: PreferencePair, beta: float
) -> float:
    """-log sigmoid(u) for one pair; equals log 2 at zero margin."""
    phi = policy.featurizer(pair.context)
    u = dpo_margin(policy.theta, policy.bias, ref, phi, pair.a_plus, pair.a_minus, beta)
    return float(np.logaddexp(0.0, -u))


def consistency_loss(policy: SoftmaxPolicy, view_pairs) -> float:
    """Mean Jensen-Shannon divergence (natural log) across paired views."""
    if not view_pairs:
        return 0.0
    x_a = policy.featurizer.matrix([a for a, _ in view_pairs])
    x_b = policy.featurizer.matrix([b for _, b in view_pairs])
    return float(
        _batched_jsd(policy.theta, policy.bias, x_a, x_b, policy.temperature)[0].mean()
    )


def jsd(p, q) -> float:
    """Jensen-Shannon divergence between two probability vectors, natural log."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    m = 0.5 * (p + q)

    def _kl(a, b):
        mask = a > 0.0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _batched_jsd(theta, bias, x_a, x_b, temperature):
    p = _softmax_rows((x_a @ theta + bias) / temperature)
    q = _softmax_rows((x_b @ theta + bias) / temperature)
    m = 0.5 * (p + q)
    rows = 0.5 * np.sum(p * np.log(p / m), axis=1) + 0.5 * np.sum(q * np.log(q / m), axis=1)
    return rows, p, q, m


def _objective_and_grad(theta, bias, ref, pair_x, plus_idx, minus_idx, ref_margin,
                        beta, lambda_cons, cons_a, cons_b, temperature):
    """Combined DPO + consistency objective with its exact gradient."""
    g_theta = np.zeros_like(theta)
    g_bias = np.zeros_like(bias)
    total = 0.0

    n_pairs = len(plus_idx)
    if n_pairs:
        logits = pair_x @ theta + bias
        rows = np.arange(n_pairs)
        u = beta * ((logits[rows, plus_idx] - logits[rows, minus_idx]) - ref_margin)
        total += float(np.logaddexp(0.0, -u).mean())
        # d/du of mean -log sigmoid(u) is -sigmoid(-u)/n
        coef = -_sigmoid(-u) * beta / n_pairs
        dlogits = np.zeros_like(logits)
        np.add.at(dlogits, (rows, plus_idx), coef)
        np.add.at(dlogits, (rows, minus_idx), -coef)
        g_theta += pair_x.T @ dlogits
        g_bias += dlogits.sum(axis=0)

    n_views = len(cons_a)
    if lambda_cons > 0.0 and n_views:
        rows_jsd, p, q, m = _batched_jsd(theta, bias, cons_a, cons_b, temperature)
        total += lambda_cons * float(rows_jsd.mean())
        # dJSD/dP_a = 0.5 log(P_a / M_a); chain through both softmax heads
        gp = 0.5 * np.log(p / m)
        gq = 0.5 * np.log(q / m)
        dlogit_p = p * (gp - np.sum(gp * p, axis=1, keepdims=True))
        dlogit_q = q * (gq - np.sum(gq * q, axis=1, keepdims=True))
        scale = lambda_cons / (n_views * temperature)
        g_theta += scale * (cons_a.T @ dlogit_p + cons_b.T @ dlogit_q)
        g_bias += scale * (dlogit_p.sum(axis=0) + dlogit_q.sum(axis=0))

    return total, g_theta, g_bias


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def train_recovery(
    bc_policy: SoftmaxPolicy,
    pairs,
    view_pairs,
    config: DistillConfig,
) -> tuple[SoftmaxPolicy, dict]:
    """Minimize DPO + lambda_cons * JSD from theta_BC with a frozen reference.

    The combined objective is non-increasing per epoch (backtracking line
    search) and the reference hash is asserted unchanged afterwards.
    """
    ref = bc_policy.frozen_reference()
    policy = bc_policy.clone(stage="distilled")
    featurizer = policy.featurizer

    pair_x = featurizer.matrix([p.context for p in pairs])
    plus_idx = np.array([p.a_plus for p in pairs], dtype=int)
    minus_idx = np.array([p.a_minus for p in pairs], dtype=int)
    if len(pairs):
        ref_logits = pair_x @ ref.theta + ref.bias
        rows = np.arange(len(pairs))
        ref_margin = ref_logits[rows, plus_idx] - ref_logits[rows, minus_idx]
    else:
        ref_margin = np.zeros(0)
    cons_a = featurizer.matrix([a for a, _ in view_pairs])
    cons_b = featurizer.matrix([b for _, b in view_pairs])

    theta, bias = policy.theta, policy.bias
    loss, g_theta, g_bias = _objective_and_grad(
        theta, bias, ref, pair_x, plus_idx, minus_idx, ref_margin,
        config.beta, config.lambda_cons, cons_a, cons_b, policy.temperature,
    )
    trace = [loss]
    for _ in range(config.epochs):
        step = config.lr
        accepted = False
        for _ in range(60):
            theta2 = theta - step * g_theta
            bias2 = bias - step * g_bias
            loss2, g_theta2, g_bias2 = _objective_and_grad(
                theta2, bias2, ref, pair_x, plus_idx, minus_idx, ref_margin,
                config.beta, config.lambda_cons, cons_a, cons_b, policy.temperature,
            )
            if loss2 <= loss:
                theta, bias = theta2, bias2
                loss, g_theta, g_bias = loss2, g_theta2, g_bias2
                accepted = True
                break
            step /= 2.0
        trace.append(loss)
        if not accepted:
            break
        if math.sqrt((g_theta**2).sum() + (g_bias**2).sum()) < config.grad_tol:
            break

    if ref.current_hash() != ref.param_hash:
        raise RuntimeError("frozen reference mutated during recovery training")
    policy.theta, policy.bias = theta, bias
    report = {
        "final_loss": loss,
        "loss_trace": trace,
        "pair_count": len(pairs),
        "view_count": len(view_pairs),
        "reference_hash": ref.param_hash,
    }
    return policy, report

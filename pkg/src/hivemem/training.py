"""Stepwise policy-gradient training for the admission controller.

Episodes are rewarded by the aggregated answer's score plus a weighted
first-finisher score.  Rewards are standardized within groups of G
rollouts of the same task, each admission decision gets its trace's
base advantage plus a usage bonus when its entry was actually retrieved
in a rewarded trace, and the policy minimizes the advantage-weighted
negative log-likelihood plus a sparsity penalty on the admit
probability.  Rollout trajectories are replayed several times per epoch
with log-probabilities recomputed against the current parameters;
actions and advantages stay fixed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bank import UsageFlags
from .controller import (
    YES,
    AdmissionPolicy,
    ControllerContext,
    StepTriplet,
    embed,
    log_prob,
    step_loss_grads,
)
from .embeddings import EmbeddingProvider
from .errors import TrainingDiverged, ValidationError
from .runtime import EpisodeTrace, MajorityAggregator, run_episode
from .sim import ScriptedBackend, SimTask

logger = logging.getLogger(__name__)

ScoreFn = Callable[[str], float]


@dataclass(frozen=True)
class RewardBreakdown:
    r_agg: float
    r_first: float
    lambda_first: float

    @property
    def r_total(self) -> float:
        return self.r_agg + self.lambda_first * self.r_first


def episode_reward(
    trace: EpisodeTrace, scorer: ScoreFn, lambda_first: float = 1.0
) -> RewardBreakdown:
    """Score the aggregated answer and the first finisher's answer."""
    if lambda_first < 0:
        raise ValidationError("lambda_first must be >= 0")
    r_agg = float(scorer(trace.aggregate_answer))
    r_first = float(scorer(trace.first_answer))
    for name, value in (("aggregate", r_agg), ("first-finisher", r_first)):
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"{name} score {value} outside [0, 1]")
    return RewardBreakdown(r_agg=r_agg, r_first=r_first, lambda_first=lambda_first)


def group_advantage(rewards: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    """Standardize rewards within a group (population standard deviation)."""
    if len(rewards) < 2:
        raise ValidationError("group advantage needs at least 2 rewards")
    if eps <= 0:
        raise ValidationError("eps must be > 0")
    r = np.asarray(rewards, dtype=np.float64)
    return (r - r.mean()) / (r.std() + eps)


def shaped_advantages(
    trace: EpisodeTrace, a_base: float, beta: float, r_total: float
) -> list[float]:
    """Per-decision advantages: a_base, plus beta for admitted-and-used
    steps of a positively rewarded trace.  Order matches trace.decisions().
    """
    if not math.isfinite(a_base):
        raise ValidationError("a_base must be finite")
    usage = trace.bank.usage_sets()
    out: list[float] = []
    for record in trace.decisions():
        bonus = 0.0
        if record.decision.action == YES and record.entry_id is not None and r_total > 0:
            flags = usage.get((record.team, record.step_index), UsageFlags(False, False))
            if flags.used:
                bonus = beta
        out.append(a_base + bonus)
    return out


def policy_loss(log_probs: Sequence[float], advantages: Sequence[float]) -> float:
    """Sum over steps of -log_prob * advantage."""
    if len(log_probs) != len(advantages):
        raise ValidationError("log_probs and advantages must have equal length")
    return float(sum(-lp * adv for lp, adv in zip(log_probs, advantages)))


def sparsity_loss(prob_yes_sequence: Sequence[float]) -> float:
    """Sum of admit probabilities (differentiable YES mass, not actions)."""
    for p in prob_yes_sequence:
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"probability {p} outside [0, 1]")
    return float(sum(prob_yes_sequence))


@dataclass
class LossTerms:
    policy_loss: float
    sparsity_loss: float
    lambda_sparse: float
    total: float
    per_step_policy: list[float] = field(default_factory=list)
    per_step_sparsity: list[float] = field(default_factory=list)


def total_loss(
    policy_loss_value: float,
    sparsity_loss_value: float,
    lambda_sparse: float,
    per_step_policy: Sequence[float] = (),
    per_step_sparsity: Sequence[float] = (),
) -> LossTerms:
    if lambda_sparse < 0:
        raise ValidationError("lambda_sparse must be >= 0")
    return LossTerms(
        policy_loss=policy_loss_value,
        sparsity_loss=sparsity_loss_value,
        lambda_sparse=lambda_sparse,
        total=policy_loss_value + lambda_sparse * sparsity_loss_value,
        per_step_policy=list(per_step_policy),
        per_step_sparsity=list(per_step_sparsity),
    )


class AdamW:
    """Adam with decoupled weight decay and global gradient-norm clipping."""

    def __init__(
        self,
        policy: AdmissionPolicy,
        lr: float = 1e-4,
        weight_decay: float = 0.01,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float = 1.0,
    ):
        self.policy = policy
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in policy.params.items()}
        self._v = {k: np.zeros_like(v) for k, v in policy.params.items()}

    def grad_norm(self, grads: dict[str, np.ndarray]) -> float:
        return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        norm = self.grad_norm(grads)
        scale = 1.0
        if self.clip_norm > 0 and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for key, param in self.policy.params.items():
            g = grads[key] * scale
            self._m[key] = b1 * self._m[key] + (1 - b1) * g
            self._v[key] = b2 * self._v[key] + (1 - b2) * g * g
            m_hat = self._m[key] / (1 - b1**self.t)
            v_hat = self._v[key] / (1 - b2**self.t)
            param -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * param)
        return norm


@dataclass
class TrainConfig:
    group_size: int = 5
    epochs: int = 5
    replay_factor: int = 10
    beta: float = 0.25
    lambda_sparse: float = 0.05
    lambda_first: float = 1.0
    sample_temperature: float = 1.2
    loss_temperature: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    adv_eps: float = 1e-8
    seed: int = 0
    k: int = 3
    importance_weighting: bool = False
    checkpoint_dir: str | None = None
    report_path: str | None = None

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValidationError("group_size must be >= 2 for a defined std")
        if self.epochs < 1 or self.replay_factor < 1:
            raise ValidationError("epochs and replay_factor must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


@dataclass
class _StoredStep:
    triplet: StepTriplet
    action: str
    mem_size: int
    advantage: float
    logp_collect: float  # at loss temperature, under collection-time params


@dataclass
class _StoredTrace:
    query: str
    key_matrix: np.ndarray
    steps: list[_StoredStep]
    reward: RewardBreakdown


@dataclass
class TrainReport:
    epochs: list[dict]
    param_count: int
    config: dict

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"kind": "config", **self.config}, sort_keys=True) + "\n")
            for row in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **row}, sort_keys=True) + "\n")


def _rebuild_context(
    stored: _StoredTrace, step: _StoredStep, provider: EmbeddingProvider
) -> ControllerContext:
    return ControllerContext(
        query_embedding=embed(provider, stored.query),
        memory_key_embeddings=stored.key_matrix[: step.mem_size],
        step_embeddings=np.stack(
            [
                embed(provider, step.triplet.agent_input),
                embed(provider, step.triplet.step_summary),
                embed(provider, step.triplet.agent_output),
            ]
        ),
    )


def _store_trace(
    trace: EpisodeTrace,
    reward: RewardBreakdown,
    a_base: float,
    beta: float,
    policy: AdmissionPolicy,
    provider: EmbeddingProvider,
    loss_temperature: float,
) -> _StoredTrace:
    advantages = shaped_advantages(trace, a_base, beta, reward.r_total)
    _, key_matrix = trace.bank.context_snapshot()
    stored = _StoredTrace(query=trace.query, key_matrix=key_matrix, steps=[], reward=reward)
    for record, adv in zip(trace.decisions(), advantages):
        if record.decision.fail_closed:
            continue  # no meaningful log-prob to train on
        step = _StoredStep(
            triplet=record.triplet,
            action=record.decision.action,
            mem_size=record.mem_size_at_decision,
            advantage=adv,
            logp_collect=0.0,
        )
        context = _rebuild_context(stored, step, provider)
        step.logp_collect, _ = log_prob(policy, context, step.action, loss_temperature)
        stored.steps.append(step)
    return stored


def _rollout_group(
    policy: AdmissionPolicy,
    task: SimTask,
    provider: EmbeddingProvider,
    config: TrainConfig,
    epoch: int,
    task_index: int,
) -> tuple[list[EpisodeTrace], list[RewardBreakdown]]:
    traces, rewards = [], []
    scorer = task.scorer()
    for g in range(config.group_size):
        seed = int(
            np.random.SeedSequence([config.seed, epoch, task_index, g]).generate_state(1)[0]
        )
        backend = ScriptedBackend(task, config.k)
        trace = run_episode(
            task.task_spec(),
            config.k,
            backend,
            policy,
            provider,
            MajorityAggregator(),
            seed=seed,
            decision_mode="sampled",
            decision_temperature=config.sample_temperature,
        )
        traces.append(trace)
        rewards.append(episode_reward(trace, scorer.score, config.lambda_first))
    return traces, rewards


def _group_loss_and_grads(
    policy: AdmissionPolicy,
    group: list[_StoredTrace],
    provider: EmbeddingProvider,
    config: TrainConfig,
) -> tuple[LossTerms, dict[str, np.ndarray]]:
    """Average of per-trace summed losses over one group, with gradients."""
    grads = policy.zero_grads()
    per_policy: list[float] = []
    per_sparse: list[float] = []
    scale = 1.0 / max(1, len(group))
    for stored in group:
        for step in stored.steps:
            context = _rebuild_context(stored, step, provider)
            weight = scale
            if config.importance_weighting:
                logp_now, _ = log_prob(policy, context, step.action, config.loss_temperature)
                weight *= math.exp(logp_now - step.logp_collect)
            p_term, s_term, g = step_loss_grads(
                policy,
                context,
                step.action,
                step.advantage,
                config.lambda_sparse,
                temperature=config.loss_temperature,
                loss_weight=weight,
            )
            per_policy.append(weight * p_term)
            per_sparse.append(weight * s_term)
            for key in grads:
                grads[key] += g[key]
    terms = total_loss(
        sum(per_policy), sum(per_sparse), config.lambda_sparse, per_policy, per_sparse
    )
    return terms, grads


def train(
    policy: AdmissionPolicy,
    tasks: Sequence[SimTask],
    provider: EmbeddingProvider,
    config: TrainConfig,
) -> TrainReport:
    """Run the full epoch/replay loop; returns the training report.

    Per epoch: G sampled rollouts per task, advantages frozen, then
    ``replay_factor`` optimization passes over the stored groups (one
    update per group, log-probs recomputed against current parameters).
    Non-finite losses abort with a checkpoint of the last finite state.
    """
    if not tasks:
        raise ValidationError("tasks must be non-empty")
    optimizer = AdamW(
        policy,
        lr=config.lr,
        weight_decay=config.weight_decay,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
        clip_norm=config.clip_norm,
    )
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    report = TrainReport(epochs=[], param_count=policy.param_count, config=asdict(config))

    def checkpoint(name: str) -> None:
        if ckpt_dir:
            policy.save(str(ckpt_dir / f"{name}.npz"), provider_name=provider.name)

    for epoch in range(config.epochs):
        groups: list[list[_StoredTrace]] = []
        reward_values: list[float] = []
        admit_flags: list[bool] = []
        for task_index, task in enumerate(tasks):
            traces, rewards = _rollout_group(policy, task, provider, config, epoch, task_index)
            totals = [r.r_total for r in rewards]
            base = group_advantage(totals, config.adv_eps)
            stored_group = [
                _store_trace(
                    trace, reward, float(a), config.beta, policy, provider,
                    config.loss_temperature,
                )
                for trace, reward, a in zip(traces, rewards, base)
            ]
            groups.append(stored_group)
            reward_values.extend(totals)
            for trace in traces:
                admit_flags.extend(r.decision.action == YES for r in trace.decisions())

        pass_losses: list[float] = []
        pass_policy: list[float] = []
        pass_sparse: list[float] = []
        for _ in range(config.replay_factor):
            order = shuffle_rng.permutation(len(groups))
            for gi in order:
                terms, grads = _group_loss_and_grads(policy, groups[gi], provider, config)
                if not math.isfinite(terms.total):
                    checkpoint("last_finite")
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}; checkpoint saved"
                    )
                optimizer.step(grads)
                pass_losses.append(terms.total)
                pass_policy.append(terms.policy_loss)
                pass_sparse.append(terms.sparsity_loss)

        row = {
            "epoch": epoch,
            "mean_reward": float(np.mean(reward_values)) if reward_values else 0.0,
            "admission_rate": float(np.mean(admit_flags)) if admit_flags else 0.0,
            "mean_total_loss": float(np.mean(pass_losses)) if pass_losses else 0.0,
            "mean_policy_loss": float(np.mean(pass_policy)) if pass_policy else 0.0,
            "mean_sparsity_loss": float(np.mean(pass_sparse)) if pass_sparse else 0.0,
            "updates": len(pass_losses),
        }
        report.epochs.append(row)
        logger.info(
            "epoch %d: reward %.3f admission %.3f loss %.3f",
            epoch, row["mean_reward"], row["admission_rate"], row["mean_total_loss"],
        )
        checkpoint(f"epoch_{epoch:03d}")

    if config.report_path:
        report.write(config.report_path)
    return report

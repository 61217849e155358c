"""Admission controller: context assembly and the trainable YES/NO policy.

The policy maps an embedded context (task query, current memory keys,
current step triplet) to two logits over {YES, NO}.  Reference
architecture: one learnable linear projection per input source into the
controller width, mean-pooling per source (order-invariant over memory
keys), then a small tanh MLP head.  Forward and backward passes are
hand-written numpy so gradients can be checked against finite
differences.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .bank import MemoryBank
from .embeddings import EmbeddingProvider
from .errors import ConfigurationError, ValidationError

logger = logging.getLogger(__name__)

YES = "YES"
NO = "NO"

CHECKPOINT_FORMAT_VERSION = 1

# Stable parameter order, used by the optimizer and finite-difference tests.
PARAM_KEYS = (
    "w_query", "b_query",
    "w_memory", "b_memory",
    "w_step", "b_step",
    "w_hidden", "b_hidden",
    "w_out", "b_out",
)


@dataclass(frozen=True)
class StepTriplet:
    """One agent step: orchestrator instruction, summary, raw output."""

    agent_input: str
    step_summary: str
    agent_output: str


@dataclass
class ControllerContext:
    """Pre-projection embedded inputs for one admission decision."""

    query_embedding: np.ndarray        # (d_e,)
    memory_key_embeddings: np.ndarray  # (n_keys, d_e), bank order
    step_embeddings: np.ndarray        # (3, d_e): input, summary, output

    @property
    def dimension(self) -> int:
        return int(self.query_embedding.shape[0])

    @property
    def token_count(self) -> int:
        return 1 + int(self.memory_key_embeddings.shape[0]) + 3


@dataclass(frozen=True)
class Decision:
    """Outcome of one admission decision.

    ``log_prob_action`` is the log-probability of the taken action at the
    temperature the decision was made with; training recomputes
    log-probabilities at its own (default 1.0) temperature.
    """

    action: str
    prob_yes: float
    log_prob_action: float
    mode: str                 # "sampled" | "greedy"
    temperature: float = 1.0
    fail_closed: bool = False


def _softmax2(logits: np.ndarray, temperature: float) -> np.ndarray:
    scaled = logits / temperature
    scaled = scaled - scaled.max()
    e = np.exp(scaled)
    return e / e.sum()


def sample_binary_decision(
    logits: np.ndarray,
    mode: str,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
) -> Decision:
    """Turn a 2-logit vector (YES, NO) into a Decision.

    Non-finite logits fail closed: the step is rejected and flagged, so a
    broken controller can never flood the memory bank.
    """
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (2,):
        raise ValidationError("expected exactly two logits (YES, NO)")
    if not np.all(np.isfinite(logits)):
        logger.warning("non-finite controller logits %s; failing closed to NO", logits)
        return Decision(
            action=NO,
            prob_yes=0.5,
            log_prob_action=float(np.log(0.5)),
            mode=mode,
            temperature=temperature,
            fail_closed=True,
        )
    if mode == "greedy":
        probs = _softmax2(logits, 1.0)
        action = YES if logits[0] >= logits[1] else NO
        p_action = probs[0] if action == YES else probs[1]
        return Decision(
            action=action,
            prob_yes=float(probs[0]),
            log_prob_action=float(np.log(p_action)),
            mode="greedy",
            temperature=1.0,
        )
    if mode == "sampled":
        if rng is None:
            raise ValidationError("sampled mode requires a random generator")
        probs = _softmax2(logits, temperature)
        action = YES if rng.random() < probs[0] else NO
        p_action = probs[0] if action == YES else probs[1]
        return Decision(
            action=action,
            prob_yes=float(probs[0]),
            log_prob_action=float(np.log(p_action)),
            mode="sampled",
            temperature=temperature,
        )
    raise ValidationError(f"unknown decision mode {mode!r}")


class AdmissionPolicy:
    """Trainable admission policy with analytic gradients.

    Parameters (all float64):
      * three per-source projections d_e -> d_c (query, memory, step),
      * a tanh hidden layer 3*d_c -> 4*d_c,
      * a 2-logit output layer, zero-initialized so the untrained policy
        admits with probability exactly 0.5.

    Memory keys are mean-pooled before projection, so decisions are
    invariant to the order of ``memory_key_embeddings`` by construction.
    An empty memory pools to the zero vector.
    """

    def __init__(self, embed_dim: int, controller_dim: int = 32, seed: int = 0):
        if embed_dim < 1 or controller_dim < 1:
            raise ConfigurationError("embed_dim and controller_dim must be >= 1")
        self.embed_dim = embed_dim
        self.controller_dim = controller_dim
        rng = np.random.default_rng(seed)
        d_e, d_c = embed_dim, controller_dim
        hidden = 4 * d_c
        self.params: dict[str, np.ndarray] = {
            "w_query": rng.normal(0.0, d_e**-0.5, (d_c, d_e)),
            "b_query": np.zeros(d_c),
            "w_memory": rng.normal(0.0, d_e**-0.5, (d_c, d_e)),
            "b_memory": np.zeros(d_c),
            "w_step": rng.normal(0.0, d_e**-0.5, (d_c, d_e)),
            "b_step": np.zeros(d_c),
            "w_hidden": rng.normal(0.0, (3 * d_c) ** -0.5, (hidden, 3 * d_c)),
            "b_hidden": np.zeros(hidden),
            "w_out": np.zeros((2, hidden)),
            "b_out": np.zeros(2),
        }

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _check_context(self, context: ControllerContext) -> None:
        if context.dimension != self.embed_dim:
            raise ConfigurationError(
                f"context dimension {context.dimension} != policy embed_dim {self.embed_dim}"
            )

    def forward(self, context: ControllerContext) -> tuple[np.ndarray, dict]:
        """Compute the 2 logits (YES, NO); returns (logits, cache)."""
        self._check_context(context)
        p = self.params
        q = np.asarray(context.query_embedding, dtype=np.float64)
        mem = np.asarray(context.memory_key_embeddings, dtype=np.float64)
        steps = np.asarray(context.step_embeddings, dtype=np.float64)
        if steps.shape != (3, self.embed_dim):
            raise ValidationError("step_embeddings must have shape (3, d_e)")
        mem_mean = mem.mean(axis=0) if mem.shape[0] > 0 else None
        step_mean = steps.mean(axis=0)

        pooled_q = p["w_query"] @ q + p["b_query"]
        if mem_mean is not None:
            pooled_m = p["w_memory"] @ mem_mean + p["b_memory"]
        else:
            pooled_m = np.zeros(self.controller_dim)
        pooled_s = p["w_step"] @ step_mean + p["b_step"]

        h0 = np.concatenate([pooled_q, pooled_m, pooled_s])
        a1 = p["w_hidden"] @ h0 + p["b_hidden"]
        h1 = np.tanh(a1)
        logits = p["w_out"] @ h1 + p["b_out"]
        cache = {"q": q, "mem_mean": mem_mean, "step_mean": step_mean, "h0": h0, "h1": h1}
        return logits, cache

    def backward(self, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of (dlogits . logits) with respect to every parameter."""
        p = self.params
        d_c = self.controller_dim
        h1, h0 = cache["h1"], cache["h0"]
        grads = {}
        grads["w_out"] = np.outer(dlogits, h1)
        grads["b_out"] = dlogits.copy()
        dh1 = p["w_out"].T @ dlogits
        da1 = dh1 * (1.0 - h1 * h1)
        grads["w_hidden"] = np.outer(da1, h0)
        grads["b_hidden"] = da1
        dh0 = p["w_hidden"].T @ da1
        dq, dm, ds = dh0[:d_c], dh0[d_c : 2 * d_c], dh0[2 * d_c :]
        grads["w_query"] = np.outer(dq, cache["q"])
        grads["b_query"] = dq
        if cache["mem_mean"] is not None:
            grads["w_memory"] = np.outer(dm, cache["mem_mean"])
            grads["b_memory"] = dm
        else:
            grads["w_memory"] = np.zeros_like(p["w_memory"])
            grads["b_memory"] = np.zeros_like(p["b_memory"])
        grads["w_step"] = np.outer(ds, cache["step_mean"])
        grads["b_step"] = ds
        return grads

    # -- serialization -------------------------------------------------------

    def save(self, path: str, provider_name: str = "") -> None:
        """Write a self-describing checkpoint (npz with a JSON meta blob)."""
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "embed_dim": self.embed_dim,
            "controller_dim": self.controller_dim,
            "provider": provider_name,
        }
        np.savez(path, __meta__=np.bytes_(json.dumps(meta).encode()), **self.params)

    @classmethod
    def load(
        cls,
        path: str,
        expected_embed_dim: int | None = None,
    ) -> tuple["AdmissionPolicy", dict]:
        with np.load(path) as data:
            if "__meta__" not in data:
                raise ConfigurationError(f"{path} is not a policy checkpoint")
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise ConfigurationError(
                    f"unsupported checkpoint format {meta.get('format_version')!r}"
                )
            if expected_embed_dim is not None and meta["embed_dim"] != expected_embed_dim:
                raise ConfigurationError(
                    f"checkpoint embed_dim {meta['embed_dim']} != expected {expected_embed_dim}"
                )
            policy = cls(meta["embed_dim"], meta["controller_dim"])
            for key in PARAM_KEYS:
                if key not in data:
                    raise ConfigurationError(f"checkpoint missing parameter {key!r}")
                if data[key].shape != policy.params[key].shape:
                    raise ConfigurationError(f"checkpoint parameter {key!r} has wrong shape")
                policy.params[key] = np.asarray(data[key], dtype=np.float64)
        return policy, meta


def embed(provider: EmbeddingProvider, text: str) -> np.ndarray:
    """Embed text with the frozen provider (validates non-empty input)."""
    if not text:
        raise ValidationError("cannot embed empty text")
    return provider.embed(text)


def build_context(
    query: str,
    bank: MemoryBank,
    triplet: StepTriplet,
    provider: EmbeddingProvider,
) -> ControllerContext:
    """Assemble the decision context for the current step.

    Memory-key embeddings come from the bank's cache, never recomputed;
    the snapshot is taken at decision time, so admissions racing with
    this call land in the next step's context.
    """
    if not (triplet.agent_input and triplet.step_summary and triplet.agent_output):
        raise ValidationError("all step triplet fields must be non-empty")
    if provider.dimension != bank.embedding_dim:
        raise ConfigurationError(
            f"provider dimension {provider.dimension} != bank dimension {bank.embedding_dim}"
        )
    _, key_matrix = bank.context_snapshot()
    step_rows = np.stack(
        [
            embed(provider, triplet.agent_input),
            embed(provider, triplet.step_summary),
            embed(provider, triplet.agent_output),
        ]
    )
    return ControllerContext(
        query_embedding=embed(provider, query),
        memory_key_embeddings=key_matrix,
        step_embeddings=step_rows,
    )


def decide(
    policy: AdmissionPolicy,
    context: ControllerContext,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
) -> Decision:
    """Evaluate the policy on a context and emit a YES/NO decision."""
    logits, _ = policy.forward(context)
    return sample_binary_decision(logits, mode, rng=rng, temperature=temperature)


def log_prob(
    policy: AdmissionPolicy,
    context: ControllerContext,
    action: str,
    temperature: float = 1.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """log pi(action | context) and its gradient w.r.t. all parameters."""
    if action not in (YES, NO):
        raise ValidationError(f"action must be YES or NO, got {action!r}")
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    logits, cache = policy.forward(context)
    probs = _softmax2(logits, temperature)
    idx = 0 if action == YES else 1
    logp = float(np.log(probs[idx]))
    onehot = np.zeros(2)
    onehot[idx] = 1.0
    dlogits = (onehot - probs) / temperature
    return logp, policy.backward(cache, dlogits)


def prob_yes_with_grad(
    policy: AdmissionPolicy,
    context: ControllerContext,
    temperature: float = 1.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """pi(YES | context) and its gradient; the sparsity penalty term."""
    logits, cache = policy.forward(context)
    probs = _softmax2(logits, temperature)
    p_yes = float(probs[0])
    e0 = np.array([1.0, 0.0])
    dlogits = p_yes * (e0 - probs) / temperature
    return p_yes, policy.backward(cache, dlogits)


def step_loss_grads(
    policy: AdmissionPolicy,
    context: ControllerContext,
    action: str,
    advantage: float,
    lambda_sparse: float,
    temperature: float = 1.0,
    loss_weight: float = 1.0,
) -> tuple[float, float, dict[str, np.ndarray]]:
    """Fused per-step loss pieces and their combined parameter gradient.

    Returns (policy_term, sparsity_term, grads) where
    policy_term = -advantage * log pi(action), sparsity_term = pi(YES),
    and grads is the gradient of
    loss_weight * (policy_term + lambda_sparse * sparsity_term).
    """
    if action not in (YES, NO):
        raise ValidationError(f"action must be YES or NO, got {action!r}")
    logits, cache = policy.forward(context)
    probs = _softmax2(logits, temperature)
    idx = 0 if action == YES else 1
    logp = float(np.log(probs[idx]))
    policy_term = -advantage * logp
    sparsity_term = float(probs[0])

    onehot = np.zeros(2)
    onehot[idx] = 1.0
    dlogp = (onehot - probs) / temperature
    e0 = np.array([1.0, 0.0])
    dpyes = probs[0] * (e0 - probs) / temperature
    dlogits = loss_weight * (-advantage * dlogp + lambda_sparse * dpyes)
    return policy_term, sparsity_term, policy.backward(cache, dlogits)

"""Deterministic desk-scale task environment.

Tasks are derivation graphs: shared subtask chains whose values every
team needs (and can reuse through the bank), per-team private chains
that pad each team's schedule, and distractor lures whose summaries
mimic real shared keys but whose outputs are junk.  Costs are fixed in
virtual time units, so redundancy-reduction claims are exactly
checkable: solving costs ``solve_cost``, retrieving ``retrieve_cost``,
and consuming a lure inflates the victim's later steps.

The scripted backend solves its assigned chains first, then private
work, then reuses (or re-derives) the remaining shared subtasks; it is
deterministic given the per-team generator the runtime hands it.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, asdict

import numpy as np

from .controller import YES, StepTriplet
from .errors import ValidationError
from .metrics import RunMetrics, metrics_from_event_streams
from .runtime import (
    ConstantAdmission,
    EpisodeTrace,
    FinalMove,
    HeuristicAdmission,
    HistoryItem,
    MajorityAggregator,
    Move,
    RetrieveMove,
    StepMove,
    TaskSpec,
    run_episode,
)

CANONICAL_PREFIX = "result for subtask "

_DERIVED_RE = re.compile(r"derived value ([0-9a-f]+) for subtask (\S+)")


def canonical_key(node: str) -> str:
    """The summary text under which a shared subtask result is published."""
    return CANONICAL_PREFIX + node


def _digest(*parts) -> str:
    text = ":".join(str(p) for p in parts)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:6]


class SimScorer:
    """Weighted fraction of correct ``field=value`` pairs, in [0, 1]."""

    def __init__(self, answer_key: dict[str, str], binary: bool = False):
        if not answer_key:
            raise ValidationError("answer key must have at least one field")
        self.answer_key = dict(answer_key)
        self.binary = binary

    def score(self, answer: str) -> float:
        got: dict[str, str] = {}
        for part in answer.split(";"):
            if "=" in part:
                k, v = part.split("=", 1)
                got[k.strip()] = v.strip()
        correct = sum(1 for k, v in self.answer_key.items() if got.get(k) == v)
        frac = correct / len(self.answer_key)
        if self.binary:
            return 1.0 if frac == 1.0 else 0.0
        return frac


@dataclass
class SimTask:
    """A generated task: derivation DAG, distractor set, economics."""

    seed: int
    depth: int
    width: int
    overlap_count: int
    distractor_count: int
    shared_chains: list[list[str]]
    distractor_targets: list[str]
    values: dict[str, str]
    answer_key: dict[str, str]
    step_cap: int = 30
    p_fail: float = 0.15
    solve_cost: float = 10.0
    retrieve_cost: float = 1.0
    pollution_step_surcharge: float = 5.0
    pollution_recovery_steps: int = 1
    pollution_fail_boost: float = 0.2
    pollution_corrupt_rate: float = 0.35

    @property
    def task_id(self) -> str:
        return (
            f"sim-{self.seed}-d{self.depth}w{self.width}"
            f"o{self.overlap_count}x{self.distractor_count}"
        )

    def shared_nodes(self) -> list[str]:
        return [node for chain in self.shared_chains for node in chain]

    @property
    def query(self) -> str:
        nodes = self.shared_nodes()
        if nodes:
            return f"determine values of shared subtasks {' '.join(nodes)}"
        return "complete the local calibration work"

    def task_spec(self) -> TaskSpec:
        return TaskSpec(
            task_id=self.task_id,
            query=self.query,
            scorer_id="sim",
            step_cap=self.step_cap,
        )

    def scorer(self, binary: bool = False) -> SimScorer:
        return SimScorer(self.answer_key, binary=binary)

    def private_nodes(self, team: int) -> list[str]:
        return [
            f"t{team}p{c}n{l}" for c in range(self.width) for l in range(self.depth)
        ]

    def private_value(self, team: int, node: str) -> str:
        return _digest(self.seed, team, node)

    def lure_junk(self, lure_index: int) -> str:
        nonce = _digest(self.seed, "lure", lure_index)
        target = self.distractor_targets[lure_index]
        return (
            f"exploratory probe {nonce} around subtask {target}"
            " inconclusive unverified"
        )

    def render_answer(self, known_shared: dict[str, str]) -> str:
        if not self.shared_nodes():
            return "status=ok"
        return ";".join(f"{n}={known_shared[n]}" for n in sorted(known_shared))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SimTask":
        return cls(**json.loads(text))


def generate_task(
    seed: int,
    depth: int,
    width: int,
    overlap_count: int,
    distractor_count: int = 0,
    step_cap: int = 30,
    p_fail: float = 0.15,
    solve_cost: float = 10.0,
    retrieve_cost: float = 1.0,
    pollution_step_surcharge: float = 5.0,
    pollution_recovery_steps: int = 1,
    pollution_fail_boost: float = 0.2,
    pollution_corrupt_rate: float = 0.35,
) -> SimTask:
    """Reproducibly generate a task; identical seeds give identical tasks.

    Shared subtasks are laid out in prerequisite chains of length
    ``depth`` (the last chain may be shorter); every team additionally
    owns ``width`` private chains of the same depth.  Distractor lures
    target seeded shared subtasks, so they require ``overlap_count >= 1``.
    """
    if depth < 1 or width < 1:
        raise ValidationError("depth and width must be >= 1")
    if overlap_count < 0 or distractor_count < 0:
        raise ValidationError("counts must be >= 0")
    if distractor_count > 0 and overlap_count == 0:
        raise ValidationError("distractors need at least one shared subtask to mimic")
    if not 0.0 <= p_fail < 1.0:
        raise ValidationError("p_fail must be in [0, 1)")

    shared = [f"s{i}" for i in range(overlap_count)]
    chains = [shared[i : i + depth] for i in range(0, overlap_count, depth)]
    values = {node: _digest(seed, node) for node in shared}
    answer_key = dict(values) if shared else {"status": "ok"}

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD15C]))
    targets = [shared[int(rng.integers(len(shared)))] for _ in range(distractor_count)]

    return SimTask(
        seed=seed,
        depth=depth,
        width=width,
        overlap_count=overlap_count,
        distractor_count=distractor_count,
        shared_chains=chains,
        distractor_targets=targets,
        values=values,
        answer_key=answer_key,
        step_cap=step_cap,
        p_fail=p_fail,
        solve_cost=solve_cost,
        retrieve_cost=retrieve_cost,
        pollution_step_surcharge=pollution_step_surcharge,
        pollution_recovery_steps=pollution_recovery_steps,
        pollution_fail_boost=pollution_fail_boost,
        pollution_corrupt_rate=pollution_corrupt_rate,
    )


class _TeamPlan:
    def __init__(self, task: SimTask, team: int, k: int):
        self.team = team
        owned, foreign = [], []
        for c, chain in enumerate(task.shared_chains):
            (owned if c % k == team - 1 else foreign).extend(chain)
        self.own_nodes = owned
        self.foreign_nodes = foreign
        self.private_nodes = task.private_nodes(team)
        self.own_idx = 0
        self.priv_idx = 0
        self.lures: list[int] = [
            i for i in range(task.distractor_count) if i % k == team - 1
        ]
        self.lure_slot_open = True
        self.known_shared: dict[str, str] = {}
        self.consumed_ids: set[int] = set()
        self.own_junk: set[str] = set()
        self.pollution = 0
        self.fail_p = task.p_fail
        self.recovery_pending = 0
        self.recovery_count = 0
        self.steps = 0
        self.cursor = 0
        self.finished = False


class ScriptedBackend:
    """Deterministic per-team solver with a memory-reuse rule.

    Reuse rule: when the next needed shared subtask has a visible key
    matching its canonical summary, retrieve it instead of solving.
    Junk outputs (another team's lure) pollute the consumer: recovery
    steps, a per-step virtual-time surcharge, a higher retry rate, and a
    chance that its later solves silently yield corrupted values (which
    read like real results and spread through the bank).  A team
    recognizes its own lure output and is immune to it.
    """

    def __init__(self, task: SimTask, k: int):
        self.task = task
        self.k = k
        self._plans: dict[int, _TeamPlan] = {}

    def plan(self, team: int) -> _TeamPlan:
        if team not in self._plans:
            self._plans[team] = _TeamPlan(self.task, team, self.k)
        return self._plans[team]

    # -- helpers -------------------------------------------------------------

    def _absorb_history(self, st: _TeamPlan, history: list[HistoryItem]) -> None:
        task = self.task
        while st.cursor < len(history):
            item = history[st.cursor]
            st.cursor += 1
            if item.kind != "memory":
                continue
            _, _, value = item.text.partition(": ")
            if value in st.own_junk:
                continue
            match = _DERIVED_RE.search(value)
            if match and match.group(2) in task.values:
                st.known_shared[match.group(2)] = match.group(1)
            else:
                st.pollution += 1
                st.fail_p = min(0.85, st.fail_p + task.pollution_fail_boost)
                st.recovery_pending += task.pollution_recovery_steps

    def _step_cost(self, st: _TeamPlan) -> float:
        return self.task.solve_cost + st.pollution * self.task.pollution_step_surcharge

    def _final(self, st: _TeamPlan) -> FinalMove:
        st.finished = True
        return FinalMove(self.task.render_answer(st.known_shared))

    def _budget_left(self, st: _TeamPlan) -> bool:
        return st.steps < self.task.step_cap - 1

    def _solve_attempt(
        self, st: _TeamPlan, node: str, kind: str, rng: np.random.Generator
    ) -> Move:
        task = self.task
        st.steps += 1
        cost = self._step_cost(st)
        if rng.random() < st.fail_p:
            return StepMove(
                StepTriplet(
                    agent_input=f"derive subtask {node} from prerequisites",
                    step_summary=f"attempt at subtask {node} failed",
                    agent_output=f"error while deriving subtask {node} retrying",
                ),
                cost=cost,
                label=f"retry:{node}",
            )
        if kind == "private":
            value = task.private_value(st.team, node)
            st.priv_idx += 1
            return StepMove(
                StepTriplet(
                    agent_input=f"calibrate local parameter {node}",
                    step_summary=f"local calibration {node} for team {st.team}",
                    agent_output=f"calibrated local parameter {value} for team {st.team}",
                ),
                cost=cost,
                label=f"private:{node}",
            )
        value = task.values[node]
        if st.pollution > 0:
            corrupt_p = min(0.8, st.pollution * task.pollution_corrupt_rate)
            if rng.random() < corrupt_p:
                value = _digest(task.seed, node, "corrupt")
        st.known_shared[node] = value
        if kind == "own":
            st.own_idx += 1
        return StepMove(
            StepTriplet(
                agent_input=f"derive subtask {node} from prerequisites",
                step_summary=canonical_key(node),
                agent_output=f"derived value {value} for subtask {node} confirmed stable",
            ),
            cost=cost,
            label=f"solve:{node}",
        )

    def _emit_lure(self, st: _TeamPlan, rng: np.random.Generator) -> Move:
        task = self.task
        i = st.lures.pop(0)
        target = task.distractor_targets[i]
        junk = task.lure_junk(i)
        st.own_junk.add(junk)
        st.steps += 1
        st.lure_slot_open = False
        return StepMove(
            StepTriplet(
                agent_input=f"investigate shortcut for subtask {target}",
                step_summary=canonical_key(target),
                agent_output=junk,
            ),
            cost=self._step_cost(st),
            label=f"lure:{target}",
        )

    # -- protocol ------------------------------------------------------------

    def next_move(
        self,
        team: int,
        query: str,
        history: list[HistoryItem],
        visible_keys: list[tuple[int, str]],
        rng: np.random.Generator,
    ) -> Move:
        task = self.task
        st = self.plan(team)
        self._absorb_history(st, history)

        if st.finished:
            return self._final(st)

        if st.recovery_pending > 0:
            if not self._budget_left(st):
                return self._final(st)
            st.recovery_pending -= 1
            st.recovery_count += 1
            st.steps += 1
            return StepMove(
                StepTriplet(
                    agent_input="re-verify working context",
                    step_summary=f"context cleanup round {st.recovery_count} for team {team}",
                    agent_output="discarded misleading shared result rebuilding context",
                ),
                cost=self._step_cost(st),
                label="recovery",
            )

        while st.own_idx < len(st.own_nodes) and st.own_nodes[st.own_idx] in st.known_shared:
            st.own_idx += 1

        if st.own_idx < len(st.own_nodes) or st.priv_idx < len(st.private_nodes):
            if not self._budget_left(st):
                return self._final(st)
            if st.lures and st.lure_slot_open:
                return self._emit_lure(st, rng)
            st.lure_slot_open = True
            if st.own_idx < len(st.own_nodes):
                node = st.own_nodes[st.own_idx]
                reuse = self._reuse_option(st, node, visible_keys)
                if reuse is not None:
                    return reuse
                return self._solve_attempt(st, node, "own", rng)
            return self._solve_attempt(st, st.private_nodes[st.priv_idx], "private", rng)

        if st.lures:
            if not self._budget_left(st):
                return self._final(st)
            return self._emit_lure(st, rng)

        pending = [n for n in st.foreign_nodes if n not in st.known_shared]
        if pending:
            node = pending[0]
            reuse = self._reuse_option(st, node, visible_keys)
            if reuse is not None:
                return reuse
            if not self._budget_left(st):
                return self._final(st)
            return self._solve_attempt(st, node, "foreign", rng)

        return self._final(st)

    def _reuse_option(
        self, st: _TeamPlan, node: str, visible_keys: list[tuple[int, str]]
    ) -> RetrieveMove | None:
        """Memory-reuse rule: retrieve the earliest unconsumed entry whose
        key matches the needed subtask, instead of solving it."""
        wanted = canonical_key(node)
        options = [
            eid
            for eid, summary in visible_keys
            if summary == wanted and eid not in st.consumed_ids
        ]
        if not options:
            return None
        eid = min(options)
        st.consumed_ids.add(eid)
        return RetrieveMove(eid, cost=self.task.retrieve_cost)


# -- variant comparison ------------------------------------------------------

VARIANT_NAMES = ("no-memory", "add-all", "llm-proxy", "learned")


def llm_proxy_rule() -> HeuristicAdmission:
    """Scripted stand-in for a prompted LLM judge: admit steps publishing
    a plausibly shareable key, junk or not (it cannot inspect outcomes)."""
    return HeuristicAdmission(lambda t: t.step_summary.startswith(CANONICAL_PREFIX))


def variant_policy(name: str, trained=None):
    if name == "no-memory":
        return None
    if name == "add-all":
        return ConstantAdmission(YES)
    if name == "llm-proxy":
        return llm_proxy_rule()
    if name == "learned":
        if trained is None:
            raise ValidationError("the learned variant needs a trained policy")
        return trained
    raise ValidationError(f"unknown variant {name!r}")


def run_variant(
    tasks: list[SimTask],
    policy,
    k: int,
    seeds: list[int],
    provider,
    decision_mode: str = "greedy",
    keep_traces: bool = False,
) -> tuple[RunMetrics, list[EpisodeTrace]]:
    """Run every (task, seed) pair under one admission policy and score it."""
    streams: list[list[dict]] = []
    traces: list[EpisodeTrace] = []
    for task in tasks:
        scorer = task.scorer()
        for seed in seeds:
            backend = ScriptedBackend(task, k)
            trace = run_episode(
                task.task_spec(),
                k,
                backend,
                policy,
                provider,
                MajorityAggregator(),
                seed=seed,
                decision_mode=decision_mode,
            )
            trace.events.append(
                {
                    "kind": "score",
                    "agg_score": scorer.score(trace.aggregate_answer),
                    "first_score": scorer.score(trace.first_answer),
                }
            )
            streams.append(trace.events)
            if keep_traces:
                traces.append(trace)
    return metrics_from_event_streams(streams), traces


def run_matrix(
    tasks: list[SimTask],
    policies: dict[str, object],
    k: int,
    seeds: list[int],
    provider,
    decision_mode: str = "greedy",
) -> dict[str, RunMetrics]:
    """Compare admission strategies over a common task/seed grid."""
    return {
        name: run_variant(tasks, policy, k, seeds, provider, decision_mode)[0]
        for name, policy in policies.items()
    }


def solve_counts(events: list[dict]) -> dict[str, int]:
    """Successful shared-subtask computations per node, from step labels."""
    counts: dict[str, int] = {}
    for event in events:
        if event.get("kind") == "step" and str(event.get("label", "")).startswith("solve:"):
            node = event["label"].split(":", 1)[1]
            counts[node] = counts.get(node, 0) + 1
    return counts


def prob_yes_by_label(traces: list[EpisodeTrace]) -> dict[str, list[float]]:
    """Controller admit probabilities grouped by step class (solve, lure,
    private, retry, recovery); ground-truth labels come from the backend."""
    out: dict[str, list[float]] = {}
    for trace in traces:
        for record in trace.decisions():
            label_class = record.label.split(":", 1)[0]
            out.setdefault(label_class, []).append(record.decision.prob_yes)
    return out

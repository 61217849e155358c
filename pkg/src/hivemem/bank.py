"""Global shared memory bank: an append-only, linearizable key-value store.

One bank is instantiated per task episode.  Agent teams see only the
summary keys; full outputs are returned on explicit retrieval, and every
admit/retrieve is logged with a global sequence number so concurrent
schedules can be replayed and verified after the fact.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, EntryNotFoundError, ValidationError


@dataclass(frozen=True)
class MemoryEntry:
    entry_id: int
    summary: str
    output: str
    source_team: int
    source_step: int
    admit_seq: int


@dataclass(frozen=True)
class RetrievalRecord:
    entry_id: int
    consumer_team: int
    consumer_step: int
    retrieve_seq: int


@dataclass(frozen=True)
class UsageFlags:
    used: bool
    cross_team_used: bool


class MemoryBank:
    """Append-only store of (summary, output) pairs with usage accounting.

    Safe for concurrent access by any number of team executors plus the
    controller: all operations take a single lock, which makes every
    schedule trivially linearizable; the recorded sequence numbers let
    tests verify that property from the outside.

    ``event_sink``, when given, receives one dict per admit/retrieve with
    exactly the fields (kind, seq, entry_id, team, step, t_ns); it is
    called while the lock is held so the emitted order matches the
    linearization order, and must therefore be cheap.
    """

    def __init__(
        self,
        embedding_dim: int,
        event_sink: Callable[[dict], None] | None = None,
        clock_ns: Callable[[], int] = time.time_ns,
    ):
        if embedding_dim < 1:
            raise ConfigurationError("embedding_dim must be >= 1")
        self.embedding_dim = embedding_dim
        self._entries: list[MemoryEntry] = []
        self._key_embeddings: list[np.ndarray] = []
        self._retrieval_log: list[RetrievalRecord] = []
        self._seq = 0
        self._lock = threading.Lock()
        self._event_sink = event_sink
        self._clock_ns = clock_ns

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    @property
    def entries(self) -> list[MemoryEntry]:
        """Snapshot of all entries in admission order."""
        with self._lock:
            return list(self._entries)

    @property
    def retrieval_log(self) -> list[RetrievalRecord]:
        with self._lock:
            return list(self._retrieval_log)

    def admit(
        self,
        summary: str,
        output: str,
        summary_embedding: np.ndarray,
        source_team: int,
        source_step: int,
    ) -> int:
        """Append an entry; returns the new entry_id (1-based, dense)."""
        if not summary or not output:
            raise ValidationError("summary and output must be non-empty")
        if source_team < 1 or source_step < 1:
            raise ValidationError("source_team and source_step are 1-based")
        emb = np.asarray(summary_embedding, dtype=np.float64)
        if emb.shape != (self.embedding_dim,):
            raise ConfigurationError(
                f"embedding shape {emb.shape} != ({self.embedding_dim},)"
            )
        with self._lock:
            self._seq += 1
            entry = MemoryEntry(
                entry_id=len(self._entries) + 1,
                summary=summary,
                output=output,
                source_team=source_team,
                source_step=source_step,
                admit_seq=self._seq,
            )
            self._entries.append(entry)
            self._key_embeddings.append(emb.copy())
            if self._event_sink is not None:
                self._event_sink(
                    {
                        "kind": "admit",
                        "seq": entry.admit_seq,
                        "entry_id": entry.entry_id,
                        "team": source_team,
                        "step": source_step,
                        "t_ns": self._clock_ns(),
                    }
                )
            return entry.entry_id

    def list_keys(self) -> list[tuple[int, str]]:
        """Point-in-time snapshot of (entry_id, summary), ordered by id."""
        with self._lock:
            return [(e.entry_id, e.summary) for e in self._entries]

    def list_keys_seq(self) -> tuple[int, list[tuple[int, str]]]:
        """list_keys plus the linearization point, for concurrency tests."""
        with self._lock:
            self._seq += 1
            return self._seq, [(e.entry_id, e.summary) for e in self._entries]

    def retrieve(self, entry_id: int, consumer_team: int, consumer_step: int) -> str:
        """Return the stored output verbatim and log the retrieval.

        Unknown ids raise :class:`EntryNotFoundError`; callers treat that
        as a failed step (agent-issued ids may be stale or hallucinated).
        """
        with self._lock:
            if not 1 <= entry_id <= len(self._entries):
                raise EntryNotFoundError(f"no entry with id {entry_id}")
            self._seq += 1
            record = RetrievalRecord(
                entry_id=entry_id,
                consumer_team=consumer_team,
                consumer_step=consumer_step,
                retrieve_seq=self._seq,
            )
            self._retrieval_log.append(record)
            entry = self._entries[entry_id - 1]
            if self._event_sink is not None:
                self._event_sink(
                    {
                        "kind": "retrieve",
                        "seq": record.retrieve_seq,
                        "entry_id": entry_id,
                        "team": consumer_team,
                        "step": consumer_step,
                        "t_ns": self._clock_ns(),
                    }
                )
            return entry.output

    def context_snapshot(self) -> tuple[list[MemoryEntry], np.ndarray]:
        """Consistent (entries, key embedding matrix) pair for the controller.

        The matrix has shape (n_entries, embedding_dim) and rows in entry
        order; it is the cached embeddings, never a recomputation.
        """
        with self._lock:
            if self._entries:
                matrix = np.stack(self._key_embeddings)
            else:
                matrix = np.zeros((0, self.embedding_dim), dtype=np.float64)
            return list(self._entries), matrix

    def key_embeddings(self) -> np.ndarray:
        return self.context_snapshot()[1]

    def get_entry(self, entry_id: int) -> MemoryEntry:
        with self._lock:
            if not 1 <= entry_id <= len(self._entries):
                raise EntryNotFoundError(f"no entry with id {entry_id}")
            return self._entries[entry_id - 1]

    def usage_sets(self) -> dict[tuple[int, int], UsageFlags]:
        """Per admitted step: was its entry ever retrieved, and cross-team?

        Meant to be called after the episode is finished.  Own-team
        retrievals count as ``used`` but not ``cross_team_used``.
        """
        with self._lock:
            entries = list(self._entries)
            log = list(self._retrieval_log)
        by_id: dict[int, list[RetrievalRecord]] = {}
        for rec in log:
            by_id.setdefault(rec.entry_id, []).append(rec)
        result: dict[tuple[int, int], UsageFlags] = {}
        for entry in entries:
            recs = by_id.get(entry.entry_id, [])
            used = len(recs) > 0
            cross = any(r.consumer_team != entry.source_team for r in recs)
            key = (entry.source_team, entry.source_step)
            if key in result:
                prev = result[key]
                result[key] = UsageFlags(prev.used or used, prev.cross_team_used or cross)
            else:
                result[key] = UsageFlags(used, cross)
        return result

    def used_entry_ids(self) -> set[int]:
        """Entry ids retrieved at least once (any consumer)."""
        with self._lock:
            return {rec.entry_id for rec in self._retrieval_log}

"""Line-delimited episode trace files (schema version 1).

One JSON object per line.  Event kinds and their required fields:

  header          schema, task_id, k, mode, cap
  step            team, step, label, vt_start, vt_end
  decision        team, step, action, prob_yes, log_prob, fail_closed
  admit           seq, entry_id, team, step, t_ns          (exactly these)
  retrieve        seq, entry_id, team, step, t_ns          (exactly these)
  failed_retrieve team, entry_id, vt
  final           team, step, answer, vt
  aggregate       answer, first_team, first_answer, vt
  score           agg_score, first_score                   (eval extension)

``admit``/``retrieve`` lines are emitted by the memory bank itself and
carry only the six fields above, so external tools can recompute memory
statistics bit-exactly from the file alone.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Iterable, Iterator

from .errors import SchemaError

SCHEMA_VERSION = 1

_REQUIRED_FIELDS: dict[str, tuple[str, ...]] = {
    "header": ("schema", "task_id", "k", "mode", "cap"),
    "step": ("team", "step", "label", "vt_start", "vt_end"),
    "decision": ("team", "step", "action", "prob_yes", "log_prob", "fail_closed"),
    "admit": ("seq", "entry_id", "team", "step", "t_ns"),
    "retrieve": ("seq", "entry_id", "team", "step", "t_ns"),
    "failed_retrieve": ("team", "entry_id", "vt"),
    "final": ("team", "step", "answer", "vt"),
    "aggregate": ("answer", "first_team", "first_answer", "vt"),
    "score": ("agg_score", "first_score"),
}


class TraceSink:
    """Thread-safe append-only event channel (single writer to the list)."""

    def __init__(self) -> None:
        self._events: list[dict] = []
        self._lock = threading.Lock()

    def __call__(self, event: dict) -> None:
        with self._lock:
            self._events.append(event)

    @property
    def events(self) -> list[dict]:
        with self._lock:
            return list(self._events)


def validate_event(event: dict, line_number: int | None = None) -> dict:
    kind = event.get("kind")
    if kind not in _REQUIRED_FIELDS:
        raise SchemaError(f"unknown event kind {kind!r}", line_number)
    missing = [f for f in _REQUIRED_FIELDS[kind] if f not in event]
    if missing:
        raise SchemaError(f"{kind} event missing fields {missing}", line_number)
    return event


def write_events(path: str | Path, events: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(json.dumps(event, sort_keys=True) + "\n")


def read_events(path: str | Path) -> Iterator[dict]:
    """Yield validated events; raises SchemaError naming the bad line."""
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                event = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", i) from exc
            if not isinstance(event, dict):
                raise SchemaError("event is not an object", i)
            yield validate_event(event, i)

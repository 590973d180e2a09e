"""Append-only provenance ledger, element-origin index and the deleted-value guard."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field, asdict

from xtp.typesys import Span

OUTCOMES = ("ok", "rerouted", "exhausted", "discarded", "error", "fixed")


@dataclass
class TraceEvent:
    invocation_id: int
    node_id: str
    impl_id: str
    input_ids: list[str]
    output_ids: list[str]
    tokens_in: int = 0
    tokens_out: int = 0
    latency_ms: float = 0.0
    confidence: float | None = None
    outcome: str = "ok"
    started_at: float = 0.0
    ended_at: float = 0.0
    warnings: list[dict] = field(default_factory=list)
    elements: dict[str, list[list]] = field(default_factory=dict)
    deleted: list[str] = field(default_factory=list)
    detail: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, obj: dict) -> "TraceEvent":
        known = cls.__dataclass_fields__
        missing = [k for k in ("invocation_id", "node_id", "impl_id", "input_ids", "output_ids",
                               "outcome") if k not in obj]
        if missing:
            raise LedgerError(f"trace event lacks {missing}")
        return cls(**{k: v for k, v in obj.items() if k in known})


class LedgerError(ValueError):
    pass


class ProvenanceLedger:
    """Events plus the values they produced and the element-origin index.

    A single committer appends; readers may take snapshots at any time.
    """

    def __init__(self, next_invocation: int = 1, next_value: int = 1):
        self.events: list[TraceEvent] = []
        self.values: dict = {}
        self.elements: dict[str, frozenset[Span]] = {}
        self._next_inv = next_invocation
        self._next_val = next_value
        self._lock = threading.Lock()

    # ids --------------------------------------------------------------

    def new_invocation_id(self) -> int:
        with self._lock:
            n = self._next_inv
            self._next_inv += 1
            return n

    def new_value_id(self) -> str:
        with self._lock:
            n = self._next_val
            self._next_val += 1
            return f"v{n}"

    # appends ----------------------------------------------------------

    def append(self, event: TraceEvent, outputs: dict | None = None) -> None:
        with self._lock:
            if self.events and event.invocation_id <= self.events[-1].invocation_id:
                raise LedgerError("invocation ids must increase")
            self.events.append(event)
            for vid, value in (outputs or {}).items():
                if vid not in event.output_ids:
                    raise LedgerError(f"value {vid} is not an output of event {event.invocation_id}")
                self.values[vid] = value
            for eid, spans in event.elements.items():
                self.elements[eid] = frozenset(Span.from_list(s) for s in spans)

    def copy_event(self, event: TraceEvent, values: dict) -> None:
        """Carry an event over from another ledger, keeping its ids."""
        self.append(event, {v: values[v] for v in event.output_ids if v in values})
        with self._lock:
            self._next_inv = max(self._next_inv, event.invocation_id + 1)
            for v in event.output_ids:
                self._next_val = max(self._next_val, int(v[1:]) + 1)

    # queries ----------------------------------------------------------

    def events_for(self, node_id: str) -> list[TraceEvent]:
        return [e for e in self.events if e.node_id == node_id]

    def producer(self, value_id: str) -> TraceEvent:
        hits = [e for e in self.events if value_id in e.output_ids]
        if len(hits) != 1:
            raise LedgerError(f"value {value_id} has {len(hits)} producing events")
        return hits[0]

    def deleted_registry(self) -> "DeletedValueRegistry":
        reg = DeletedValueRegistry()
        for e in self.events:
            if e.outcome == "ok":
                reg.add_all(e.deleted, e.invocation_id)
        return reg

    @property
    def max_ids(self) -> tuple[int, int]:
        return self._next_inv - 1, self._next_val - 1

    # io ---------------------------------------------------------------

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)

    @classmethod
    def from_jsonl(cls, text: str, values: dict | None = None) -> "ProvenanceLedger":
        ledger = cls()
        values = values or {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise LedgerError(f"trace line {lineno}: {e}") from None
            ledger.copy_event(TraceEvent.from_dict(obj), values)
        return ledger


# --------------------------------------------------------------------------
# contribution bound

def contributing_elements(index: dict[str, frozenset[Span]], entity_spans) -> list[str]:
    spans = list(entity_spans)
    return sorted(eid for eid, origins in index.items()
                  if any(o.overlaps(s) for o in origins for s in spans))


def contribution_bound(ledger: ProvenanceLedger | dict, entity_spans) -> int:
    """Number of structured elements whose origins intersect any of ``entity_spans``."""
    index = ledger.elements if isinstance(ledger, ProvenanceLedger) else ledger
    return len(contributing_elements(index, entity_spans))


# --------------------------------------------------------------------------
# deleted-value guard

@dataclass
class DeletedValueRegistry:
    entries: dict[str, int] = field(default_factory=dict)  # case-folded value -> invocation id

    def add(self, value: str, invocation_id: int) -> None:
        key = value.casefold()
        if key and key not in self.entries:
            self.entries[key] = invocation_id

    def add_all(self, values, invocation_id: int) -> None:
        for v in sorted(values):
            self.add(v, invocation_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, value: str) -> bool:
        return value.casefold() in self.entries


@dataclass(frozen=True)
class Violation:
    value: str
    start: int  # byte offsets into the UTF-8 candidate text
    end: int


def guard_projection(candidate: str, registry: DeletedValueRegistry) -> list[Violation]:
    """Every occurrence of every registered value, compared case-insensitively."""
    # casefolding can change length ('ß' -> 'ss'), so map each folded char to its source bytes
    folded_parts, starts, ends = [], [], []
    byte = 0
    for ch in candidate:
        width = len(ch.encode("utf-8"))
        f = ch.casefold()
        folded_parts.append(f)
        starts.extend([byte] * len(f))
        ends.extend([byte + width] * len(f))
        byte += width
    folded = "".join(folded_parts)
    out = []
    for value in sorted(registry.entries):
        at = folded.find(value)
        while at >= 0:
            out.append(Violation(value, starts[at], ends[at + len(value) - 1]))
            at = folded.find(value, at + 1)
    return sorted(out, key=lambda v: (v.start, v.value))

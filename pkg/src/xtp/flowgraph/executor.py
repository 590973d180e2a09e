"""Dynamic-routing executor and replay.

Ready nodes run concurrently in batches; results are committed one at a time in topological
order, which is where invocation ids are assigned, routing is decided and the ledger grows.
"""

from __future__ import annotations

import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from xtp.flowgraph.graph import Edge, FlowGraph, entry_plan
from xtp.flowgraph.ledger import (
    DeletedValueRegistry, ProvenanceLedger, TraceEvent, Violation, guard_projection,
)
from xtp.opcore import REGISTRY as OPS, OpContext
from xtp.projection import DiagramSource, Report
from xtp.typesys import (
    REGISTRY as COERCIONS, Base, CoercionRegistry, Provenance, TextDoc, TypedValue, is_subtype,
)


INPUT_NODE = "@input"


class ExecutionError(Exception):
    def __init__(self, message: str, node_id: str | None = None, invocation_id: int | None = None):
        self.node_id = node_id
        self.invocation_id = invocation_id
        self.ledger: ProvenanceLedger | None = None  # the partial trace, attached on the way out
        super().__init__(message)


class RetryExhausted(ExecutionError):
    def __init__(self, node_id: str, attempts: int, last_confidence: float | None, edge: str):
        self.attempts = attempts
        self.last_confidence = last_confidence
        super().__init__(f"retry budget of {edge} exhausted at node {node_id} after {attempts} "
                         f"attempts (last confidence {last_confidence})", node_id)


class GuardViolation(ExecutionError):
    def __init__(self, node_id: str, violations: list[Violation]):
        self.violations = violations
        shown = ", ".join(f"{v.value!r}@{v.start}" for v in violations[:5])
        super().__init__(f"output of {node_id} contains deleted values: {shown}", node_id)


class ReplayError(ExecutionError):
    pass


@dataclass
class RunResult:
    outputs: dict[str, TypedValue]
    ledger: ProvenanceLedger
    registry: DeletedValueRegistry
    retries: dict[str, int] = field(default_factory=dict)

    @property
    def invocations(self) -> int:
        """Operator invocations, excluding input loading and replay fixes."""
        return sum(1 for e in self.ledger.events if e.node_id != INPUT_NODE and e.outcome != "fixed")


def projected_texts(value: TypedValue) -> list[tuple[str, str]]:
    """(label, text) pairs the guard must clear for an exit value."""
    p = value.payload
    if isinstance(p, Report):
        return [(s.title or f"section {i}", s.content) for i, s in enumerate(p.sections) if s.guarded]
    if isinstance(p, DiagramSource):
        return [("diagram", p.body)]
    if isinstance(p, TextDoc) and value.tag.base in (Base.TEXT, Base.UNSTRUCTURED):
        return [("text", p.text)]
    return []


def guard_value(value: TypedValue, registry: DeletedValueRegistry) -> list[Violation]:
    out = []
    for _, text in projected_texts(value):
        out.extend(guard_projection(text, registry))
    return out


def node_rng(seed: int, node_id: str) -> np.random.Generator:
    """Noise source that depends only on the run seed and the node, not on scheduling."""
    return np.random.default_rng([seed, zlib.crc32(node_id.encode("utf-8"))])


@dataclass
class _Attempt:
    node_id: str
    impl_id: str
    input_ids: list[str]
    inputs: list[TypedValue]
    epoch: int = 0
    output: object = None
    error: BaseException | None = None
    started_at: float = 0.0
    ended_at: float = 0.0


class _Run:
    def __init__(self, g: FlowGraph, assignment: dict, gateway, seed: int, max_workers: int,
                 coercions: CoercionRegistry, ledger: ProvenanceLedger,
                 registry: DeletedValueRegistry, guard: bool):
        self.g = g
        self.assignment = dict(assignment)
        self.gateway = gateway
        self.seed = seed
        self.max_workers = max(1, max_workers)
        self.coercions = coercions
        self.ledger = ledger
        self.registry = registry
        self.guard = guard
        self.status = {n: "pending" for n in g.order}
        self.values: dict[str, TypedValue] = {}
        self.edge_state: dict[int, str | None] = {e.index: None for e in g.edges if e.forward}
        self.used: dict[int, int] = {}
        self.override: dict[str, str] = {}
        self.attempts: dict[str, int] = {}
        self.epoch: dict[str, int] = {n: 0 for n in g.order}
        self.entry_value: TypedValue | None = None
        self.allowed_targets: set[str] | None = None  # replay restricts back-routes
        self.invocations = 0

    # helpers ----------------------------------------------------------

    def impl_for(self, node_id: str) -> str:
        node = self.g.node(node_id)
        impl = self.override.get(node_id) or self.assignment.get(node_id)
        if impl is None:
            if len(node.spec.candidates) == 1:
                return node.spec.candidates[0].impl_id
            raise ExecutionError(f"plan assigns no implementation to node {node_id}", node_id)
        node.spec.candidate(impl)
        return impl

    def _coerce(self, value: TypedValue, chain) -> TypedValue:
        return self.coercions.apply(chain, value) if chain else value

    def gather(self, node_id: str) -> tuple[list[str], list[TypedValue]] | None:
        if node_id in self.g.entries:
            plan = entry_plan(self.g, node_id, self.entry_value.tag, self.coercions)
            return [self.entry_value.value_id], [self._coerce(self.entry_value, plan.chain)]
        node = self.g.node(node_id)
        incoming = self.g.incoming(node_id)
        delivered = [e for e in incoming if self.edge_state[e.index] == "delivered"]
        if node.multi_port:
            if len(delivered) != len(incoming):
                return None
        elif not delivered:
            return None
        if not node.multi_port:
            delivered = delivered[:1]
        ids = [self.values[e.src].value_id for e in delivered]
        vals = [self._coerce(self.values[e.src], e.coercion) for e in delivered]
        return ids, vals

    def _resolved(self, node_id: str) -> bool:
        return all(self.edge_state[e.index] is not None for e in self.g.incoming(node_id))

    def _mark_outgoing(self, node_id: str, value: TypedValue | None) -> None:
        for e in self.g.outgoing(node_id):
            if value is None:
                self.edge_state[e.index] = "skipped"
            elif e.kind == "predicate":
                self.edge_state[e.index] = "delivered" if e.when(self._env(value)) else "skipped"
            else:
                self.edge_state[e.index] = "delivered"

    @staticmethod
    def _env(value: TypedValue) -> dict:
        env = dict(value.metadata)
        env["confidence"] = value.confidence
        return env

    def _invalidate(self, target: str) -> None:
        stale = {target} | self.g.descendants(target)
        for n in stale:
            self.status[n] = "pending"
            self.epoch[n] += 1
            self.values.pop(n, None)
        for e in self.g.edges:
            if e.forward and e.src in stale:
                self.edge_state[e.index] = None

    # main loop --------------------------------------------------------

    def settle_skips(self) -> None:
        changed = True
        while changed:
            changed = False
            for n in self.g.order:
                if self.status[n] != "pending" or n in self.g.entries or not self._resolved(n):
                    continue
                if self.gather(n) is None:
                    self.status[n] = "skipped"
                    self._mark_outgoing(n, None)
                    changed = True

    def ready(self) -> list[str]:
        return [n for n in self.g.order if self.status[n] == "pending"
                and (n in self.g.entries or self._resolved(n))]

    def loop(self) -> None:
        cap = len(self.g.nodes) * (1 + self.g.total_retry_budget())
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            while True:
                self.settle_skips()
                batch = self.ready()
                if not batch:
                    break
                snapshot = dict(self.ledger.elements)
                attempts = []
                for n in batch:
                    ids, vals = self.gather(n)
                    attempts.append(_Attempt(n, self.impl_for(n), ids, vals, self.epoch[n]))
                futures = [pool.submit(self._invoke, a, snapshot) for a in attempts]
                for f in futures:
                    f.result()
                for a in attempts:
                    self.invocations += 1
                    if self.invocations > cap:
                        raise ExecutionError(f"invocation count exceeded bound {cap}", a.node_id)
                    self.commit(a)

    def _invoke(self, a: _Attempt, snapshot: dict) -> None:
        node = self.g.node(a.node_id)
        cand = node.spec.candidate(a.impl_id)
        ctx = OpContext(a.node_id, node.params, cand, self.gateway,
                        node_rng(self.seed, a.node_id), snapshot)
        a.started_at = time.time()
        t0 = time.perf_counter()
        try:
            a.output = OPS[node.op].resolve(cand)(ctx, a.inputs)
        except Exception as e:  # surfaced with the event id at commit
            a.error = e
        a.ended_at = a.started_at + (time.perf_counter() - t0)

    def commit(self, a: _Attempt) -> None:
        node = self.g.node(a.node_id)
        inv = self.ledger.new_invocation_id()
        self.attempts[a.node_id] = self.attempts.get(a.node_id, 0) + 1
        latency = round((a.ended_at - a.started_at) * 1000.0, 3)
        base = dict(invocation_id=inv, node_id=a.node_id, impl_id=a.impl_id, input_ids=a.input_ids,
                    started_at=a.started_at, ended_at=a.ended_at, latency_ms=latency)
        if a.epoch != self.epoch[a.node_id]:  # invalidated by an earlier commit in this batch
            self.ledger.append(TraceEvent(output_ids=[], outcome="discarded", **base))
            return
        if a.error is not None:
            self.ledger.append(TraceEvent(output_ids=[], outcome="error",
                                          detail=f"{type(a.error).__name__}: {a.error}", **base))
            raise ExecutionError(f"node {a.node_id} (invocation {inv}) failed: {a.error}",
                                 a.node_id, inv) from a.error
        out = a.output
        if out.latency_ms is not None:
            base["latency_ms"] = out.latency_ms
        tag = out.tag or node.spec.out_type
        if not is_subtype(tag, node.spec.out_type):
            self.ledger.append(TraceEvent(output_ids=[], outcome="error",
                                          detail=f"output tag {tag} not within {node.spec.out_type}",
                                          **base))
            raise ExecutionError(f"node {a.node_id} produced {tag}, declared {node.spec.out_type}",
                                 a.node_id, inv)
        vid = self.ledger.new_value_id()
        if out.elements:
            origins = frozenset().union(*out.elements.values())
        else:
            origins = frozenset().union(*(v.provenance.origins for v in a.inputs)) if a.inputs \
                else frozenset()
        chain = sorted({c for v in a.inputs for c in v.provenance.chain} | {inv})
        meta = dict(out.metadata)
        if out.warnings:
            meta.setdefault("warnings", len(out.warnings))
        value = TypedValue(tag, out.payload, Provenance(origins, tuple(chain)),
                           float(out.confidence), vid, meta)
        fired = self._back_route(value, a.node_id)
        event = TraceEvent(output_ids=[vid], tokens_in=out.tokens_in, tokens_out=out.tokens_out,
                           confidence=value.confidence, warnings=list(out.warnings), **base)
        if fired is None:
            event.outcome = "ok"
            event.elements = {k: sorted(s.to_list() for s in v) for k, v in sorted(out.elements.items())}
            event.deleted = sorted(out.deleted_values)
            self.ledger.append(event, {vid: value})
            self.registry.add_all(out.deleted_values, inv)
            self.values[a.node_id] = value
            self.status[a.node_id] = "done"
            self._mark_outgoing(a.node_id, value)
            return
        edge: Edge = fired
        target = edge.back_target
        used = self.used.get(edge.index, 0)
        if used >= edge.max_retries:
            event.outcome = "exhausted"
            event.detail = f"retry budget {edge.max_retries} of {edge.label} exhausted"
            self.ledger.append(event, {vid: value})
            raise RetryExhausted(a.node_id, self.attempts[a.node_id], value.confidence, edge.label)
        if self.allowed_targets is not None and target not in self.allowed_targets:
            event.outcome = "error"
            event.detail = f"back-route to {target} leaves the replay closure"
            self.ledger.append(event, {vid: value})
            raise ReplayError(f"replay would re-route {a.node_id} back to {target}, "
                              f"outside the replayed region", a.node_id, inv)
        self.used[edge.index] = used + 1
        event.outcome = "rerouted"
        event.detail = f"{edge.kind} edge {edge.label} -> {target}" + (
            f" escalating to {edge.escalation}" if edge.escalation else "")
        self.ledger.append(event, {vid: value})
        if edge.escalation:
            self.override[target] = edge.escalation
        self._invalidate(target)

    def _back_route(self, value: TypedValue, node_id: str) -> Edge | None:
        for e in self.g.back_edges(node_id):
            if e.kind == "confidence" and value.confidence < e.threshold:
                return e
            if e.kind == "loopback" and e.when(self._env(value)):
                return e
        return None

    def result(self) -> RunResult:
        outputs = {n: self.values[n] for n in self.g.exits if self.status[n] == "done"}
        if self.guard:
            for n, v in outputs.items():
                violations = guard_value(v, self.registry)
                if violations:
                    raise GuardViolation(n, violations)
        retries = {e.label: self.used.get(e.index, 0) for e in self.g.edges
                   if e.back_target is not None}
        return RunResult(outputs, self.ledger, self.registry, retries)


def execute(g: FlowGraph, inputs, assignment: dict | None = None, *, gateway=None, seed: int = 0,
            max_workers: int = 4, coercions: CoercionRegistry = COERCIONS,
            ledger: ProvenanceLedger | None = None, guard: bool = True) -> RunResult:
    """Run one datum through the graph. ``inputs`` is a TypedValue (or a one-element list)."""
    if isinstance(inputs, (list, tuple)):
        if len(inputs) != 1:
            raise ExecutionError("execute takes exactly one input value per datum")
        inputs = inputs[0]
    ledger = ledger if ledger is not None else ProvenanceLedger()
    run = _Run(g, assignment or {}, gateway, seed, max_workers, coercions, ledger,
               DeletedValueRegistry(), guard)
    inv = ledger.new_invocation_id()
    vid = ledger.new_value_id()
    entry = replace(inputs, value_id=vid)
    src = entry.payload.source_id if hasattr(entry.payload, "source_id") else ""
    ledger.append(TraceEvent(inv, INPUT_NODE, "load", [], [vid], outcome="ok", detail=src,
                             started_at=time.time(), ended_at=time.time()), {vid: entry})
    run.entry_value = entry
    for n in g.entries:
        entry_plan(g, n, entry.tag, coercions)
    return _finish(run)


def replay(g: FlowGraph, ledger: ProvenanceLedger, from_node: str, fix: TypedValue,
           assignment: dict | None = None, *, gateway=None, seed: int = 0, max_workers: int = 4,
           coercions: CoercionRegistry = COERCIONS, guard: bool = True) -> RunResult:
    """Substitute ``fix`` for ``from_node``'s output and re-run only its descendants."""
    if from_node not in g.nodes:
        raise ReplayError(f"unknown node {from_node!r}", from_node)
    ok = [e for e in ledger.events if e.node_id == from_node and e.outcome in ("ok", "fixed")]
    if not ok:
        raise ReplayError(f"node {from_node} has no completed invocation in the trace", from_node)
    out_type = g.node(from_node).spec.out_type
    if not is_subtype(fix.tag, out_type):
        raise ReplayError(f"fix of type {fix.tag} does not fit {from_node} ({out_type})", from_node)
    closure = g.descendants(from_node)

    new = ProvenanceLedger()
    for e in ledger.events:
        if e.node_id not in closure:
            new.copy_event(e, ledger.values)
    run = _Run(g, assignment or {}, gateway, seed, max_workers, coercions, new,
               new.deleted_registry(), guard)
    run.allowed_targets = set(closure)

    last: dict[str, TraceEvent] = {}
    for e in ledger.events:
        if e.outcome in ("ok", "fixed") and e.node_id in g.nodes:
            last[e.node_id] = e
    inv = new.new_invocation_id()
    vid = new.new_value_id()
    fixed = replace(fix, value_id=vid)
    new.append(TraceEvent(inv, from_node, "fix", list(last[from_node].input_ids), [vid],
                          confidence=fixed.confidence, outcome="fixed",
                          started_at=time.time(), ended_at=time.time()), {vid: fixed})

    for n in g.order:
        if n in closure:
            continue
        if n == from_node:
            value = fixed
        elif n in last:
            vid_n = last[n].output_ids[0]
            if vid_n not in ledger.values:
                raise ReplayError(f"trace lacks the value {vid_n} produced by {n}", n)
            value = ledger.values[vid_n]
        else:
            run.status[n] = "skipped"
            run._mark_outgoing(n, None)
            continue
        run.values[n] = value
        run.status[n] = "done"
        run._mark_outgoing(n, value)
    return _finish(run)


def _finish(run: _Run) -> RunResult:
    try:
        run.loop()
        return run.result()
    except ExecutionError as e:
        e.ledger = run.ledger
        raise

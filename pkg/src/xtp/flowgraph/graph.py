"""Dataflow graph: typed nodes, routing edges, and construction from a pipeline spec."""

from __future__ import annotations

import operator
import re
from dataclasses import dataclass, field

from xtp.opcore import REGISTRY as OPS, ImplCandidate, OperatorError, OperatorSpec, make_spec
from xtp.opcore.operators import OperatorRegistry
from xtp.typesys import REGISTRY as COERCIONS, CoercionChain, CoercionRegistry, TypeTag, typecheck_edge

EDGE_KINDS = ("always", "predicate", "confidence", "broadcast", "loopback")
DEFAULT_MAX_RETRIES = 3


class BuildError(ValueError):
    pass


# --------------------------------------------------------------------------
# predicate expressions:  key op literal [and key op literal ...]

_OPS = {"==": operator.eq, "!=": operator.ne, "<=": operator.le, ">=": operator.ge,
        "<": operator.lt, ">": operator.gt}
_CLAUSE = re.compile(r"""^\s*(?P<key>[A-Za-z_][\w.]*)\s*(?P<op>==|!=|<=|>=|<|>)\s*
                         (?P<lit>-?\d+(?:\.\d+)?|true|false|'[^']*'|"[^"]*")\s*$""", re.VERBOSE)


@dataclass(frozen=True)
class Predicate:
    text: str
    clauses: tuple[tuple[str, str, object], ...]

    @classmethod
    def parse(cls, text: str) -> "Predicate":
        clauses = []
        for part in re.split(r"\s+and\s+", text.strip()):
            m = _CLAUSE.match(part)
            if not m:
                raise BuildError(f"cannot parse predicate clause {part!r} in {text!r}")
            lit = m.group("lit")
            if lit in ("true", "false"):
                value = lit == "true"
            elif lit[0] in "'\"":
                value = lit[1:-1]
            else:
                value = float(lit) if "." in lit else int(lit)
            clauses.append((m.group("key"), m.group("op"), value))
        return cls(text, tuple(clauses))

    def __call__(self, env: dict) -> bool:
        for key, op, value in self.clauses:
            if key not in env:
                return False
            try:
                if not _OPS[op](env[key], value):
                    return False
            except TypeError:
                return False
        return True


# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    kind: str = "always"
    when: Predicate | None = None
    threshold: float | None = None
    fail_to: str | None = None
    escalation: str | None = None
    max_retries: int = DEFAULT_MAX_RETRIES
    coercion: CoercionChain | None = None
    port: int = 0
    index: int = 0

    @property
    def forward(self) -> bool:
        return self.kind != "loopback"

    @property
    def label(self) -> str:
        return f"{self.src}->{self.dst}"

    @property
    def back_target(self) -> str | None:
        """Where this edge re-routes data when it fires backwards."""
        if self.kind == "confidence":
            return self.fail_to
        if self.kind == "loopback":
            return self.dst
        return None


@dataclass(frozen=True)
class Node:
    node_id: str
    op: str
    spec: OperatorSpec
    params: dict = field(default_factory=dict, hash=False, compare=False)

    @property
    def multi_port(self) -> bool:
        return len(self.spec.in_types) > 1


@dataclass(frozen=True)
class FlowGraph:
    name: str
    nodes: dict  # node_id -> Node, declaration order
    edges: tuple[Edge, ...]
    entries: tuple[str, ...]
    exits: tuple[str, ...]
    order: tuple[str, ...]  # deterministic topological order of forward edges

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise BuildError(f"unknown node {node_id!r}") from None

    def incoming(self, node_id: str) -> list[Edge]:
        return [e for e in self.edges if e.forward and e.dst == node_id]

    def outgoing(self, node_id: str) -> list[Edge]:
        return [e for e in self.edges if e.forward and e.src == node_id]

    def back_edges(self, node_id: str) -> list[Edge]:
        return [e for e in self.edges if e.src == node_id and e.back_target is not None]

    def descendants(self, node_id: str) -> set[str]:
        seen: set[str] = set()
        stack = [node_id]
        while stack:
            for e in self.outgoing(stack.pop()):
                if e.dst not in seen:
                    seen.add(e.dst)
                    stack.append(e.dst)
        return seen

    def ancestors(self, node_id: str) -> set[str]:
        seen: set[str] = set()
        stack = [node_id]
        while stack:
            for e in self.incoming(stack.pop()):
                if e.src not in seen:
                    seen.add(e.src)
                    stack.append(e.src)
        return seen

    def total_retry_budget(self) -> int:
        return sum(e.max_retries for e in self.edges if e.back_target is not None)


def topo_order(node_ids: list[str], edges: list[tuple[str, str]]) -> list[str]:
    """Kahn's algorithm; ties go to the earliest-declared node."""
    indeg = {n: 0 for n in node_ids}
    for _, b in edges:
        indeg[b] += 1
    rank = {n: i for i, n in enumerate(node_ids)}
    ready = sorted((n for n in node_ids if indeg[n] == 0), key=rank.get)
    out = []
    while ready:
        n = ready.pop(0)
        out.append(n)
        for a, b in edges:
            if a == n:
                indeg[b] -= 1
                if indeg[b] == 0:
                    ready.append(b)
                    ready.sort(key=rank.get)
    if len(out) != len(node_ids):
        stuck = sorted(n for n in node_ids if n not in out)
        raise BuildError(f"cycle among forward edges involving {stuck}")
    return out


# --------------------------------------------------------------------------

def _operator_spec(decl, ops: OperatorRegistry) -> OperatorSpec:
    if decl.op not in ops:
        raise BuildError(f"node {decl.node_id}: unknown operator {decl.op!r}")
    opdef = ops[decl.op]
    if decl.candidates:
        cands = [ImplCandidate.from_dict(c) for c in decl.candidates]
    elif len(opdef.procedures) == 1:
        (ref,) = opdef.procedures
        cands = [ImplCandidate.from_dict({"impl_id": ref, "tool": "procedure"})]
    else:
        raise BuildError(f"node {decl.node_id}: operator {decl.op} needs explicit candidates")
    try:
        for c in cands:
            opdef.resolve(c)
        kind = decl.kind
        if kind is None:
            tools = {c.tool for c in cands}
            kind = "symbolic" if tools == {"procedure"} else "neural" if tools == {"model"} else "hybrid"
        return make_spec(decl.node_id, kind, decl.binding, decl.in_types, decl.out_type, cands,
                         decl.intent)
    except OperatorError as e:
        raise BuildError(f"node {decl.node_id}: {e}") from None


def build(spec, ops: OperatorRegistry = OPS, coercions: CoercionRegistry = COERCIONS) -> FlowGraph:
    nodes: dict[str, Node] = {}
    for decl in spec.nodes:
        if decl.node_id in nodes:
            raise BuildError(f"duplicate node id {decl.node_id!r}")
        nodes[decl.node_id] = Node(decl.node_id, decl.op, _operator_spec(decl, ops), dict(decl.params))

    forward_pairs = []
    for i, d in enumerate(spec.edges):
        for end in (d.src, d.dst):
            if end not in nodes:
                raise BuildError(f"edge {d.src}->{d.dst} names unknown node {end!r}")
        if d.kind not in EDGE_KINDS:
            raise BuildError(f"edge {d.src}->{d.dst}: unknown kind {d.kind!r}")
        if d.kind != "loopback":
            forward_pairs.append((d.src, d.dst))
    order = topo_order(list(nodes), forward_pairs)

    # ports follow the declaration order of each node's incoming forward edges
    port_of: dict[int, int] = {}
    seen_in: dict[str, int] = {}
    for i, d in enumerate(spec.edges):
        if d.kind != "loopback":
            port_of[i] = seen_in.get(d.dst, 0)
            seen_in[d.dst] = port_of[i] + 1
    for nid, node in nodes.items():
        if node.multi_port and seen_in.get(nid, 0) != len(node.spec.in_types):
            raise BuildError(f"node {nid} declares {len(node.spec.in_types)} inputs but has "
                             f"{seen_in.get(nid, 0)} incoming edges")

    fwd_edges = [(d.src, d.dst) for d in spec.edges if d.kind != "loopback"]

    def ancestors(n: str) -> set[str]:
        seen, stack = set(), [n]
        while stack:
            cur = stack.pop()
            for a, b in fwd_edges:
                if b == cur and a not in seen:
                    seen.add(a)
                    stack.append(a)
        return seen

    edges = []
    for i, d in enumerate(spec.edges):
        label = f"{d.src}->{d.dst}"
        src, dst = nodes[d.src], nodes[d.dst]
        kw = dict(kind=d.kind, index=i, max_retries=d.max_retries if d.max_retries is not None
                  else DEFAULT_MAX_RETRIES)
        if d.kind == "loopback":
            if d.dst != d.src and d.dst not in ancestors(d.src):
                raise BuildError(f"loopback {label} must target its source or an ancestor")
            kw["when"] = Predicate.parse(d.when or "retry == true")
        else:
            port = port_of[i]
            want = dst.spec.in_types[port] if dst.multi_port else dst.spec.in_types[0]
            plan = typecheck_edge(src.spec.out_type, want, coercions)
            if plan.kind == "reject":
                raise BuildError(f"type error on edge {label}: {src.spec.out_type} does not "
                                 f"flow into {want}")
            kw.update(port=port, coercion=plan.chain)
            if d.kind == "predicate":
                if not d.when:
                    raise BuildError(f"predicate edge {label} needs 'when'")
                kw["when"] = Predicate.parse(d.when)
            if d.kind == "confidence":
                if d.threshold is None or not 0.0 < d.threshold < 1.0:
                    raise BuildError(f"confidence edge {label} needs a threshold in (0, 1)")
                if not d.fail_to:
                    raise BuildError(f"confidence edge {label} needs fail_to")
                if d.fail_to not in nodes:
                    raise BuildError(f"confidence edge {label}: unknown fail_to {d.fail_to!r}")
                if d.fail_to != d.src and d.fail_to not in ancestors(d.src):
                    raise BuildError(f"confidence edge {label}: fail_to must be the source or an ancestor")
                if d.escalation is not None:
                    try:
                        nodes[d.fail_to].spec.candidate(d.escalation)
                    except OperatorError as e:
                        raise BuildError(f"confidence edge {label}: {e}") from None
                kw.update(threshold=float(d.threshold), fail_to=d.fail_to, escalation=d.escalation)
        if kw["max_retries"] < 1:
            raise BuildError(f"edge {label}: max_retries must be >= 1")
        edges.append(Edge(d.src, d.dst, **kw))

    has_in = {b for _, b in fwd_edges}
    has_out = {a for a, _ in fwd_edges}
    roots = [n for n in order if n not in has_in]
    entries = list(spec.entries) if spec.entries else roots
    for n in entries:
        if n not in nodes:
            raise BuildError(f"unknown entry node {n!r}")
        if n in has_in:
            raise BuildError(f"entry node {n} has incoming edges")
    for n in roots:
        if n not in entries:
            raise BuildError(f"node {n} is unreachable from the entry nodes")
    exits = tuple(n for n in order if n not in has_out)
    return FlowGraph(spec.name, nodes, tuple(edges), tuple(n for n in order if n in entries),
                     exits, tuple(order))


def entry_plan(g: FlowGraph, node_id: str, input_tag: TypeTag, coercions: CoercionRegistry = COERCIONS):
    node = g.node(node_id)
    plan = typecheck_edge(input_tag, node.spec.in_types[0], coercions)
    if plan.kind == "reject":
        raise BuildError(f"input of type {input_tag} does not fit entry {node_id} ({node.spec.in_types[0]})")
    return plan

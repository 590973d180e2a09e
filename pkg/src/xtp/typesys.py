"""Modality type lattice, coercion registry and edge type checking.

Tags serialize as ``Base`` or ``Base<Refinement>`` (e.g. ``Graph<Circuit>``).
"""

from __future__ import annotations

import enum
import re
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable

K_MAX = 2


class Base(str, enum.Enum):
    UNSTRUCTURED = "Unstructured"
    TEXT = "Text"
    IMAGE = "Image"
    STRUCTURED = "Structured"
    TABLE = "Table"
    GRAPH = "Graph"
    REPORT = "Report"
    DIAGRAM_SOURCE = "DiagramSource"


REFINABLE = frozenset({Base.TABLE, Base.GRAPH, Base.REPORT, Base.DIAGRAM_SOURCE, Base.TEXT})
_UNSTRUCTURED_KIDS = frozenset({Base.TEXT, Base.IMAGE})
_STRUCTURED_KIDS = frozenset({Base.TABLE, Base.GRAPH})

_TAG_RE = re.compile(r"^\s*([A-Za-z]+)\s*(?:<\s*([A-Za-z0-9_\-]+)\s*>)?\s*$")


class TagError(Exception):
    """Malformed tag or a payload inconsistent with its tag."""


@dataclass(frozen=True, order=True)
class TypeTag:
    base: Base
    refinement: str | None = None

    def __post_init__(self):
        if not isinstance(self.base, Base):
            object.__setattr__(self, "base", Base(self.base))
        if self.refinement is not None:
            if self.base not in REFINABLE:
                raise TagError(f"{self.base.value} does not take a refinement")
            if not self.refinement:
                raise TagError("empty refinement")

    @classmethod
    def parse(cls, text: str) -> "TypeTag":
        m = _TAG_RE.match(text)
        if not m:
            raise TagError(f"cannot parse type tag {text!r}")
        try:
            base = Base(m.group(1))
        except ValueError:
            raise TagError(f"unknown base type {m.group(1)!r}") from None
        return cls(base, m.group(2))

    def widen(self) -> "TypeTag":
        return TypeTag(self.base)

    def __str__(self) -> str:
        if self.refinement is None:
            return self.base.value
        return f"{self.base.value}<{self.refinement}>"


def tag(text: str | TypeTag) -> TypeTag:
    return text if isinstance(text, TypeTag) else TypeTag.parse(text)


def is_subtype(a: TypeTag, b: TypeTag) -> bool:
    if a == b:
        return True
    if a.base == b.base and b.refinement is None:
        return True
    if a.base in _UNSTRUCTURED_KIDS and b.base == Base.UNSTRUCTURED:
        return True
    if a.base in _STRUCTURED_KIDS and b.base == Base.STRUCTURED:
        return True
    return False


def lattice(refinements: Iterable[str] = ("Circuit", "CircuitUS", "CircuitCA", "Clinical")) -> list[TypeTag]:
    """Every tag over the given refinement vocabulary (finite, for enumeration)."""
    refinements = list(refinements)
    out = []
    for base in Base:
        out.append(TypeTag(base))
        if base in REFINABLE:
            out.extend(TypeTag(base, r) for r in refinements)
    return out


# --------------------------------------------------------------------------
# Typed values

@dataclass(frozen=True)
class Span:
    """Byte range ``[start, end)`` into a canonical UTF-8 source document."""

    source_id: str
    start: int
    end: int

    def overlaps(self, other: "Span") -> bool:
        return (self.source_id == other.source_id
                and self.start < other.end and other.start < self.end)

    def to_list(self) -> list:
        return [self.source_id, self.start, self.end]

    @classmethod
    def from_list(cls, item) -> "Span":
        return cls(str(item[0]), int(item[1]), int(item[2]))


@dataclass(frozen=True)
class TextDoc:
    source_id: str
    text: str

    def byte_span(self, char_start: int, char_end: int) -> Span:
        start = len(self.text[:char_start].encode("utf-8"))
        width = len(self.text[char_start:char_end].encode("utf-8"))
        return Span(self.source_id, start, start + width)

    def whole(self) -> Span:
        return Span(self.source_id, 0, len(self.text.encode("utf-8")))


@dataclass(frozen=True)
class Opaque:
    """Unparsed media; at desk scale images travel as a text stand-in."""

    source_id: str
    media_type: str
    data: str

    def whole(self) -> Span:
        return Span(self.source_id, 0, len(self.data.encode("utf-8")))


@dataclass
class Provenance:
    origins: frozenset = frozenset()
    chain: tuple = ()


# class names are used to avoid import cycles with the payload-owning modules
_PAYLOADS = {
    Base.UNSTRUCTURED: ("TextDoc", "Opaque"),
    Base.TEXT: ("TextDoc",),
    Base.IMAGE: ("Opaque",),
    Base.STRUCTURED: ("Relation", "RelSchema", "RowSet", "Store", "TripletSet", "PropertyGraph"),
    Base.TABLE: ("Relation", "RelSchema", "RowSet", "Store", "TripletSet"),
    Base.GRAPH: ("PropertyGraph",),
    Base.REPORT: ("Report",),
    Base.DIAGRAM_SOURCE: ("DiagramSource",),
}


def payload_fits(base: Base, payload: Any) -> bool:
    return type(payload).__name__ in _PAYLOADS[base]


@dataclass
class TypedValue:
    tag: TypeTag
    payload: Any
    provenance: Provenance = field(default_factory=Provenance)
    confidence: float = 1.0
    value_id: str | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not payload_fits(self.tag.base, self.payload):
            raise TagError(
                f"payload {type(self.payload).__name__} is inconsistent with tag {self.tag}")
        if not 0.0 <= self.confidence <= 1.0:
            raise TagError(f"confidence {self.confidence} outside [0, 1]")


def retag(value: TypedValue, new: TypeTag) -> TypedValue:
    """Assign a (usually more precise) tag once structure has been detected at runtime."""
    if not (is_subtype(new, value.tag) or is_subtype(value.tag, new)):
        raise TagError(f"cannot retag {value.tag} as {new}")
    return replace(value, tag=new, value_id=None)


# --------------------------------------------------------------------------
# Coercions

@dataclass(frozen=True)
class Coercion:
    coercion_id: str
    source: TypeTag | None  # None: any refined tag
    target: TypeTag | None  # None: widen to the unrefined base
    lossy: bool
    apply: Callable[[TypedValue], TypedValue] = field(compare=False, repr=False)

    def accepts(self, t: TypeTag) -> bool:
        if self.target is None:
            return t.refinement is not None
        return is_subtype(t, self.source)

    def result(self, t: TypeTag) -> TypeTag:
        return t.widen() if self.target is None else self.target


@dataclass(frozen=True)
class CoercionChain:
    steps: tuple[str, ...]
    source: TypeTag
    target: TypeTag
    lossy: bool = False

    def __post_init__(self):
        if len(self.steps) > K_MAX:
            raise TagError(f"coercion chain longer than {K_MAX}: {self.steps}")

    def __len__(self) -> int:
        return len(self.steps)


class CoercionRegistry:
    def __init__(self, k_max: int = K_MAX):
        self.k_max = k_max
        self._items: dict[str, Coercion] = {}

    def register(self, coercion: Coercion) -> None:
        if coercion.coercion_id in self._items:
            raise ValueError(f"duplicate coercion {coercion.coercion_id}")
        self._items[coercion.coercion_id] = coercion

    def __iter__(self):
        return iter(self._items.values())

    def __getitem__(self, cid: str) -> Coercion:
        return self._items[cid]

    def find(self, source: TypeTag, target: TypeTag) -> CoercionChain | None:
        """Shortest chain (breadth first, registration order breaks ties)."""
        if is_subtype(source, target):
            return CoercionChain((), source, target, False)
        frontier = deque([(source, ())])
        seen = {source}
        while frontier:
            current, steps = frontier.popleft()
            if len(steps) >= self.k_max:
                continue
            for c in self._items.values():
                if not c.accepts(current):
                    continue
                nxt = c.result(current)
                path = steps + (c.coercion_id,)
                if is_subtype(nxt, target):
                    lossy = any(self._items[s].lossy for s in path)
                    return CoercionChain(path, source, target, lossy)
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append((nxt, path))
        return None

    def apply(self, chain: CoercionChain, value: TypedValue) -> TypedValue:
        for step in chain.steps:
            value = self._items[step].apply(value)
        return value


def _flatten(value: TypedValue) -> TypedValue:
    from xtp.relstore import flatten_payload
    doc = TextDoc(f"flatten:{value.value_id or 'anon'}", flatten_payload(value.payload))
    return TypedValue(TypeTag(Base.TEXT), doc, value.provenance, value.confidence)


def _serialize_graph(value: TypedValue) -> TypedValue:
    doc = TextDoc(f"graph:{value.value_id or 'anon'}", value.payload.to_json())
    return TypedValue(TypeTag(Base.TEXT), doc, value.provenance, value.confidence)


def _render_report(value: TypedValue) -> TypedValue:
    doc = TextDoc(f"report:{value.value_id or 'anon'}", value.payload.text())
    return TypedValue(TypeTag(Base.TEXT), doc, value.provenance, value.confidence)


def _diagram_text(value: TypedValue) -> TypedValue:
    doc = TextDoc(f"diagram:{value.value_id or 'anon'}", value.payload.body)
    return TypedValue(TypeTag(Base.TEXT), doc, value.provenance, value.confidence)


def _widen(value: TypedValue) -> TypedValue:
    return replace(value, tag=value.tag.widen(), value_id=None)


def default_registry() -> CoercionRegistry:
    reg = CoercionRegistry()
    reg.register(Coercion("flatten_table", TypeTag(Base.TABLE), TypeTag(Base.TEXT), False, _flatten))
    reg.register(Coercion("serialize_graph", TypeTag(Base.GRAPH), TypeTag(Base.TEXT), False,
                          _serialize_graph))
    reg.register(Coercion("diagram_text", TypeTag(Base.DIAGRAM_SOURCE), TypeTag(Base.TEXT), False,
                          _diagram_text))
    # drops chart data sections
    reg.register(Coercion("render_report", TypeTag(Base.REPORT), TypeTag(Base.TEXT), True,
                          _render_report))
    reg.register(Coercion("widen", None, None, False, _widen))
    return reg


REGISTRY = default_registry()


def find_coercion(source: TypeTag, target: TypeTag,
                  registry: CoercionRegistry = REGISTRY) -> CoercionChain | None:
    return registry.find(source, target)


@dataclass(frozen=True)
class EdgePlan:
    kind: str  # "direct" | "coerce" | "reject"
    chain: CoercionChain | None = None

    def __post_init__(self):
        if self.kind == "coerce" and not self.chain:
            raise ValueError("coerce plan needs a non-empty chain")


def typecheck_edge(producer_out: TypeTag, consumer_in: TypeTag,
                   registry: CoercionRegistry = REGISTRY) -> EdgePlan:
    if is_subtype(producer_out, consumer_in):
        return EdgePlan("direct")
    chain = registry.find(producer_out, consumer_in)
    if chain is not None and chain.steps:
        return EdgePlan("coerce", chain)
    return EdgePlan("reject")

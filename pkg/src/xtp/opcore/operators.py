"""Operator signatures, implementation candidates and the procedure/adapter registry."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable

from xtp.typesys import Span, TypeTag, tag

KINDS = ("neural", "symbolic", "hybrid")
BINDINGS = ("preprogrammed", "fungible")
TOOLS = ("procedure", "model")


class OperatorError(Exception):
    pass


@dataclass(frozen=True)
class CostProfile:
    tokens_est: int
    latency_ms_est: float
    accuracy_est: float

    def __post_init__(self):
        if self.tokens_est < 0:
            raise OperatorError("tokens_est must be non-negative")
        if not self.latency_ms_est > 0:
            raise OperatorError("latency_ms_est must be positive")
        if not 0.0 < self.accuracy_est <= 1.0:
            raise OperatorError(f"accuracy_est {self.accuracy_est} outside (0, 1]")


@dataclass(frozen=True)
class ImplCandidate:
    impl_id: str
    tool: str  # "procedure" | "model"
    ref: str   # procedure name, or model id for the operator's neural adapter
    cost: CostProfile

    def __post_init__(self):
        if self.tool not in TOOLS:
            raise OperatorError(f"unknown tool {self.tool!r} for {self.impl_id}")
        if self.tool == "procedure" and self.cost.tokens_est != 0:
            raise OperatorError(f"procedure candidate {self.impl_id} must have tokens_est 0")

    @classmethod
    def from_dict(cls, obj: dict) -> "ImplCandidate":
        cost = CostProfile(int(obj.get("tokens", 0)), float(obj.get("latency_ms", 1.0)),
                           float(obj.get("accuracy", 1.0)))
        return cls(obj["impl_id"], obj["tool"], obj.get("ref", obj["impl_id"]), cost)


@dataclass(frozen=True)
class OperatorSpec:
    name: str
    kind: str
    binding: str
    in_types: tuple[TypeTag, ...]
    out_type: TypeTag
    candidates: tuple[ImplCandidate, ...]
    intent_prompt: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise OperatorError(f"{self.name}: unknown kind {self.kind!r}")
        if self.binding not in BINDINGS:
            raise OperatorError(f"{self.name}: unknown binding {self.binding!r}")
        if not self.candidates:
            raise OperatorError(f"{self.name}: needs at least one candidate")
        if self.binding == "preprogrammed" and len(self.candidates) != 1:
            raise OperatorError(f"{self.name}: preprogrammed operators take exactly one candidate")
        ids = [c.impl_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise OperatorError(f"{self.name}: duplicate impl ids")
        if self.kind == "symbolic" and any(c.tool == "model" for c in self.candidates):
            raise OperatorError(f"{self.name}: symbolic operators cannot use model candidates")

    @property
    def in_type(self) -> TypeTag:
        return self.in_types[0]

    def candidate(self, impl_id: str) -> ImplCandidate:
        for c in self.candidates:
            if c.impl_id == impl_id:
                return c
        raise OperatorError(f"{self.name} has no candidate {impl_id!r}")


@dataclass
class OpOutput:
    """What an implementation returns; the executor wraps it into a TypedValue."""

    payload: Any
    confidence: float = 1.0
    tag: TypeTag | None = None
    metadata: dict = field(default_factory=dict)
    elements: dict[str, frozenset[Span]] = field(default_factory=dict)
    deleted_values: set[str] = field(default_factory=set)
    warnings: list[dict] = field(default_factory=list)
    tokens_in: int = 0
    tokens_out: int = 0
    latency_ms: float | None = None  # reported by the model gateway; else measured


@dataclass
class OpContext:
    """Everything an implementation may touch besides its inputs."""

    node_id: str
    params: dict
    candidate: ImplCandidate
    gateway: Any = None
    rng: Any = None
    # element-origin index so far in this run, read-only for operators
    elements: dict[str, frozenset[Span]] = field(default_factory=dict)

    @property
    def model_id(self) -> str:
        return self.candidate.ref

    def call_model(self, messages: list[tuple[str, str]], temperature: float = 0.0,
                   max_tokens: int = 2048):
        if self.candidate.tool != "model":
            raise OperatorError(f"{self.node_id}: procedure candidates may not call models")
        if self.gateway is None:
            raise OperatorError(f"{self.node_id}: no model gateway configured")
        from xtp.modelgw import ModelRequest
        return self.gateway.send(ModelRequest(self.candidate.ref, tuple(messages), temperature,
                                              max_tokens))


Impl = Callable[[OpContext, list], OpOutput]


@dataclass
class OperatorDef:
    """Registry entry: named procedures plus an optional model adapter."""

    name: str
    procedures: dict[str, Impl] = field(default_factory=dict)
    adapter: Impl | None = None
    doc: str = ""

    def resolve(self, cand: ImplCandidate) -> Impl:
        if cand.tool == "model":
            if self.adapter is None:
                raise OperatorError(f"operator {self.name} has no model adapter")
            return self.adapter
        if cand.ref not in self.procedures:
            raise OperatorError(f"operator {self.name} has no procedure {cand.ref!r}")
        return self.procedures[cand.ref]


class OperatorRegistry:
    def __init__(self):
        self._ops: dict[str, OperatorDef] = {}
        self._lock = threading.Lock()

    def define(self, name: str, doc: str = "") -> OperatorDef:
        with self._lock:
            return self._ops.setdefault(name, OperatorDef(name, doc=doc))

    def procedure(self, op: str, ref: str | None = None):
        def deco(fn: Impl) -> Impl:
            self.define(op).procedures[ref or fn.__name__] = fn
            return fn
        return deco

    def adapter(self, op: str):
        def deco(fn: Impl) -> Impl:
            self.define(op).adapter = fn
            return fn
        return deco

    def __contains__(self, name: str) -> bool:
        return name in self._ops

    def __getitem__(self, name: str) -> OperatorDef:
        try:
            return self._ops[name]
        except KeyError:
            raise OperatorError(f"unknown operator {name!r}") from None

    def names(self) -> list[str]:
        return sorted(self._ops)


REGISTRY = OperatorRegistry()


def make_spec(name: str, kind: str, binding: str, in_types, out_type, candidates,
              intent_prompt: str | None = None) -> OperatorSpec:
    if isinstance(in_types, (str, TypeTag)):
        in_types = [in_types]
    return OperatorSpec(name, kind, binding, tuple(tag(t) for t in in_types), tag(out_type),
                        tuple(candidates), intent_prompt)

"""Dataflow graphs, the routing executor, provenance and the projection guard."""

from xtp.flowgraph.executor import (
    INPUT_NODE, ExecutionError, GuardViolation, ReplayError, RetryExhausted, RunResult, execute,
    guard_value, projected_texts, replay,
)
from xtp.flowgraph.graph import EDGE_KINDS, BuildError, Edge, FlowGraph, Node, Predicate, build, topo_order
from xtp.flowgraph.ledger import (
    DeletedValueRegistry, LedgerError, ProvenanceLedger, TraceEvent, Violation,
    contributing_elements, contribution_bound, guard_projection,
)
from xtp.flowgraph.values import decode_value, dumps_value, encode_value, loads_value

__all__ = [
    "EDGE_KINDS", "INPUT_NODE", "BuildError", "DeletedValueRegistry", "Edge", "ExecutionError",
    "FlowGraph", "GuardViolation", "LedgerError", "Node", "Predicate", "ProvenanceLedger",
    "ReplayError", "RetryExhausted", "RunResult", "TraceEvent", "Violation", "build",
    "contributing_elements", "contribution_bound", "decode_value", "dumps_value", "encode_value",
    "execute", "guard_projection", "guard_value", "loads_value", "projected_texts", "replay",
    "topo_order",
]

"""Operator abstraction and the built-in operator library."""

from xtp.opcore.operators import (
    BINDINGS, KINDS, REGISTRY, CostProfile, ImplCandidate, OpContext, OperatorDef, OperatorError,
    OperatorRegistry, OperatorSpec, OpOutput, make_spec,
)
from xtp.opcore import builtin as _builtin  # noqa: F401  registers the library

__all__ = [
    "BINDINGS", "KINDS", "REGISTRY", "CostProfile", "ImplCandidate", "OpContext", "OperatorDef",
    "OperatorError", "OperatorRegistry", "OperatorSpec", "OpOutput", "make_spec",
]

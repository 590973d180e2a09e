import itertools

import pytest

from xtp.opcore.circuit import PropertyGraph
from xtp.projection import Report, Section
from xtp.relstore import Relation
from xtp.typesys import (
    REGISTRY, Base, Opaque, TagError, TextDoc, TypedValue, TypeTag, find_coercion, is_subtype,
    lattice, retag, tag, typecheck_edge,
)

TAGS = lattice()


def oracle_subtype(a: TypeTag, b: TypeTag) -> bool:
    """Direct reading of the rules, kept separate from the implementation."""
    parents = {
        "Text": {"Unstructured"}, "Image": {"Unstructured"},
        "Table": {"Structured"}, "Graph": {"Structured"},
    }
    if a == b:
        return True
    if b.refinement is None and a.base.value == b.base.value:
        return True
    return b.refinement is None and b.base.value in parents.get(a.base.value, set())


def test_lattice_enumerates_every_base_and_refinement():
    assert len(TAGS) == len(Base) + 5 * 4
    assert len(set(TAGS)) == len(TAGS)


def test_is_subtype_matches_rule_oracle():
    for a, b in itertools.product(TAGS, TAGS):
        assert is_subtype(a, b) == oracle_subtype(a, b), (a, b)


def test_partial_order_laws_by_enumeration():
    for a in TAGS:
        assert is_subtype(a, a)
    for a, b in itertools.product(TAGS, TAGS):
        if a != b:
            assert not (is_subtype(a, b) and is_subtype(b, a)), (a, b)
    for a, b, c in itertools.product(TAGS, TAGS, TAGS):
        if is_subtype(a, b) and is_subtype(b, c):
            assert is_subtype(a, c), (a, b, c)


def test_refined_tag_is_strict_subtype_of_base():
    for t in TAGS:
        if t.refinement is not None:
            assert is_subtype(t, t.widen()) and not is_subtype(t.widen(), t)


@pytest.mark.parametrize("text", ["Image<Circuit>", "Unstructured<X>", "Structured<Clinical>"])
def test_refinement_rejected_on_non_refinable_bases(text):
    with pytest.raises(TagError):
        tag(text)


@pytest.mark.parametrize("text", ["Blob", "Table<>", "Graph<Circuit", ""])
def test_malformed_tags(text):
    with pytest.raises(TagError):
        tag(text)


def test_tag_round_trips_through_text():
    for t in TAGS:
        assert tag(str(t)) == t


def test_examples():
    assert is_subtype(tag("Text"), tag("Unstructured"))
    assert is_subtype(tag("Graph<CircuitUS>"), tag("Graph<CircuitUS>"))
    assert not is_subtype(tag("Graph<CircuitUS>"), tag("Graph<CircuitCA>"))
    assert is_subtype(tag("Graph<Circuit>"), tag("Structured"))
    assert not is_subtype(tag("Text<Clinical>"), tag("Structured"))

    chain = find_coercion(tag("Table"), tag("Text"))
    assert chain.steps == ("flatten_table",) and chain.lossy is False
    assert find_coercion(tag("Text"), tag("Text")).steps == ()
    assert find_coercion(tag("Image"), tag("Table")) is None

    assert typecheck_edge(tag("Graph<Circuit>"), tag("Graph")).kind == "direct"
    plan = typecheck_edge(tag("Table"), tag("Text"))
    assert plan.kind == "coerce" and plan.chain.steps == ("flatten_table",)
    assert typecheck_edge(tag("Text"), tag("Graph")).kind == "reject"


def test_refined_table_reaches_text_through_flatten():
    chain = find_coercion(tag("Table<Clinical>"), tag("Text"))
    assert chain.steps == ("flatten_table",)


def test_no_chain_exceeds_k_max_and_coerce_never_empty():
    for a, b in itertools.product(TAGS, TAGS):
        chain = find_coercion(a, b)
        if chain is not None:
            assert len(chain) <= 2
        plan = typecheck_edge(a, b)
        if plan.kind == "coerce":
            assert plan.chain.steps


def test_unstructured_inputs_never_become_structured():
    for a, b in itertools.product(TAGS, TAGS):
        if a.base in (Base.TEXT, Base.IMAGE, Base.UNSTRUCTURED) and \
                b.base in (Base.TABLE, Base.GRAPH, Base.STRUCTURED):
            assert find_coercion(a, b) is None, (a, b)


def _sample(t: TypeTag) -> TypedValue | None:
    payloads = {
        Base.TEXT: TextDoc("s", "hello"),
        Base.UNSTRUCTURED: TextDoc("s", "hello"),
        Base.IMAGE: Opaque("s", "image/png", "..."),
        Base.TABLE: Relation("t", ("a", "b"), [(1, "x")]),
        Base.STRUCTURED: Relation("t", ("a",), [(1,)]),
        Base.GRAPH: PropertyGraph.from_dict({"components": [{"id": 1, "type": "power"}],
                                             "connections": []}),
        Base.REPORT: Report((Section("text", "body", "s"),)),
    }
    if t.base not in payloads:
        return None
    return TypedValue(t, payloads[t.base])


def test_every_chain_applied_yields_subtype_of_target():
    checked = 0
    for a, b in itertools.product(TAGS, TAGS):
        chain = find_coercion(a, b)
        value = _sample(a)
        if chain is None or value is None:
            continue
        out = REGISTRY.apply(chain, value)
        assert is_subtype(out.tag, b), (a, b, chain.steps, out.tag)
        checked += 1
    assert checked > 50


def test_adjacent_steps_compose():
    for a, b in itertools.product(TAGS, TAGS):
        chain = find_coercion(a, b)
        if chain is None or not chain.steps:
            continue
        cur = a
        for step in chain.steps:
            c = REGISTRY[step]
            assert c.accepts(cur)
            cur = c.result(cur)
        assert is_subtype(cur, b)


def test_payload_must_match_tag():
    with pytest.raises(TagError):
        TypedValue(tag("Graph"), TextDoc("s", "x"))
    with pytest.raises(TagError):
        TypedValue(tag("Text"), TextDoc("s", "x"), confidence=1.5)
    assert TypedValue(tag("Text"), TextDoc("s", "x")).confidence == 1.0


def test_retag_refines_or_widens_only():
    v = TypedValue(tag("Graph"), _sample(tag("Graph")).payload)
    assert retag(v, tag("Graph<Circuit>")).tag == tag("Graph<Circuit>")
    with pytest.raises(TagError):
        retag(v, tag("Table"))

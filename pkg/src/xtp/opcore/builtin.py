"""Built-in operators used by the reference pipelines.

Each operator registers named procedures and, where a model can stand in, an adapter that
builds the prompt, calls the gateway and parses the reply back into a structured payload.
"""

from __future__ import annotations

import json
import re

from xtp.opcore import circuit, clinical, privacy
from xtp.opcore.operators import REGISTRY, OpContext, OperatorError, OpOutput
from xtp.projection import DiagramSource, Report, Section
from xtp.relstore import (
    Relation, RelSchema, SelectAggregate, SqlError, Store, parse_sql, print_sql,
)
from xtp.typesys import Opaque, Span, TextDoc

# --------------------------------------------------------------------------
# helpers


def _payload(inputs, i=0, want=None):
    try:
        value = inputs[i]
    except IndexError:
        raise OperatorError(f"missing input port {i}") from None
    p = value.payload
    if want is not None and not isinstance(p, want):
        names = want.__name__ if isinstance(want, type) else "/".join(w.__name__ for w in want)
        raise OperatorError(f"input {i} is {type(p).__name__}, expected {names}")
    return p


def _doc_text(p) -> str:
    return p.text if isinstance(p, TextDoc) else p.data


def _ask(ctx: OpContext, system: str, user: str) -> tuple[str, OpOutput]:
    resp = ctx.call_model([("system", system), ("user", user)],
                          temperature=float(ctx.params.get("temperature", 0.0)),
                          max_tokens=int(ctx.params.get("max_tokens", 2048)))
    return resp.content, OpOutput(None, tokens_in=resp.tokens_in, tokens_out=resp.tokens_out,
                                  latency_ms=resp.latency_ms)


_FENCE = re.compile(r"^\s*```[A-Za-z]*\n(.*?)\n?```\s*$", re.DOTALL)


def _unfence(content: str) -> str:
    m = _FENCE.match(content)
    return m.group(1) if m else content


def _json_reply(content: str, node: str) -> dict:
    try:
        obj = json.loads(_unfence(content))
    except json.JSONDecodeError as e:
        raise OperatorError(f"{node}: model reply is not JSON ({e})") from None
    if not isinstance(obj, dict):
        raise OperatorError(f"{node}: model reply must be a JSON object")
    return obj


def _confidence(obj: dict, ctx: OpContext) -> float:
    """Self-reported confidence when the reply has one, else the candidate's accuracy estimate."""
    c = obj.get("confidence")
    if c is None:
        return ctx.candidate.cost.accuracy_est
    c = float(c)
    if not 0.0 <= c <= 1.0:
        raise OperatorError(f"{ctx.node_id}: confidence {c} outside [0, 1]")
    return c


def _numbered_lines(text: str) -> str:
    return "\n".join(f"L{i}: {line}" for i, line in enumerate(text.splitlines(), 1))


def _prompt(ctx: OpContext, default: str) -> str:
    return ctx.params.get("prompt", default)


# --------------------------------------------------------------------------
# clinical extraction

SCHEMA_PROMPT = (
    "Propose a relational schema for the facts in these notes. One table per line: "
    "`<table> <col>: <int|string> [PK], <col>: int [FK → <table>(<col>)], ...`. "
    "Reply with the schema lines only.")

REG = REGISTRY
REG.define("extract_schema", "Unstructured text to a relational schema.")


def _checked_schema(text: str, node: str) -> RelSchema:
    try:
        schema = clinical.parse_schema_text(_unfence(text))
    except clinical.SchemaParseError as e:
        raise OperatorError(f"{node}: {e}") from None
    errors = clinical.schema_validate(schema)
    if errors:
        raise OperatorError(f"{node}: schema violates integrity rules: {errors}")
    if not schema.tables:
        raise OperatorError(f"{node}: empty schema")
    return schema


@REG.procedure("extract_schema", "static_schema")
def static_schema(ctx: OpContext, inputs) -> OpOutput:
    return OpOutput(_checked_schema(ctx.params["schema"], ctx.node_id))


@REG.adapter("extract_schema")
def schema_from_model(ctx: OpContext, inputs) -> OpOutput:
    doc = _payload(inputs, 0, (TextDoc, Opaque))
    content, out = _ask(ctx, _prompt(ctx, SCHEMA_PROMPT), _doc_text(doc))
    out.payload = _checked_schema(content, ctx.node_id)
    out.confidence = ctx.candidate.cost.accuracy_est
    return out


TRIPLET_PROMPT = (
    "Extract (subject, predicate, object) facts about patients and drugs from the numbered lines. "
    "Predicates: mrn, diagnosis, prescribed, dose, route, brand, gsn, ndc. Reply with JSON "
    '{"triplets": [{"s": ..., "p": ..., "o": ..., "line": <number>}], "confidence": <0..1>}, '
    "copying subject and object text exactly as written.")

REG.define("extract_triplets", "Text to grounded (subject, predicate, object) triplets.")


@REG.procedure("extract_triplets", "rule_triplets")
def rule_triplets(ctx: OpContext, inputs) -> OpOutput:
    return OpOutput(clinical.triplet_extract(_payload(inputs, 0, TextDoc)))


@REG.adapter("extract_triplets")
def triplets_from_model(ctx: OpContext, inputs) -> OpOutput:
    doc = _payload(inputs, 0, TextDoc)
    if not doc.text.strip():
        return OpOutput(clinical.TripletSet(doc.source_id), confidence=1.0)
    content, out = _ask(ctx, _prompt(ctx, TRIPLET_PROMPT), _numbered_lines(doc.text))
    obj = _json_reply(content, ctx.node_id)
    try:
        out.payload = clinical.ground_triplets(doc, obj.get("triplets", []))
    except (KeyError, ValueError) as e:
        raise OperatorError(f"{ctx.node_id}: bad triplet in reply: {e}") from None
    out.confidence = _confidence(obj, ctx)
    return out


VALUE_PROMPT = (
    "Fill the schema with rows built from the numbered triplets. Reply with JSON "
    '{"rows": {"<table>": [{"values": [...], "evidence": [<triplet numbers>]}]}, '
    '"confidence": <0..1>}. Values follow column order; use null when unknown.')

REG.define("extract_value", "Schema plus triplets to aligned rows with evidence.")


def _rowset_output(rows: clinical.RowSet, ts: clinical.TripletSet, node: str) -> OpOutput:
    origins = rows.origins(ts)
    empty = [eid for eid, spans in origins.items() if not spans]
    if empty:
        raise OperatorError(f"{node}: rows without evidence: {empty}")
    return OpOutput(rows, elements=origins)


@REG.procedure("extract_value", "rule_align")
def rule_align(ctx: OpContext, inputs) -> OpOutput:
    schema = _payload(inputs, 0, RelSchema)
    ts = _payload(inputs, 1, clinical.TripletSet)
    return _rowset_output(clinical.rule_align(schema, ts), ts, ctx.node_id)


@REG.adapter("extract_value")
def values_from_model(ctx: OpContext, inputs) -> OpOutput:
    schema = _payload(inputs, 0, RelSchema)
    ts = _payload(inputs, 1, clinical.TripletSet)
    if not ts.triplets:
        return OpOutput(clinical.RowSet(schema), confidence=1.0)
    user = f"Schema:\n{clinical.format_schema_text(schema)}\n\nTriplets:\n{ts.numbered()}"
    content, out = _ask(ctx, _prompt(ctx, VALUE_PROMPT), user)
    obj = _json_reply(content, ctx.node_id)
    rows, evidence = {}, {}
    try:
        for table, items in obj.get("rows", {}).items():
            schema.table(table)
            rows[table] = [tuple(item["values"]) for item in items]
            evidence[table] = [tuple(int(k) for k in item["evidence"]) for item in items]
            for ev in evidence[table]:
                if any(not 0 <= k < len(ts.triplets) for k in ev):
                    raise OperatorError(f"{ctx.node_id}: evidence {ev} cites a missing triplet")
    except (KeyError, TypeError, SqlError) as e:
        raise OperatorError(f"{ctx.node_id}: malformed rows in reply: {e}") from None
    res = _rowset_output(clinical.RowSet(schema, rows, evidence), ts, ctx.node_id)
    res.confidence = _confidence(obj, ctx)
    res.tokens_in, res.tokens_out, res.latency_ms = out.tokens_in, out.tokens_out, out.latency_ms
    return res


REG.define("extract_sql", "Aligned rows to CREATE/INSERT statements, executed into a store.")


@REG.procedure("extract_sql", "emit_sql")
def emit_sql(ctx: OpContext, inputs) -> OpOutput:
    rows = _payload(inputs, 0, clinical.RowSet)
    try:
        stmts = clinical.extract_sql(rows.schema, rows.rows)
        store = Store()
        store.execute_all(stmts)
    except (clinical.ExtractError, SqlError) as e:
        raise OperatorError(f"{ctx.node_id}: {e}") from None
    return OpOutput(store, metadata={"sql": "\n".join(print_sql(s) for s in stmts) + "\n",
                                     "statements": len(stmts)})


# --------------------------------------------------------------------------
# relational transforms

REG.define("sql_transform", "Run fixed SQL statements against a copy of the store.")


@REG.procedure("sql_transform", "run_sql")
def run_sql(ctx: OpContext, inputs) -> OpOutput:
    store = _payload(inputs, 0, Store).copy()
    try:
        counts = [store.execute(s) for s in parse_sql(ctx.params["sql"])]
    except SqlError as e:
        raise OperatorError(f"{ctx.node_id}: {e}") from None
    return OpOutput(store, metadata={"rowcounts": [c if isinstance(c, int) else len(c.rows)
                                                   for c in counts]})


REG.define("deidentify", "Project identifying columns away into a view.")


@REG.procedure("deidentify", "project_view")
def project_view(ctx: OpContext, inputs) -> OpOutput:
    store = _payload(inputs, 0, Store).copy()
    p = ctx.params
    try:
        view, deleted = clinical.deidentify(store, p["table"], p["keep"], p.get("view"))
    except SqlError as e:
        raise OperatorError(f"{ctx.node_id}: {e}") from None
    return OpOutput(store, metadata={"view": view, "deleted_count": len(deleted)},
                    deleted_values=deleted)


CHECK_PROMPT = (
    "Write one SQL SELECT over this schema answering the question. Supported: JOIN ... ON, "
    "WHERE col IN (...), GROUP BY, COUNT(*) AS name, ORDER BY name DESC. Reply with SQL only.")

REG.define("check_query", "Answer a question with one SELECT, model-written or fixed.")


def _run_select(store: Store, sql: str, node: str, name: str) -> Relation:
    try:
        stmts = parse_sql(_unfence(sql).strip())
    except SqlError as e:
        raise OperatorError(f"{node}: generated SQL does not parse: {e}") from None
    if len(stmts) != 1 or not isinstance(stmts[0], SelectAggregate):
        raise OperatorError(f"{node}: expected exactly one SELECT statement")
    try:
        rel = store.copy().execute(stmts[0])
    except SqlError as e:
        raise OperatorError(f"{node}: {e}") from None
    return Relation(name, rel.columns, rel.rows)


@REG.procedure("check_query", "sql_template")
def sql_template(ctx: OpContext, inputs) -> OpOutput:
    store = _payload(inputs, 0, Store)
    rel = _run_select(store, ctx.params["sql"], ctx.node_id, ctx.params.get("name", ctx.node_id))
    return OpOutput(rel, metadata={"sql": ctx.params["sql"], "rows": len(rel.rows)})


@REG.adapter("check_query")
def query_from_model(ctx: OpContext, inputs) -> OpOutput:
    store = _payload(inputs, 0, Store)
    user = (f"Schema:\n{clinical.format_schema_text(store.schema)}\n\n"
            f"Question: {ctx.params['question']}")
    content, out = _ask(ctx, _prompt(ctx, CHECK_PROMPT), user)
    out.payload = _run_select(store, content, ctx.node_id, ctx.params.get("name", ctx.node_id))
    out.metadata = {"sql": print_sql(parse_sql(_unfence(content).strip())[0]),
                    "rows": len(out.payload.rows)}
    out.confidence = ctx.candidate.cost.accuracy_est
    return out


REG.define("dp_count", "Grouped counts with Laplace noise.")


@REG.procedure("dp_count", "laplace")
def laplace_count(ctx: OpContext, inputs) -> OpOutput:
    store = _payload(inputs, 0, Store)
    p = ctx.params
    try:
        rel = privacy.dp_count(store, p["view"], p["group_col"], float(p["epsilon"]),
                               int(p["sensitivity"]), rng=ctx.rng)
    except (SqlError, privacy.PrivacyError) as e:
        raise OperatorError(f"{ctx.node_id}: {e}") from None
    b = privacy.laplace_scale(int(p["sensitivity"]), float(p["epsilon"]))
    return OpOutput(rel, metadata={"epsilon": float(p["epsilon"]), "scale": b})


# --------------------------------------------------------------------------
# summaries and reports

SUMMARY_PROMPT = (
    "Summarize these records for a hospital administrator in two or three sentences. "
    "Refer to patients by MRN only.")

REG.define("summarize", "Text to a short prose summary.")


def _flat_rows(text: str) -> list[list[tuple[str, str]]]:
    return [re.findall(r"\[([^:\]]+): ([^\]]*)\]", line)
            for line in text.splitlines() if line.startswith("[")]


@REG.procedure("summarize", "template_summary")
def template_summary(ctx: OpContext, inputs) -> OpOutput:
    doc = _payload(inputs, 0, TextDoc)
    rows = _flat_rows(doc.text)
    if not rows:
        text = ctx.params.get("empty_text", "No records.")
    else:
        lead = ctx.params.get("lead", "Records")
        items = ["; ".join(f"{k} {v}" for k, v in r) for r in rows]
        text = f"{lead}: " + ". ".join(items) + "."
    return OpOutput(TextDoc(ctx.node_id, text))


@REG.adapter("summarize")
def summary_from_model(ctx: OpContext, inputs) -> OpOutput:
    doc = _payload(inputs, 0, TextDoc)
    content, out = _ask(ctx, _prompt(ctx, SUMMARY_PROMPT), doc.text)
    out.payload = TextDoc(ctx.node_id, content.strip())
    out.confidence = ctx.candidate.cost.accuracy_est
    return out


REG.define("project_report", "Assemble text, tables and chart data into a report.")


def _section_relation(value, spec: dict, node: str) -> Relation:
    p = value.payload
    try:
        if "sql" in spec:
            if not isinstance(p, Store):
                raise OperatorError(f"{node}: section {spec.get('title')!r} runs SQL on a non-store")
            rel = _run_select(p, spec["sql"], node, "section")
        elif isinstance(p, Store):
            rel = p.relation(spec["relation"])
        elif isinstance(p, Relation):
            rel = p
        else:
            raise OperatorError(f"{node}: cannot tabulate {type(p).__name__}")
    except (KeyError, SqlError) as e:
        raise OperatorError(f"{node}: section {spec.get('title')!r}: {e}") from None
    if "columns" in spec:
        if len(spec["columns"]) != len(rel.columns):
            raise OperatorError(f"{node}: column rename arity mismatch")
        rel = Relation(rel.name, tuple(spec["columns"]), rel.rows)
    return rel


@REG.procedure("project_report", "assemble_report")
def assemble_report(ctx: OpContext, inputs) -> OpOutput:
    sections = []
    for spec in ctx.params["sections"]:
        value = inputs[int(spec.get("port", 0))]
        kind = spec["kind"]
        if kind == "text":
            if not isinstance(value.payload, TextDoc):
                raise OperatorError(f"{ctx.node_id}: text section needs a text input")
            content = value.payload.text
        else:
            content = _section_relation(value, spec, ctx.node_id).to_csv()
        sections.append(Section(kind, content, spec.get("title", "")))
    return OpOutput(Report(tuple(sections)))


# --------------------------------------------------------------------------
# circuits

GRAPH_PROMPT = (
    "Extract the circuit in the attached diagram as JSON "
    '{"graph": {"components": [{"id", "type", "label"?, "voltage"?, "resistance_ohm"?, '
    '"forward_voltage"?}], "connections": [{"from", "to"}]}, "confidence": <0..1>}.')

REG.define("extract_graph", "Diagram to a circuit property graph.")


def _component_origins(g: circuit.PropertyGraph, source) -> dict[str, frozenset[Span]]:
    """Ground each component in the source text; unlocatable ones cite the whole document."""
    doc = TextDoc(source.source_id, _doc_text(source))
    out = {}
    for c in g.components:
        m = re.search(r"\{[^{}]*[\"']?id[\"']?\s*:\s*%d\b[^{}]*\}" % c.id, doc.text)
        span = doc.byte_span(m.start(), m.end()) if m else doc.whole()
        out[f"component:{c.id}"] = frozenset({span})
    return out


def _graph_output(g: circuit.PropertyGraph, source, node: str) -> OpOutput:
    try:
        circuit.check_circuit(g)
    except circuit.CircuitError as e:
        raise OperatorError(f"{node}: {e}") from None
    return OpOutput(g, elements=_component_origins(g, source))


@REG.procedure("extract_graph", "netlist_parse")
def netlist_parse(ctx: OpContext, inputs) -> OpOutput:
    src = _payload(inputs, 0, (TextDoc, Opaque))
    try:
        g = circuit.PropertyGraph.from_json(_doc_text(src))
    except (ValueError, circuit.CircuitError) as e:
        raise OperatorError(f"{ctx.node_id}: {e}") from None
    return _graph_output(g, src, ctx.node_id)


@REG.adapter("extract_graph")
def graph_from_model(ctx: OpContext, inputs) -> OpOutput:
    src = _payload(inputs, 0, (TextDoc, Opaque))
    media = src.media_type if isinstance(src, Opaque) else "text/plain"
    user = f"[attachment {src.source_id} ({media})]\n{_doc_text(src)}"
    content, out = _ask(ctx, _prompt(ctx, GRAPH_PROMPT), user)
    obj = _json_reply(content, ctx.node_id)
    try:
        g = circuit.PropertyGraph.from_dict(obj["graph"])
    except (KeyError, TypeError, ValueError, circuit.CircuitError) as e:
        raise OperatorError(f"{ctx.node_id}: malformed graph in reply: {e}") from None
    res = _graph_output(g, src, ctx.node_id)
    res.confidence = _confidence(obj, ctx)
    res.tokens_in, res.tokens_out, res.latency_ms = out.tokens_in, out.tokens_out, out.latency_ms
    return res


REG.define("validate_circuit", "Check LED currents; pass the graph through with warnings.")


@REG.procedure("validate_circuit", "led_rules")
def led_rules(ctx: OpContext, inputs) -> OpOutput:
    g = _payload(inputs, 0, circuit.PropertyGraph)
    rules = tuple(circuit.ValidationRule.from_dict(r) for r in ctx.params.get("rules", [{}]))
    try:
        warnings = circuit.validate_circuit(g, rules)
    except circuit.CircuitError as e:
        raise OperatorError(f"{ctx.node_id}: {e}") from None
    return OpOutput(g, metadata={"warnings": len(warnings)},
                    warnings=[w.to_dict() for w in warnings])


REG.define("add_redundancy", "Duplicate the switched branch in parallel.")


@REG.procedure("add_redundancy", "duplicate_branch")
def duplicate_branch(ctx: OpContext, inputs) -> OpOutput:
    g = _payload(inputs, 0, circuit.PropertyGraph)
    try:
        lineage = circuit.redundancy_lineage(g)
        g2 = circuit.add_redundancy(g)
    except circuit.CircuitError as e:
        raise OperatorError(f"{ctx.node_id}: {e}") from None
    elements = {}
    for dup, orig in lineage.items():
        src_id = g.by_name(orig).id
        elements[f"component:{g2.by_name(dup).id}"] = ctx.elements.get(f"component:{src_id}",
                                                                       frozenset())
    return OpOutput(g2, elements=elements, metadata={"added": sorted(lineage)})


REG.define("project_diagram", "Circuit graph to diagram source text.")


@REG.procedure("project_diagram", "netlist_source")
def netlist_source(ctx: OpContext, inputs) -> OpOutput:
    g = _payload(inputs, 0, circuit.PropertyGraph)
    return OpOutput(DiagramSource.from_graph(g))

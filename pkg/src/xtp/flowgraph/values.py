"""JSON encoding of typed values, used for run artifacts and replay."""

from __future__ import annotations

import json

from xtp.opcore.circuit import PropertyGraph
from xtp.opcore.clinical import RowSet, Triplet, TripletSet
from xtp.projection import DiagramSource, Report
from xtp.relstore import (
    ColumnDef, RelSchema, Relation, SelectAggregate, Store, TableSchema, parse_sql, print_sql,
)
from xtp.typesys import Opaque, Provenance, Span, TextDoc, TypedValue, TypeTag


class ValueFormatError(ValueError):
    pass


def _schema_to(schema: RelSchema) -> list:
    return [{"name": t.name,
             "columns": [{"name": c.name, "type": c.coltype, "pk": c.is_pk,
                          "fk": list(c.fk) if c.fk else None} for c in t.columns]}
            for t in schema.tables]


def _schema_from(items: list) -> RelSchema:
    return RelSchema(tuple(
        TableSchema(t["name"], tuple(ColumnDef(c["name"], c["type"], bool(c["pk"]),
                                               tuple(c["fk"]) if c["fk"] else None)
                                     for c in t["columns"]))
        for t in items))


def _rows_to(rows: dict) -> dict:
    return {k: [list(r) for r in v] for k, v in rows.items()}


def _rows_from(rows: dict) -> dict:
    return {k: [tuple(r) for r in v] for k, v in rows.items()}


def encode_payload(p) -> dict:
    kind = type(p).__name__
    if isinstance(p, TextDoc):
        body = {"source_id": p.source_id, "text": p.text}
    elif isinstance(p, Opaque):
        body = {"source_id": p.source_id, "media_type": p.media_type, "data": p.data}
    elif isinstance(p, Relation):
        body = {"name": p.name, "columns": list(p.columns), "rows": [list(r) for r in p.rows]}
    elif isinstance(p, RelSchema):
        body = {"tables": _schema_to(p)}
    elif isinstance(p, Store):
        body = {"tables": _schema_to(p.schema), "rows": _rows_to(p.rows),
                "views": {name: print_sql(sel) for name, sel in p.views.items()}}
    elif isinstance(p, RowSet):
        body = {"tables": _schema_to(p.schema), "rows": _rows_to(p.rows),
                "evidence": {k: [list(e) for e in v] for k, v in p.evidence.items()}}
    elif isinstance(p, TripletSet):
        body = {"source_id": p.source_id,
                "triplets": [{"s": t.subject, "p": t.predicate, "o": t.object,
                              "s_span": t.subject_span.to_list(),
                              "o_span": t.object_span.to_list()} for t in p.triplets]}
    elif isinstance(p, PropertyGraph):
        body = p.to_dict()
    elif isinstance(p, Report):
        body = p.to_dict()
    elif isinstance(p, DiagramSource):
        body = p.to_dict()
    else:
        raise ValueFormatError(f"cannot encode payload {kind}")
    return {"type": kind, **body}


def decode_payload(obj: dict):
    kind = obj.get("type")
    try:
        if kind == "TextDoc":
            return TextDoc(obj["source_id"], obj["text"])
        if kind == "Opaque":
            return Opaque(obj["source_id"], obj["media_type"], obj["data"])
        if kind == "Relation":
            return Relation(obj["name"], tuple(obj["columns"]), [tuple(r) for r in obj["rows"]])
        if kind == "RelSchema":
            return _schema_from(obj["tables"])
        if kind == "Store":
            store = Store()
            for t in _schema_from(obj["tables"]).tables:
                store.schemas[t.name] = t
            store.rows = _rows_from(obj["rows"])
            for name, sql in obj["views"].items():
                (sel,) = parse_sql(sql)
                if not isinstance(sel, SelectAggregate):
                    raise ValueFormatError(f"view {name} is not a SELECT")
                store.views[name] = sel
            return store
        if kind == "RowSet":
            return RowSet(_schema_from(obj["tables"]), _rows_from(obj["rows"]),
                          {k: [tuple(e) for e in v] for k, v in obj["evidence"].items()})
        if kind == "TripletSet":
            return TripletSet(obj["source_id"], tuple(
                Triplet(t["s"], t["p"], t["o"], Span.from_list(t["s_span"]),
                        Span.from_list(t["o_span"])) for t in obj["triplets"]))
        if kind == "PropertyGraph":
            return PropertyGraph.from_dict(obj)
        if kind == "Report":
            return Report.from_dict(obj)
        if kind == "DiagramSource":
            return DiagramSource(obj["format"], obj["body"])
    except (KeyError, TypeError) as e:
        raise ValueFormatError(f"malformed {kind} payload: {e}") from None
    raise ValueFormatError(f"unknown payload type {kind!r}")


def encode_value(v: TypedValue) -> dict:
    return {
        "value_id": v.value_id,
        "tag": str(v.tag),
        "confidence": v.confidence,
        "metadata": v.metadata,
        "provenance": {"origins": sorted(s.to_list() for s in v.provenance.origins),
                       "chain": list(v.provenance.chain)},
        "payload": encode_payload(v.payload),
    }


def decode_value(obj: dict) -> TypedValue:
    prov = obj.get("provenance", {})
    return TypedValue(
        TypeTag.parse(obj["tag"]), decode_payload(obj["payload"]),
        Provenance(frozenset(Span.from_list(s) for s in prov.get("origins", [])),
                   tuple(prov.get("chain", []))),
        float(obj.get("confidence", 1.0)), obj.get("value_id"), dict(obj.get("metadata", {})))


def dumps_value(v: TypedValue) -> str:
    return json.dumps(encode_value(v), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def loads_value(text: str) -> TypedValue:
    return decode_value(json.loads(text))

"""Clinical-notes operators: schema text, triplet rules, row alignment, SQL extraction, de-identification."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from xtp.relstore import (
    ColumnDef, CreateTable, CreateViewSelect, InsertValues, RelSchema, Relation,
    SelectAggregate, ColRef, SqlError, Store, TableSchema,
)
from xtp.typesys import Span, TextDoc


# --------------------------------------------------------------------------
# Schema text:  "pt id: int [PK], name: string, p_id: int [FK → pt(id)]"

_COL_RE = re.compile(
    r"^\s*(?P<name>[A-Za-z_]\w*)\s*:\s*(?P<type>int|string)\s*"
    r"(?:\[(?P<tag>PK|FK\s*(?:→|->)\s*(?P<ft>[A-Za-z_]\w*)\s*\(\s*(?P<fc>[A-Za-z_]\w*)\s*\))\])?\s*$",
    re.IGNORECASE)


class SchemaParseError(ValueError):
    pass


def parse_schema_text(text: str) -> RelSchema:
    tables = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        name, _, rest = line.partition(" ")
        cols = []
        for part in re.split(r",(?![^\[]*\])", rest):
            m = _COL_RE.match(part)
            if not m:
                raise SchemaParseError(f"line {lineno}: cannot parse column {part.strip()!r}")
            tag = (m.group("tag") or "").upper()
            fk = (m.group("ft"), m.group("fc")) if tag.startswith("FK") else None
            cols.append(ColumnDef(m.group("name"), m.group("type").lower(), tag == "PK", fk))
        tables.append(TableSchema(name, tuple(cols)))
    return RelSchema(tuple(tables))


def format_schema_text(schema: RelSchema) -> str:
    lines = []
    for t in schema.tables:
        cols = []
        for c in t.columns:
            s = f"{c.name}: {c.coltype}"
            if c.is_pk:
                s += " [PK]"
            if c.fk:
                s += f" [FK → {c.fk[0]}({c.fk[1]})]"
            cols.append(s)
        lines.append(f"{t.name} {', '.join(cols)}")
    return "\n".join(lines)


@dataclass(frozen=True)
class SchemaError:
    kind: str  # missing_pk | multiple_pk | dangling_fk | duplicate_table | duplicate_column
    table: str
    column: str | None = None


def schema_validate(schema: RelSchema) -> list[SchemaError]:
    errors = []
    seen_tables = set()
    by_name = {}
    for t in schema.tables:
        if t.name in seen_tables:
            errors.append(SchemaError("duplicate_table", t.name))
        seen_tables.add(t.name)
        by_name.setdefault(t.name, t)
    for t in schema.tables:
        seen_cols = set()
        for c in t.columns:
            if c.name in seen_cols:
                errors.append(SchemaError("duplicate_column", t.name, c.name))
            seen_cols.add(c.name)
        n_pk = sum(c.is_pk for c in t.columns)
        if n_pk == 0:
            errors.append(SchemaError("missing_pk", t.name))
        elif n_pk > 1:
            errors.append(SchemaError("multiple_pk", t.name))
        for c in t.columns:
            if c.fk is None:
                continue
            target = by_name.get(c.fk[0])
            if target is None or not any(tc.name == c.fk[1] and tc.is_pk for tc in target.columns):
                errors.append(SchemaError("dangling_fk", t.name, c.name))
    return errors


# --------------------------------------------------------------------------
# Triplets

@dataclass(frozen=True)
class Triplet:
    subject: str
    predicate: str
    object: str
    subject_span: Span
    object_span: Span

    def as_tuple(self) -> tuple[str, str, str]:
        return (self.subject, self.predicate, self.object)

    @property
    def spans(self) -> frozenset[Span]:
        return frozenset({self.subject_span, self.object_span})


@dataclass(frozen=True)
class TripletSet:
    source_id: str
    triplets: tuple[Triplet, ...] = ()

    def relations(self) -> list[Relation]:
        return [Relation("triplets", ("subject", "predicate", "object"),
                         [t.as_tuple() for t in self.triplets])]

    def numbered(self) -> str:
        return "\n".join(f"{i}. ({t.subject!r}, {t.predicate!r}, {t.object!r})"
                         for i, t in enumerate(self.triplets))


_NAME = r"[A-Z][a-z]+ (?:[A-Z][a-z]+|[A-Z]\.)"
_PATIENT_RE = re.compile(rf"(?:^|– )(?:Patient )?(?P<name>{_NAME})(?= \(MRN| returned| reported| was)")
_MRN_RE = re.compile(r"\(MRN (?P<mrn>\d+)\)")
_DIAG_RE = re.compile(r"(?:diagnosed with|presumed) (?P<dx>[a-z][a-z ]*?[a-z])(?=[.,;]| for|$)")
_RX_RE = re.compile(r"(?:Prescribed|Started on|repeated) (?P<drug>[A-Z][a-z]+) "
                    r"(?P<dose>\d+(?:\.\d+)?mg) (?P<route>[A-Z]{2})")
_ATTR_RES = (
    ("brand", re.compile(r"Brand: (?P<v>[A-Z][A-Za-z]+)")),
    ("gsn", re.compile(r"GSN (?P<v>\d+)")),
    ("ndc", re.compile(r"NDC (?P<v>[\d-]+)")),
)


def triplet_extract(doc: TextDoc) -> TripletSet:
    """Pattern rules over each line; the patient is the most recent name mention on the line."""
    out: list[tuple[int, int, Triplet]] = []
    offset = 0
    for line in doc.text.splitlines(keepends=True):
        body = line.rstrip("\r\n")

        def span(m, group):
            return doc.byte_span(offset + m.start(group), offset + m.end(group))

        patient = _PATIENT_RE.search(body)
        if patient:
            p_name, p_span = patient.group("name"), span(patient, "name")
            mrn = _MRN_RE.search(body)
            if mrn:
                out.append((offset + mrn.start(), 0, Triplet(p_name, "mrn", mrn.group("mrn"), p_span,
                                                    span(mrn, "mrn"))))
            for dx in _DIAG_RE.finditer(body):
                out.append((offset + dx.start(), 1, Triplet(p_name, "diagnosis", dx.group("dx"), p_span,
                                                   span(dx, "dx"))))
            for rx in _RX_RE.finditer(body):
                d_name, d_span = rx.group("drug"), span(rx, "drug")
                out.append((offset + rx.start(), 2, Triplet(p_name, "prescribed", d_name, p_span, d_span)))
                out.append((offset + rx.start(), 3, Triplet(d_name, "dose", rx.group("dose"), d_span,
                                                   span(rx, "dose"))))
                out.append((offset + rx.start(), 4, Triplet(d_name, "route", rx.group("route"), d_span,
                                                   span(rx, "route"))))
                # attributes up to the next prescription on the line
                nxt = _RX_RE.search(body, rx.end())
                stop = nxt.start() if nxt else len(body)
                for k, (pred, rex) in enumerate(_ATTR_RES):
                    m = rex.search(body, rx.end(), stop)
                    if m:
                        out.append((offset + m.start(), 5 + k, Triplet(d_name, pred, m.group("v"), d_span,
                                                              span(m, "v"))))
        offset += len(line)
    # document order, then rule order for triplets anchored at the same position
    out.sort(key=lambda item: (item[0], item[1]))
    return TripletSet(doc.source_id, tuple(t for _, _, t in out))


def ground_triplets(doc: TextDoc, raw: list[dict]) -> TripletSet:
    """Attach spans to model-proposed triplets by locating their text on the cited line.

    Unlocatable strings fall back to the whole line so every triplet keeps an origin.
    """
    lines = doc.text.splitlines(keepends=True)
    starts = []
    pos = 0
    for line in lines:
        starts.append(pos)
        pos += len(line)
    out = []
    for item in raw:
        s, p, o = str(item["s"]), str(item["p"]), str(item["o"])
        idx = int(item.get("line", 1)) - 1
        if not 0 <= idx < len(lines):
            raise ValueError(f"triplet {s, p, o} cites line {idx + 1} outside the document")
        body = lines[idx].rstrip("\r\n")
        base = starts[idx]

        def locate(needle, after=0):
            at = body.find(needle, after)
            if at < 0:
                return doc.byte_span(base, base + len(body)), 0
            return doc.byte_span(base + at, base + at + len(needle)), at + len(needle)

        s_span, _ = locate(s)
        o_span, _ = locate(o)
        out.append(Triplet(s, p, o, s_span, o_span))
    return TripletSet(doc.source_id, tuple(out))


# --------------------------------------------------------------------------
# Row alignment

@dataclass
class RowSet:
    """Rows aligned to a schema, with the triplets each row was built from."""

    schema: RelSchema
    rows: dict[str, list[tuple]] = field(default_factory=dict)
    evidence: dict[str, list[tuple[int, ...]]] = field(default_factory=dict)

    def relations(self) -> list[Relation]:
        return [Relation(t.name, t.column_names, self.rows.get(t.name, []))
                for t in self.schema.tables]

    def element_ids(self) -> list[tuple[str, str, int]]:
        """(element_id, table, row index) for every row; ids are ``table:pk``."""
        out = []
        for t in self.schema.tables:
            pk_idx = t.column_names.index(t.pk)
            for i, row in enumerate(self.rows.get(t.name, [])):
                out.append((f"{t.name}:{row[pk_idx]}", t.name, i))
        return out

    def origins(self, triplets: TripletSet) -> dict[str, frozenset[Span]]:
        out = {}
        for eid, table, i in self.element_ids():
            spans: set[Span] = set()
            for k in self.evidence.get(table, [()] * (i + 1))[i]:
                spans |= triplets.triplets[k].spans
            out[eid] = frozenset(spans)
        return out


def _same_person(a: str, b: str) -> bool:
    """'John D.' and 'John Doe' denote one patient; first names must match exactly."""
    if a == b:
        return True
    fa, _, la = a.partition(" ")
    fb, _, lb = b.partition(" ")
    if fa != fb or not la or not lb:
        return False
    la, lb = la.rstrip("."), lb.rstrip(".")
    return la.startswith(lb) or lb.startswith(la)


def _dose_parts(dose: str) -> tuple[str, str]:
    m = re.match(r"^(\d+(?:\.\d+)?)\s*([A-Za-z]+)$", dose)
    return (m.group(1), m.group(2)) if m else (dose, "")


def rule_align(schema: RelSchema, triplets: TripletSet) -> RowSet:
    """Group triplets into patient, medication and administration rows.

    Expects tables named ``pt``, ``med`` and ``adm`` (pk ``id``); columns are filled by name
    and anything unknown stays NULL.
    """
    patients: list[dict] = []
    meds: list[dict] = []
    adms: list[dict] = []
    ts = triplets.triplets

    def patient_for(name: str) -> dict:
        for p in patients:
            if any(_same_person(name, alias) for alias in p["aliases"]):
                if name not in p["aliases"]:
                    p["aliases"].append(name)
                return p
        p = {"id": len(patients) + 1, "name": name, "aliases": [name], "ev": []}
        patients.append(p)
        return p

    for k, t in enumerate(ts):
        if t.predicate == "mrn":
            p = patient_for(t.subject)
            p.setdefault("mrn", t.object)
            p["ev"].append(k)
        elif t.predicate == "diagnosis":
            p = patient_for(t.subject)
            p.setdefault("diagnosis", t.object)
            p["ev"].append(k)
        elif t.predicate == "prescribed":
            p = patient_for(t.subject)
            p["ev"].append(k)
            attrs = {u.predicate: u.object for u in ts
                     if u.subject_span == t.object_span and u.predicate != "prescribed"}
            attr_ev = [j for j, u in enumerate(ts)
                       if u.subject_span == t.object_span and u.predicate != "prescribed"]
            amount, unit = _dose_parts(attrs.get("dose", ""))
            med = None
            for m in meds:
                same = (m["name"], m["dose_amount"], m["dose_unit"], m["route"]) == \
                       (t.object, amount, unit, attrs.get("route"))
                brand = attrs.get("brand")
                if same and (brand is None or m.get("brand") in (None, brand)):
                    med = m
                    break
            if med is None:
                med = {"id": len(meds) + 1, "name": t.object, "dose_amount": amount,
                       "dose_unit": unit, "ev": []}
                meds.append(med)
            for key in ("route", "brand", "gsn", "ndc"):
                if key in attrs and med.get(key) is None:
                    med[key] = attrs[key]
            med["ev"].extend(attr_ev)
            adms.append({"id": len(adms) + 1, "p_id": p["id"], "med_id": med["id"], "ev": [k]})

    rows: dict[str, list[tuple]] = {}
    evidence: dict[str, list[tuple[int, ...]]] = {}
    for table, records in (("pt", patients), ("med", meds), ("adm", adms)):
        try:
            t = schema.table(table)
        except SqlError:
            continue
        rows[table] = []
        evidence[table] = []
        for r in records:
            vals = []
            for c in t.columns:
                v = r.get(c.name)
                if v is not None and c.coltype == "int":
                    v = int(v)
                vals.append(v)
            rows[table].append(tuple(vals))
            evidence[table].append(tuple(sorted(set(r["ev"]))))
    return RowSet(schema, rows, evidence)


# --------------------------------------------------------------------------
# SQL extraction

class ExtractError(ValueError):
    pass


def fk_order(schema: RelSchema) -> list[TableSchema]:
    """Tables ordered so every FK target precedes its referrers (stable w.r.t. schema order)."""
    remaining = list(schema.tables)
    done: list[TableSchema] = []
    names = set(schema.table_names)
    while remaining:
        for t in remaining:
            deps = {c.fk[0] for c in t.columns if c.fk and c.fk[0] != t.name and c.fk[0] in names}
            if deps <= {d.name for d in done}:
                done.append(t)
                remaining.remove(t)
                break
        else:
            raise ExtractError(f"FK cycle among {[t.name for t in remaining]}")
    return done


def extract_sql(schema: RelSchema, rows: dict[str, list[tuple]]) -> list:
    ordered = fk_order(schema)
    stmts: list = [CreateTable(t.name, t.columns) for t in ordered]
    unknown = set(rows) - set(schema.table_names)
    if unknown:
        raise ExtractError(f"rows for unknown tables {sorted(unknown)}")
    for t in ordered:
        for row in rows.get(t.name, []):
            if len(row) != len(t.columns):
                raise ExtractError(f"{t.name}: row {row!r} has arity {len(row)}, want {len(t.columns)}")
            for c, v in zip(t.columns, row):
                want = int if c.coltype == "int" else str
                if v is not None and (isinstance(v, bool) or not isinstance(v, want)):
                    raise ExtractError(f"{t.name}.{c.name}: {v!r} is not {c.coltype}")
            stmts.append(InsertValues(t.name, tuple(row)))
    return stmts


# --------------------------------------------------------------------------
# De-identification

def deidentify(store: Store, table: str, keep_cols, view_name: str | None = None
               ) -> tuple[str, set[str]]:
    """Create a projection view over ``keep_cols``; return every value of the dropped columns."""
    if table not in store.schemas:
        raise SqlError(f"unknown table {table}")
    schema = store.schemas[table]
    keep = list(keep_cols)
    missing = [c for c in keep if c not in schema.column_names]
    if missing:
        raise SqlError(f"unknown columns {missing} in {table}")
    view_name = view_name or f"{table}_deidentified"
    store.execute(CreateViewSelect(view_name, SelectAggregate(table, tuple(ColRef(c) for c in keep))))
    dropped = [i for i, c in enumerate(schema.column_names) if c not in keep]
    deleted = {str(row[i]) for row in store.rows[table] for i in dropped if row[i] is not None}
    return view_name, deleted

"""In-memory relational store executing the SQL subset."""

from __future__ import annotations

import copy
import threading
from dataclasses import dataclass, field

from xtp.relstore.sqlast import (
    ColRef, CreateTable, CreateViewSelect, Eq, InsertValues, RelSchema, SelectAggregate,
    SqlError, SqlStmt, TableSchema, UpdateSetWhereIn,
)


class UnknownTable(SqlError):
    pass


class UnknownColumn(SqlError):
    pass


class PrimaryKeyViolation(SqlError):
    pass


class ForeignKeyViolation(SqlError):
    pass


class TypeMismatch(SqlError):
    pass


@dataclass
class Relation:
    name: str
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def __post_init__(self):
        self.columns = tuple(self.columns)
        self.rows = [tuple(r) for r in self.rows]
        for r in self.rows:
            if len(r) != len(self.columns):
                raise SqlError(f"row arity {len(r)} != {len(self.columns)} in {self.name}")

    def column(self, name: str) -> list:
        idx = self.columns.index(name)
        return [r[idx] for r in self.rows]

    def to_csv(self) -> str:
        import csv
        import io
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows(["" if v is None else v for v in row] for row in self.rows)
        return buf.getvalue()


def _check_type(col, value, table: str) -> None:
    if value is None:
        return
    want = int if col.coltype == "int" else str
    if isinstance(value, bool) or not isinstance(value, want):
        raise TypeMismatch(f"{table}.{col.name} is {col.coltype}, got {value!r}")


class Store:
    """Tables plus lazily evaluated views. Single writer; ``execute`` serializes mutations."""

    def __init__(self):
        self.schemas: dict[str, TableSchema] = {}
        self.rows: dict[str, list[tuple]] = {}
        self.views: dict[str, SelectAggregate] = {}
        self._lock = threading.Lock()

    def __deepcopy__(self, memo):
        dup = Store()
        dup.schemas = dict(self.schemas)
        dup.rows = {k: list(v) for k, v in self.rows.items()}
        dup.views = dict(self.views)
        return dup

    def copy(self) -> "Store":
        return copy.deepcopy(self)

    @property
    def schema(self) -> RelSchema:
        return RelSchema(tuple(self.schemas.values()))

    def relation(self, name: str) -> Relation:
        if name in self.schemas:
            return Relation(name, self.schemas[name].column_names, list(self.rows[name]))
        if name in self.views:
            rel = self._select(self.views[name])
            return Relation(name, rel.columns, rel.rows)
        raise UnknownTable(f"unknown table or view {name}")

    def execute(self, stmt: SqlStmt):
        """Run one statement atomically; returns a row count or a Relation."""
        with self._lock:
            if isinstance(stmt, CreateTable):
                return self._create_table(stmt)
            if isinstance(stmt, InsertValues):
                return self._insert(stmt)
            if isinstance(stmt, UpdateSetWhereIn):
                return self._update(stmt)
            if isinstance(stmt, CreateViewSelect):
                return self._create_view(stmt)
            if isinstance(stmt, SelectAggregate):
                return self._select(stmt)
        raise SqlError(f"not a statement: {stmt!r}")

    def execute_all(self, stmts) -> list:
        return [self.execute(s) for s in stmts]

    # ------------------------------------------------------------------

    def _table(self, name: str) -> TableSchema:
        if name not in self.schemas:
            raise UnknownTable(f"unknown table {name}")
        return self.schemas[name]

    def _create_table(self, stmt: CreateTable) -> int:
        if stmt.name in self.schemas or stmt.name in self.views:
            raise SqlError(f"{stmt.name} already exists")
        names = [c.name for c in stmt.columns]
        if len(set(names)) != len(names):
            raise SqlError(f"duplicate column in {stmt.name}")
        if sum(c.is_pk for c in stmt.columns) != 1:
            raise SqlError(f"{stmt.name} must have exactly one primary key column")
        for c in stmt.columns:
            if c.fk:
                target = self._table(c.fk[0])
                if target.pk != c.fk[1]:
                    raise ForeignKeyViolation(f"{stmt.name}.{c.name} must reference the pk of {c.fk[0]}")
                if target.column(c.fk[1]).coltype != c.coltype:
                    raise TypeMismatch(f"{stmt.name}.{c.name} type differs from {c.fk[0]}.{c.fk[1]}")
        self.schemas[stmt.name] = stmt.schema()
        self.rows[stmt.name] = []
        return 0

    def _check_row(self, schema: TableSchema, row: tuple, existing: list[tuple], skip: int | None = None):
        pk_idx = schema.column_names.index(schema.pk)
        for col, value in zip(schema.columns, row):
            _check_type(col, value, schema.name)
            if col.fk and value is not None:
                target = self.schemas[col.fk[0]]
                t_idx = target.column_names.index(target.pk)
                if not any(r[t_idx] == value for r in self.rows[col.fk[0]]):
                    raise ForeignKeyViolation(
                        f"{schema.name}.{col.name}={value!r} has no match in {col.fk[0]}.{col.fk[1]}")
        if row[pk_idx] is None:
            raise PrimaryKeyViolation(f"null primary key in {schema.name}")
        for i, r in enumerate(existing):
            if i != skip and r[pk_idx] == row[pk_idx]:
                raise PrimaryKeyViolation(f"duplicate primary key {row[pk_idx]!r} in {schema.name}")

    def _insert(self, stmt: InsertValues) -> int:
        schema = self._table(stmt.table)
        if len(stmt.values) != len(schema.columns):
            raise SqlError(f"{stmt.table} has {len(schema.columns)} columns, got {len(stmt.values)} values")
        self._check_row(schema, stmt.values, self.rows[stmt.table])
        self.rows[stmt.table].append(tuple(stmt.values))
        return 1

    def _update(self, stmt: UpdateSetWhereIn) -> int:
        schema = self._table(stmt.table)
        col = schema.column(stmt.column)
        where = schema.column(stmt.where_column)
        if col.is_pk:
            raise SqlError("updating a primary key is not supported")
        for v in stmt.in_values:
            _check_type(where, v, stmt.table)
        ci = schema.column_names.index(stmt.column)
        wi = schema.column_names.index(stmt.where_column)
        new_rows = list(self.rows[stmt.table])
        changed = 0
        for i, r in enumerate(new_rows):
            # null never matches IN
            if r[wi] is not None and r[wi] in stmt.in_values:
                row = r[:ci] + (stmt.value,) + r[ci + 1:]
                self._check_row(schema, row, new_rows, skip=i)
                new_rows[i] = row
                changed += 1
        self.rows[stmt.table] = new_rows
        return changed

    def _create_view(self, stmt: CreateViewSelect) -> int:
        if stmt.name in self.schemas or stmt.name in self.views:
            raise SqlError(f"{stmt.name} already exists")
        self._select(stmt.select)  # validates references
        self.views[stmt.name] = stmt.select
        return 0

    # ------------------------------------------------------------------

    def _source(self, name: str) -> tuple[list[tuple[str, str]], list[tuple]]:
        if name in self.schemas:
            cols = [(name, c) for c in self.schemas[name].column_names]
            return cols, list(self.rows[name])
        if name in self.views:
            rel = self._select(self.views[name])
            return [(name, c) for c in rel.columns], rel.rows
        raise UnknownTable(f"unknown table or view {name}")

    @staticmethod
    def _resolve(cols: list[tuple[str, str]], ref: ColRef) -> int:
        hits = [i for i, (t, c) in enumerate(cols)
                if c == ref.name and (ref.table is None or ref.table == t)]
        if not hits:
            raise UnknownColumn(f"unknown column {ref}")
        if len(hits) > 1:
            raise UnknownColumn(f"ambiguous column {ref}")
        return hits[0]

    def _coltype(self, table: str, column: str) -> str | None:
        if table in self.schemas:
            return self.schemas[table].column(column).coltype
        return None

    def _select(self, s: SelectAggregate) -> Relation:
        cols, rows = self._source(s.table)
        for j in s.joins:
            jcols, jrows = self._source(j.table)
            merged = cols + jcols
            li = self._resolve(merged, j.left)
            ri = self._resolve(merged, j.right)
            rows = [a + b for a in rows for b in jrows
                    if (a + b)[li] is not None and (a + b)[li] == (a + b)[ri]]
            cols = merged
        for p in s.where:
            idx = self._resolve(cols, p.col)
            ctype = self._coltype(*cols[idx])
            values = (p.value,) if isinstance(p, Eq) else p.values
            if ctype is not None:
                for v in values:
                    if v is not None:
                        _check_type(self.schemas[cols[idx][0]].column(cols[idx][1]), v, cols[idx][0])
            rows = [r for r in rows if r[idx] is not None and r[idx] in values]
        sel = [self._resolve(cols, c) for c in s.columns]
        if s.group_by:
            if not s.count:
                raise SqlError("GROUP BY requires COUNT(*)")
            keys = [self._resolve(cols, c) for c in s.group_by]
            for i in sel:
                if i not in keys:
                    raise SqlError(f"column {cols[i][0]}.{cols[i][1]} must appear in GROUP BY")
            groups: dict[tuple, int] = {}
            for r in rows:
                k = tuple(r[i] for i in keys)
                groups[k] = groups.get(k, 0) + 1
            out = []
            for k, n in groups.items():
                row = dict(zip(keys, k))
                out.append(tuple(row[i] for i in sel) + (n,))
        elif s.count:
            if sel:
                raise SqlError("non-aggregated columns with COUNT(*) need GROUP BY")
            out = [(len(rows),)]
        else:
            out = [tuple(r[i] for i in sel) for r in rows]
        names = s.output_columns
        if s.order_by is not None:
            if s.order_by not in names:
                raise UnknownColumn(f"ORDER BY {s.order_by} is not an output column")
            oi = names.index(s.order_by)
            present = [r for r in out if r[oi] is not None]
            nulls = [r for r in out if r[oi] is None]
            present.sort(key=lambda r: r[oi], reverse=s.descending)
            out = present + nulls
        return Relation("result", names, out)


def flatten_payload(payload) -> str:
    """Linearize tables into prompt text, e.g. ``[id: 1] [mrn: 874521]`` per row."""
    if isinstance(payload, Relation):
        rels = [payload]
    elif isinstance(payload, Store):
        rels = [payload.relation(n) for n in list(payload.schemas) + list(payload.views)]
    elif hasattr(payload, "relations"):
        rels = payload.relations()
    elif hasattr(payload, "tables"):
        from xtp.opcore.clinical import format_schema_text
        return format_schema_text(payload)
    else:
        raise SqlError(f"cannot flatten {type(payload).__name__}")
    lines = []
    for rel in rels:
        lines.append(f"table {rel.name}")
        for row in rel.rows:
            lines.append(" ".join(f"[{c}: {'NULL' if v is None else v}]"
                                  for c, v in zip(rel.columns, row)))
    return "\n".join(lines)

"""Statement and schema node types for the SQL subset."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

Scalar = Union[int, str, None]

COLTYPES = ("int", "string")


class SqlError(Exception):
    pass


@dataclass(frozen=True)
class ColumnDef:
    name: str
    coltype: str  # "int" | "string"
    is_pk: bool = False
    fk: tuple[str, str] | None = None

    def __post_init__(self):
        if self.coltype not in COLTYPES:
            raise SqlError(f"unknown column type {self.coltype!r}")


@dataclass(frozen=True)
class TableSchema:
    name: str
    columns: tuple[ColumnDef, ...]

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    @property
    def pk(self) -> str | None:
        pks = [c.name for c in self.columns if c.is_pk]
        return pks[0] if len(pks) == 1 else None

    def column(self, name: str) -> ColumnDef:
        for c in self.columns:
            if c.name == name:
                return c
        raise SqlError(f"unknown column {self.name}.{name}")


@dataclass(frozen=True)
class RelSchema:
    tables: tuple[TableSchema, ...]

    def table(self, name: str) -> TableSchema:
        for t in self.tables:
            if t.name == name:
                return t
        raise SqlError(f"unknown table {name}")

    @property
    def table_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tables)


@dataclass(frozen=True)
class ColRef:
    name: str
    table: str | None = None

    def __str__(self) -> str:
        return f"{self.table}.{self.name}" if self.table else self.name


@dataclass(frozen=True)
class Eq:
    col: ColRef
    value: Scalar


@dataclass(frozen=True)
class In:
    col: ColRef
    values: tuple[Scalar, ...]


Predicate = Union[Eq, In]


@dataclass(frozen=True)
class Join:
    table: str
    left: ColRef
    right: ColRef


@dataclass(frozen=True)
class CreateTable:
    name: str
    columns: tuple[ColumnDef, ...]

    def __post_init__(self):
        if not self.columns:
            raise SqlError(f"CREATE TABLE {self.name} needs at least one column")

    def schema(self) -> TableSchema:
        return TableSchema(self.name, self.columns)


@dataclass(frozen=True)
class InsertValues:
    table: str
    values: tuple[Scalar, ...]

    def __post_init__(self):
        if not self.values:
            raise SqlError("INSERT needs at least one value")


@dataclass(frozen=True)
class UpdateSetWhereIn:
    table: str
    column: str
    value: Scalar
    where_column: str
    in_values: tuple[Scalar, ...]

    def __post_init__(self):
        if not self.in_values:
            raise SqlError("IN list must not be empty")


@dataclass(frozen=True)
class SelectAggregate:
    """SELECT over one table with optional joins, filters, COUNT(*) grouping and ordering.

    Plain projections (no COUNT) are the degenerate case.
    """

    table: str
    columns: tuple[ColRef, ...] = ()
    count: bool = False
    count_alias: str | None = None
    joins: tuple[Join, ...] = ()
    where: tuple[Predicate, ...] = ()
    group_by: tuple[ColRef, ...] = ()
    order_by: str | None = None
    descending: bool = False

    def __post_init__(self):
        if not self.columns and not self.count:
            raise SqlError("SELECT needs columns or COUNT(*)")
        if self.count_alias is not None and not self.count:
            raise SqlError("alias without COUNT(*)")
        if self.descending and self.order_by is None:
            raise SqlError("DESC without ORDER BY")

    @property
    def output_columns(self) -> tuple[str, ...]:
        names = tuple(c.name for c in self.columns)
        if self.count:
            names += (self.count_alias or "count",)
        return names


@dataclass(frozen=True)
class CreateViewSelect:
    name: str
    select: SelectAggregate


SqlStmt = Union[CreateTable, InsertValues, UpdateSetWhereIn, CreateViewSelect, SelectAggregate]

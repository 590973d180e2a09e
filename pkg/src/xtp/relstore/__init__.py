"""SQL-subset parser/printer and an in-memory relational store."""

from xtp.relstore.parser import canonicalize_sql, format_literal, parse_sql, print_sql, tokenize, SqlSyntaxError
from xtp.relstore.sqlast import (
    ColRef, ColumnDef, CreateTable, CreateViewSelect, Eq, In, InsertValues, Join, RelSchema,
    SelectAggregate, SqlError, SqlStmt, TableSchema, UpdateSetWhereIn,
)
from xtp.relstore.store import (
    ForeignKeyViolation, PrimaryKeyViolation, Relation, Store, TypeMismatch, UnknownColumn,
    UnknownTable, flatten_payload,
)


def execute(stmt, store: Store):
    return store.execute(stmt)


__all__ = [
    "ColRef", "ColumnDef", "CreateTable", "CreateViewSelect", "Eq", "ForeignKeyViolation", "In",
    "InsertValues", "Join", "PrimaryKeyViolation", "RelSchema", "Relation", "SelectAggregate",
    "SqlError", "SqlStmt", "SqlSyntaxError", "Store", "TableSchema", "TypeMismatch",
    "UnknownColumn", "UnknownTable", "UpdateSetWhereIn", "canonicalize_sql", "execute",
    "flatten_payload", "format_literal", "parse_sql", "print_sql", "tokenize",
]

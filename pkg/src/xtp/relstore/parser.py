"""Recursive-descent parser and canonical printer for the SQL subset.

Grammar (keywords case-insensitive)::

    stmt         := (create_table | insert | update | create_view | select) ";"
    create_table := CREATE TABLE name "(" coldef ("," coldef)* ")"
    coldef       := name (INT | STRING) [PRIMARY KEY] [REFERENCES name "(" name ")"]
    insert       := INSERT INTO name VALUES "(" literal ("," literal)* ")"
    update       := UPDATE name SET name "=" literal WHERE name IN "(" literal ("," literal)* ")"
    create_view  := CREATE VIEW name AS select
    select       := SELECT items FROM name join* [where] [group_by] [order_by]
    items        := colref ("," colref)* ["," count] | count
    count        := COUNT "(" "*" ")" [AS name]
    join         := JOIN name ON colref "=" colref
    where        := WHERE pred (AND pred)*
    pred         := colref "=" literal | colref IN "(" literal ("," literal)* ")"
    group_by     := GROUP BY colref ("," colref)*
    order_by     := ORDER BY (name | COUNT) [ASC | DESC]
    literal      := int | 'string' | NULL
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from xtp.relstore.sqlast import (
    ColRef, ColumnDef, CreateTable, CreateViewSelect, Eq, In, InsertValues, Join,
    SelectAggregate, SqlError, SqlStmt, UpdateSetWhereIn,
)

KEYWORDS = frozenset("""
    CREATE TABLE INT STRING PRIMARY KEY REFERENCES INSERT INTO VALUES UPDATE SET WHERE IN
    VIEW AS SELECT COUNT FROM JOIN ON AND GROUP BY ORDER ASC DESC NULL
""".split())

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<int>-?\d+)
  | (?P<str>'(?:[^']|'')*')
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[(),;.=*])
""", re.VERBOSE)


class SqlSyntaxError(SqlError):
    def __init__(self, message: str, offset: int, expected: frozenset[str] = frozenset()):
        self.offset = offset
        self.expected = expected
        detail = f" (expected one of: {', '.join(sorted(expected))})" if expected else ""
        super().__init__(f"{message} at byte {offset}{detail}")


@dataclass(frozen=True)
class Token:
    kind: str  # kw | ident | int | str | punct | eof
    value: object
    offset: int  # byte offset into the UTF-8 source


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    byte = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise SqlSyntaxError(f"unexpected character {text[pos]!r}", byte)
        kind = m.lastgroup
        raw = m.group()
        if kind == "int":
            tokens.append(Token("int", int(raw), byte))
        elif kind == "str":
            tokens.append(Token("str", raw[1:-1].replace("''", "'"), byte))
        elif kind == "word":
            if raw.upper() in KEYWORDS:
                tokens.append(Token("kw", raw.upper(), byte))
            else:
                tokens.append(Token("ident", raw, byte))
        elif kind == "punct":
            tokens.append(Token("punct", raw, byte))
        byte += len(raw.encode("utf-8"))
        pos = m.end()
    tokens.append(Token("eof", None, byte))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def fail(self, *expected: str):
        got = "end of input" if self.tok.kind == "eof" else repr(self.tok.value)
        raise SqlSyntaxError(f"unexpected {got}", self.tok.offset, frozenset(expected))

    def at_kw(self, *words: str) -> bool:
        return self.tok.kind == "kw" and self.tok.value in words

    def at_punct(self, p: str) -> bool:
        return self.tok.kind == "punct" and self.tok.value == p

    def kw(self, *words: str) -> None:
        for w in words:
            if not self.at_kw(w):
                self.fail(w)
            self.i += 1

    def punct(self, p: str) -> None:
        if not self.at_punct(p):
            self.fail(p)
        self.i += 1

    def name(self) -> str:
        if self.tok.kind != "ident":
            self.fail("<name>")
        value = self.tok.value
        self.i += 1
        return value

    def literal(self):
        t = self.tok
        if t.kind in ("int", "str"):
            self.i += 1
            return t.value
        if self.at_kw("NULL"):
            self.i += 1
            return None
        self.fail("<int>", "<string>", "NULL")

    def literal_list(self) -> tuple:
        self.punct("(")
        values = [self.literal()]
        while self.at_punct(","):
            self.i += 1
            values.append(self.literal())
        self.punct(")")
        return tuple(values)

    def colref(self) -> ColRef:
        first = self.name()
        if self.at_punct("."):
            self.i += 1
            return ColRef(self.name(), first)
        return ColRef(first)

    # statements

    def statements(self) -> list[SqlStmt]:
        out = []
        while self.tok.kind != "eof":
            out.append(self.statement())
            self.punct(";")
        return out

    def statement(self) -> SqlStmt:
        if self.at_kw("CREATE"):
            self.i += 1
            if self.at_kw("TABLE"):
                self.i += 1
                return self.create_table()
            if self.at_kw("VIEW"):
                self.i += 1
                name = self.name()
                self.kw("AS")
                return CreateViewSelect(name, self.select())
            self.fail("TABLE", "VIEW")
        if self.at_kw("INSERT"):
            self.kw("INSERT", "INTO")
            table = self.name()
            self.kw("VALUES")
            return InsertValues(table, self.literal_list())
        if self.at_kw("UPDATE"):
            self.i += 1
            table = self.name()
            self.kw("SET")
            column = self.name()
            self.punct("=")
            value = self.literal()
            self.kw("WHERE")
            where_column = self.name()
            self.kw("IN")
            return UpdateSetWhereIn(table, column, value, where_column, self.literal_list())
        if self.at_kw("SELECT"):
            return self.select()
        self.fail("CREATE", "INSERT", "UPDATE", "SELECT")

    def create_table(self) -> CreateTable:
        name = self.name()
        self.punct("(")
        cols = [self.coldef()]
        while self.at_punct(","):
            self.i += 1
            cols.append(self.coldef())
        self.punct(")")
        return CreateTable(name, tuple(cols))

    def coldef(self) -> ColumnDef:
        name = self.name()
        if self.at_kw("INT", "STRING"):
            coltype = self.tok.value.lower()
            self.i += 1
        else:
            self.fail("INT", "STRING")
        is_pk = False
        if self.at_kw("PRIMARY"):
            self.kw("PRIMARY", "KEY")
            is_pk = True
        fk = None
        if self.at_kw("REFERENCES"):
            self.i += 1
            table = self.name()
            self.punct("(")
            fk = (table, self.name())
            self.punct(")")
        return ColumnDef(name, coltype, is_pk, fk)

    def select(self) -> SelectAggregate:
        self.kw("SELECT")
        columns: list[ColRef] = []
        count, alias = False, None
        while True:
            if self.at_kw("COUNT"):
                self.i += 1
                self.punct("(")
                self.punct("*")
                self.punct(")")
                count = True
                if self.at_kw("AS"):
                    self.i += 1
                    alias = self.name()
                break
            if self.tok.kind != "ident":
                self.fail("<name>", "COUNT")
            columns.append(self.colref())
            if not self.at_punct(","):
                break
            self.i += 1
        self.kw("FROM")
        table = self.name()
        joins = []
        while self.at_kw("JOIN"):
            self.i += 1
            jt = self.name()
            self.kw("ON")
            left = self.colref()
            self.punct("=")
            joins.append(Join(jt, left, self.colref()))
        where = []
        if self.at_kw("WHERE"):
            self.i += 1
            where.append(self.predicate())
            while self.at_kw("AND"):
                self.i += 1
                where.append(self.predicate())
        group_by = []
        if self.at_kw("GROUP"):
            self.kw("GROUP", "BY")
            group_by.append(self.colref())
            while self.at_punct(","):
                self.i += 1
                group_by.append(self.colref())
        order_by, desc = None, False
        if self.at_kw("ORDER"):
            self.kw("ORDER", "BY")
            if self.at_kw("COUNT"):  # the default COUNT(*) output name
                self.i += 1
                order_by = "count"
            else:
                order_by = self.name()
            if self.at_kw("ASC", "DESC"):
                desc = self.tok.value == "DESC"
                self.i += 1
        return SelectAggregate(table, tuple(columns), count, alias, tuple(joins), tuple(where),
                               tuple(group_by), order_by, desc)

    def predicate(self):
        col = self.colref()
        if self.at_punct("="):
            self.i += 1
            return Eq(col, self.literal())
        if self.at_kw("IN"):
            self.i += 1
            return In(col, self.literal_list())
        self.fail("=", "IN")


def parse_sql(text: str) -> list[SqlStmt]:
    return _Parser(text).statements()


# --------------------------------------------------------------------------
# Printing

def format_literal(value) -> str:
    if value is None:
        return "NULL"
    if isinstance(value, bool):
        raise SqlError("booleans are not SQL literals here")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return "'" + value.replace("'", "''") + "'"
    raise SqlError(f"cannot print literal {value!r}")


def _literals(values) -> str:
    return "(" + ", ".join(format_literal(v) for v in values) + ")"


def _coldef(c: ColumnDef) -> str:
    out = f"{c.name} {c.coltype.upper()}"
    if c.is_pk:
        out += " PRIMARY KEY"
    if c.fk:
        out += f" REFERENCES {c.fk[0]}({c.fk[1]})"
    return out


def _pred(p) -> str:
    if isinstance(p, Eq):
        return f"{p.col} = {format_literal(p.value)}"
    return f"{p.col} IN {_literals(p.values)}"


def _select(s: SelectAggregate) -> str:
    items = [str(c) for c in s.columns]
    if s.count:
        items.append("COUNT(*)" + (f" AS {s.count_alias}" if s.count_alias else ""))
    out = f"SELECT {', '.join(items)} FROM {s.table}"
    for j in s.joins:
        out += f" JOIN {j.table} ON {j.left} = {j.right}"
    if s.where:
        out += " WHERE " + " AND ".join(_pred(p) for p in s.where)
    if s.group_by:
        out += " GROUP BY " + ", ".join(str(c) for c in s.group_by)
    if s.order_by:
        out += f" ORDER BY {s.order_by}" + (" DESC" if s.descending else "")
    return out


def print_sql(stmt: SqlStmt) -> str:
    if isinstance(stmt, CreateTable):
        body = f"CREATE TABLE {stmt.name} ({', '.join(_coldef(c) for c in stmt.columns)})"
    elif isinstance(stmt, InsertValues):
        body = f"INSERT INTO {stmt.table} VALUES {_literals(stmt.values)}"
    elif isinstance(stmt, UpdateSetWhereIn):
        body = (f"UPDATE {stmt.table} SET {stmt.column} = {format_literal(stmt.value)} "
                f"WHERE {stmt.where_column} IN {_literals(stmt.in_values)}")
    elif isinstance(stmt, CreateViewSelect):
        body = f"CREATE VIEW {stmt.name} AS {_select(stmt.select)}"
    elif isinstance(stmt, SelectAggregate):
        body = _select(stmt)
    else:
        raise SqlError(f"not a statement: {stmt!r}")
    return body + ";"


def canonicalize_sql(text: str) -> str:
    return "\n".join(print_sql(s) for s in parse_sql(text))

"""Projection payloads: sectioned reports and diagram source text."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from xtp.opcore.circuit import PropertyGraph

SECTION_KINDS = ("text", "chart_data", "table")
NETLIST_FORMAT = "xtp-netlist/1"


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class Section:
    kind: str
    content: str
    title: str = ""

    def __post_init__(self):
        if self.kind not in SECTION_KINDS:
            raise ProjectionError(f"unknown section kind {self.kind!r}")
        if self.kind != "text":
            rows = list(csv.reader(io.StringIO(self.content)))
            if not rows:
                raise ProjectionError(f"{self.kind} section {self.title!r} needs a CSV header row")

    @property
    def guarded(self) -> bool:
        """Sections carrying free text or row values are checked against deleted values."""
        return self.kind in ("text", "table")

    def rows(self) -> list[list[str]]:
        return list(csv.reader(io.StringIO(self.content)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "title": self.title, "content": self.content}


@dataclass(frozen=True)
class Report:
    sections: tuple[Section, ...]

    def __post_init__(self):
        if not self.sections:
            raise ProjectionError("a report needs at least one section")

    def text(self) -> str:
        """Readable rendering; chart data is left to the figure files."""
        parts = []
        for s in self.sections:
            if s.kind == "chart_data":
                continue
            body = s.content if s.kind == "text" else _pretty_table(s.rows())
            parts.append(f"== {s.title} ==\n{body}" if s.title else body)
        return "\n\n".join(parts).rstrip("\n") + "\n"

    def to_dict(self) -> dict:
        return {"sections": [s.to_dict() for s in self.sections]}

    @classmethod
    def from_dict(cls, obj: dict) -> "Report":
        return cls(tuple(Section(s["kind"], s["content"], s.get("title", "")) for s in obj["sections"]))


def _pretty_table(rows: list[list[str]]) -> str:
    if not rows:
        return ""
    widths = [max(len(r[i]) if i < len(r) else 0 for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
    if len(rows) == 1:
        lines.append("(no rows)")
    return "\n".join(lines)


@dataclass(frozen=True)
class DiagramSource:
    format_id: str
    body: str

    def __post_init__(self):
        if self.format_id != NETLIST_FORMAT:
            raise ProjectionError(f"unsupported diagram format {self.format_id!r}")
        self.graph()  # body must parse

    def graph(self) -> PropertyGraph:
        return PropertyGraph.from_json(self.body)

    @classmethod
    def from_graph(cls, g: PropertyGraph) -> "DiagramSource":
        return cls(NETLIST_FORMAT, g.to_json())

    def dot(self) -> str:
        g = self.graph()
        lines = ["digraph circuit {", "  rankdir=LR;"]
        for c in g.components:
            extras = ", ".join(f"{k}={v}" for k, v in c.attrs)
            label = c.name + (f"\\n{extras}" if extras else "")
            lines.append(f'  "{c.name}" [label="{label}", shape={_SHAPES.get(c.ctype, "box")}];')
        for a, b in g.connections:
            lines.append(f'  "{a}" -> "{b}";')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"format": self.format_id, "body": self.body}


_SHAPES = {"power": "circle", "ground": "invtriangle", "switch": "diamond", "led": "doublecircle"}

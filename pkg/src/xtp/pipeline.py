"""Pipeline spec files (JSON) and input loading."""

from __future__ import annotations

import json
import mimetypes
from dataclasses import dataclass, field
from pathlib import Path

from xtp.typesys import Base, Opaque, Provenance, TagError, TextDoc, TypedValue, TypeTag

GATEWAY_MODES = ("live", "fixture", "record")


class SpecError(ValueError):
    pass


@dataclass
class NodeDecl:
    node_id: str
    op: str
    binding: str
    in_types: list[str]
    out_type: str
    params: dict = field(default_factory=dict)
    candidates: list[dict] = field(default_factory=list)
    kind: str | None = None
    intent: str | None = None


@dataclass
class EdgeDecl:
    src: str
    dst: str
    kind: str = "always"
    when: str | None = None
    threshold: float | None = None
    fail_to: str | None = None
    max_retries: int | None = None
    escalation: str | None = None


@dataclass
class PipelineSpec:
    name: str
    nodes: list[NodeDecl]
    edges: list[EdgeDecl]
    slo: dict
    gateway_mode: str = "fixture"
    gateway: dict = field(default_factory=dict)
    entries: list[str] = field(default_factory=list)
    input_tag: str | None = None
    base_dir: Path = Path(".")
    path: Path | None = None


def _tag_text(value, where: str) -> str:
    try:
        return str(TypeTag.parse(value))
    except (TagError, TypeError, AttributeError) as e:
        raise SpecError(f"{where}: {e}") from None


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SpecError(f"{where}: missing {key!r}")
    return obj[key]


def parse_spec(obj: dict, base_dir: Path | str = ".", path: Path | None = None) -> PipelineSpec:
    if not isinstance(obj, dict):
        raise SpecError("pipeline spec must be a JSON object")
    nodes = []
    for i, n in enumerate(_require(obj, "nodes", "spec")):
        where = f"nodes[{i}]"
        nid = _require(n, "id", where)
        where = f"node {nid}"
        raw_in = _require(n, "in", where)
        in_types = [_tag_text(t, where) for t in (raw_in if isinstance(raw_in, list) else [raw_in])]
        if not in_types:
            raise SpecError(f"{where}: 'in' must name at least one type")
        nodes.append(NodeDecl(
            nid, _require(n, "op", where), n.get("binding", "preprogrammed"), in_types,
            _tag_text(_require(n, "out", where), where), dict(n.get("params", {})),
            list(n.get("candidates", [])), n.get("kind"), n.get("intent")))
    edges = []
    for i, e in enumerate(obj.get("edges", [])):
        where = f"edges[{i}]"
        edges.append(EdgeDecl(
            _require(e, "from", where), _require(e, "to", where), e.get("kind", "always"),
            e.get("when"), e.get("threshold"), e.get("fail_to"), e.get("max_retries"),
            e.get("escalation")))
    slo = dict(obj.get("slo", {"accuracy": 0.0, "coverage": 1.0}))
    mode = obj.get("gateway_mode", "fixture")
    if mode not in GATEWAY_MODES:
        raise SpecError(f"gateway_mode must be one of {GATEWAY_MODES}")
    input_tag = obj.get("input")
    return PipelineSpec(
        name=obj.get("name", "pipeline"), nodes=nodes, edges=edges, slo=slo, gateway_mode=mode,
        gateway=dict(obj.get("gateway", {})), entries=list(obj.get("entries", [])),
        input_tag=_tag_text(input_tag, "input") if input_tag else None,
        base_dir=Path(base_dir), path=path)


def load_spec(path: str | Path) -> PipelineSpec:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise SpecError(f"no such spec file: {path}") from None
    except json.JSONDecodeError as e:
        raise SpecError(f"{path}: invalid JSON ({e})") from None
    return parse_spec(obj, path.parent, path)


def load_input(path: str | Path, tag: TypeTag) -> TypedValue:
    """Read an input file as the unstructured payload its tag calls for."""
    path = Path(path)
    text = path.read_bytes().decode("utf-8")
    source_id = path.name
    if tag.base == Base.IMAGE:
        media = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        payload = Opaque(source_id, media, text)
    elif tag.base in (Base.TEXT, Base.UNSTRUCTURED):
        payload = TextDoc(source_id, text)
    else:
        raise SpecError(f"inputs must be unstructured, not {tag}")
    return TypedValue(tag, payload, Provenance(frozenset({payload.whole()})))

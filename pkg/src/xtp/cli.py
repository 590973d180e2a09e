"""Command-line driver: plan, run, provenance, replay and fixture recording.

Exit codes: 0 ok, 1 error, 2 infeasible SLO, 3 guard violation, 4 retry budget exhausted.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

from xtp.flowgraph import (
    INPUT_NODE, BuildError, ExecutionError, GuardViolation, LedgerError, ProvenanceLedger,
    ReplayError, RetryExhausted, build, contributing_elements, dumps_value, execute, loads_value,
    replay,
)
from xtp.flowgraph.values import ValueFormatError
from xtp.modelgw import Gateway, GatewayConfig, GatewayError, requests_transport
from xtp.opcore import OperatorError
from xtp.opcore.circuit import CircuitError, PropertyGraph
from xtp.pipeline import SpecError, load_input, load_spec
from xtp.planner import (
    SLO, CostModel, InfeasibleSLO, PhysicalPlan, PlanError, coverage, datum_accuracy, observe,
    should_replan, synthesize,
)
from xtp.projection import DiagramSource, ProjectionError, Report
from xtp.typesys import Base, Span, TagError, TextDoc, TypedValue, TypeTag

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE, EXIT_GUARD, EXIT_RETRY = 0, 1, 2, 3, 4


class CliError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"xtp: {msg}", file=sys.stderr)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return path


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_") or "section"


# --------------------------------------------------------------------------
# shared setup

def _load(spec_path):
    spec = load_spec(spec_path)
    g = build(spec)
    slo = SLO.from_dict(spec.slo) if spec.slo.get("accuracy") else SLO(1e-9)
    return spec, g, slo


def _uses_models(g, assignment: dict) -> bool:
    return any(g.node(n).spec.candidate(i).tool == "model" for n, i in assignment.items())


def _gateway(spec, g, assignment: dict, mode: str, transport):
    if not _uses_models(g, assignment) and not any(
            c.tool == "model" for n in g.nodes.values() for c in n.spec.candidates):
        return None
    config = GatewayConfig.from_dict(spec.gateway, spec.base_dir)
    if mode in ("fixture", "record") and config.fixture_dir is None:
        raise CliError("spec gateway config has no fixture_dir")
    if mode == "fixture" and not config.fixture_dir.is_dir():
        raise CliError(f"fixture directory {config.fixture_dir} does not exist")
    if mode != "fixture" and transport is None:
        transport = requests_transport()
    return Gateway(config, mode, transport)


def _input_tag(spec, g) -> TypeTag:
    if spec.input_tag:
        return TypeTag.parse(spec.input_tag)
    return g.node(g.entries[0]).spec.in_types[0]


# --------------------------------------------------------------------------
# artifacts

def write_output(out: Path, node_id: str, value: TypedValue) -> list[Path]:
    p = value.payload
    written = []
    if isinstance(p, Report):
        from xtp.plotting import bar_chart
        written.append(_write(out / "report.json", _dump(p.to_dict())))
        written.append(_write(out / "report.txt", p.text()))
        for i, s in enumerate(p.sections):
            if s.kind == "chart_data":
                stem = out / "figures" / f"{i}_{_slug(s.title)}"
                written.append(_write(stem.with_suffix(".csv"), s.content))
                written.append(bar_chart(s.content, s.title, stem.with_suffix(".png")))
    elif isinstance(p, DiagramSource):
        written.append(_write(out / "diagram.json",
                              _dump({"format": p.format_id, "graph": json.loads(p.body)})))
        written.append(_write(out / "diagram.dot", p.dot()))
    else:
        written.append(_write(out / f"{node_id}.json", dumps_value(value)))
    return written


def write_run(out: Path, ledger: ProvenanceLedger, plan, meta: dict, outputs: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "trace.jsonl", ledger.to_jsonl())
    for vid, value in ledger.values.items():
        _write(out / "values" / f"{vid}.json", dumps_value(value))
    _write(out / "plan.json", _dump(plan.to_dict()))
    warnings = [dict(w, node=e.node_id, invocation=e.invocation_id)
                for e in ledger.events if e.outcome == "ok" for w in e.warnings]
    _write(out / "warnings.json", _dump(warnings))
    for e in ledger.events:
        if e.outcome == "ok" and e.output_ids and e.node_id != INPUT_NODE:
            sql = ledger.values[e.output_ids[0]].metadata.get("sql")
            if isinstance(sql, str):
                _write(out / "sql" / f"{e.node_id}.sql", sql if sql.endswith("\n") else sql + "\n")
    for node_id, value in outputs.items():
        write_output(out, node_id, value)
    _write(out / "run.json", _dump(meta))


def _classify(exc: BaseException) -> int:
    if isinstance(exc, RetryExhausted):
        return EXIT_RETRY
    if isinstance(exc, GuardViolation):
        return EXIT_GUARD
    return EXIT_ERROR


def _describe(exc: BaseException) -> str:
    if isinstance(exc, ExecutionError) and exc.node_id and exc.node_id not in str(exc):
        return f"node {exc.node_id}: {exc}"
    return str(exc)


def _execute_to(out: Path, g, run_fn, plan, meta: dict) -> tuple[int, ProvenanceLedger]:
    """Run ``run_fn(ledger)`` and write artifacts whatever the outcome."""
    ledger = ProvenanceLedger()
    outputs, code, error = {}, EXIT_OK, None
    try:
        result = run_fn(ledger)
        ledger = result.ledger
        outputs = result.outputs
        meta["retries"] = result.retries
    except (ExecutionError, GatewayError) as e:
        code, error = _classify(e), _describe(e)
        if isinstance(e, ExecutionError) and e.ledger is not None:
            ledger = e.ledger
        _err(error)
    meta.update(exit_code=code, error=error,
                outputs={n: v.value_id for n, v in outputs.items()},
                accuracy_proxy=round(datum_accuracy(ledger.events), 6),
                invocations=sum(1 for e in ledger.events
                                if e.node_id != INPUT_NODE and e.outcome != "fixed"))
    write_run(out, ledger, plan, meta, outputs)
    return code, ledger


# --------------------------------------------------------------------------
# commands

def cmd_plan(args, transport) -> int:
    spec, g, slo = _load(args.spec)
    try:
        plan = synthesize(g, slo)
    except InfeasibleSLO as e:
        _err(str(e))
        print(_dump({"infeasible": True, "target": slo.accuracy_target,
                     "best": e.best.to_dict()}), end="")
        return EXIT_INFEASIBLE
    text = _dump(plan.to_dict())
    if args.out:
        _write(Path(args.out), text)
    print(text, end="")
    return EXIT_OK


def cmd_run(args, transport, mode: str | None = None) -> int:
    spec, g, slo = _load(args.spec)
    mode = mode or args.gateway or spec.gateway_mode
    model = CostModel.for_graph(g)
    try:
        plan = synthesize(g, slo, model)
    except InfeasibleSLO as e:
        _err(str(e))
        return EXIT_INFEASIBLE
    gateway = _gateway(spec, g, plan.assignment, mode, transport)
    tag = _input_tag(spec, g)
    out_root = Path(args.out)
    inputs = [Path(p) for p in args.inputs]
    first_code, records, replans, accuracies = EXIT_OK, [], [], []
    for i, path in enumerate(inputs):
        out = out_root if len(inputs) == 1 else out_root / f"{i:03d}_{path.stem}"
        value = load_input(path, tag)
        meta = {"spec": str(Path(args.spec).resolve()), "input": str(path.resolve()),
                "seed": args.seed, "gateway": mode, "workers": args.workers,
                "assignment": dict(plan.assignment)}

        def run_fn(ledger, value=value, assignment=dict(plan.assignment)):
            return execute(g, value, assignment, gateway=gateway, seed=args.seed,
                           max_workers=args.workers, ledger=ledger)

        code, ledger = _execute_to(out, g, run_fn, plan, meta)
        first_code = first_code or code
        acc = meta["accuracy_proxy"] if code == EXIT_OK else 0.0
        accuracies.append(acc)
        records.append({"input": str(path), "dir": str(out), "exit_code": code, "accuracy_proxy": acc})
        # estimates feed later inputs only; a datum never switches plans mid-flight
        for e in ledger.events:
            observe(model, e)
        if i + 1 < len(inputs) and should_replan(model, plan, slo, g):
            try:
                new = synthesize(g, slo, model)
            except InfeasibleSLO as e:
                new = None
                _err(f"replanning after input {i}: {e}; keeping the current plan")
            if new is not None and new.assignment != plan.assignment:
                replans.append({"after_input": i, "assignment": new.assignment})
                plan = new
    cov = coverage(accuracies, slo)
    _write(out_root / "batch.json", _dump({
        "inputs": records, "coverage": round(cov, 6), "coverage_target": slo.coverage_fraction,
        "coverage_met": cov >= slo.coverage_fraction, "replans": replans}))
    if first_code == EXIT_OK:
        print(f"ok: {len(inputs)} input(s) -> {out_root}")
    return first_code


def _parse_entity(text: str) -> Span:
    m = re.fullmatch(r"(.+):(\d+):(\d+)", text)
    if not m:
        raise CliError(f"--entity expects source_id:start:end, got {text!r}")
    start, end = int(m.group(2)), int(m.group(3))
    if end < start:
        raise CliError(f"--entity {text!r}: end before start")
    return Span(m.group(1), start, end)


def _mention_spans(text: str) -> list[Span]:
    path, sep, needle = text.partition(":")
    if not sep or not needle:
        raise CliError(f"--mention expects FILE:TEXT, got {text!r}")
    doc = TextDoc(Path(path).name, Path(path).read_bytes().decode("utf-8"))
    spans, at = [], doc.text.find(needle)
    while at >= 0:
        spans.append(doc.byte_span(at, at + len(needle)))
        at = doc.text.find(needle, at + 1)
    return spans


def cmd_provenance(args, transport) -> int:
    path = Path(args.trace)
    try:
        ledger = ProvenanceLedger.from_jsonl(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"no such trace: {path}") from None
    except (LedgerError, TypeError, ValueError) as e:
        raise CliError(f"malformed trace {path}: {e}") from None
    spans = [_parse_entity(e) for e in args.entity or []]
    for m in args.mention or []:
        spans.extend(_mention_spans(m))
    if not spans:
        raise CliError("give at least one --entity or --mention")
    elements = contributing_elements(ledger.elements, spans)
    report = {"spans": [s.to_list() for s in spans], "contribution_bound": len(elements),
              "elements": elements}
    if args.json:
        print(_dump(report), end="")
    else:
        print(f"contribution_bound: {len(elements)}")
        print("elements: " + (", ".join(elements) if elements else "(none)"))
    return EXIT_OK


def _load_fix(path: Path, node, original: TypedValue | None) -> TypedValue:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"no such fix file: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"fix file {path} is not JSON: {e}") from None
    if isinstance(obj, dict) and "tag" in obj and "payload" in obj:
        return loads_value(json.dumps(obj))
    out_type = node.spec.out_type
    if out_type.base == Base.GRAPH:
        payload = PropertyGraph.from_dict(obj)
    elif out_type.base == Base.REPORT:
        payload = Report.from_dict(obj)
    else:
        raise CliError(f"fix for a {out_type} node must be an encoded value file")
    prov = original.provenance if original is not None else None
    return TypedValue(out_type, payload, prov) if prov is not None else TypedValue(out_type, payload)


def cmd_replay(args, transport) -> int:
    trace = Path(args.trace)
    run_dir = trace.parent
    try:
        meta = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"{run_dir} has no run.json next to the trace") from None
    values = {p.stem: loads_value(p.read_text(encoding="utf-8"))
              for p in sorted((run_dir / "values").glob("*.json"))}
    try:
        ledger = ProvenanceLedger.from_jsonl(trace.read_text(encoding="utf-8"), values)
    except (LedgerError, TypeError, ValueError) as e:
        raise CliError(f"malformed trace {trace}: {e}") from None
    spec, g, _ = _load(meta["spec"])
    if args.node not in g.nodes:
        raise CliError(f"unknown node {args.node!r}; nodes are {', '.join(g.order)}")
    done = [e for e in ledger.events if e.node_id == args.node and e.outcome in ("ok", "fixed")]
    original = ledger.values.get(done[-1].output_ids[0]) if done else None
    fix = _load_fix(Path(args.fix), g.node(args.node), original)
    assignment = dict(meta["assignment"])
    gateway = _gateway(spec, g, assignment, meta.get("gateway", "fixture"), transport)
    out = Path(args.out) if args.out else run_dir / f"replay_{args.node}"
    plan = PhysicalPlan.from_dict(json.loads((run_dir / "plan.json").read_text(encoding="utf-8")))
    new_meta = dict(meta, replay_of=str(trace.resolve()), replay_node=args.node,
                    fix=str(Path(args.fix).resolve()))

    def run_fn(_ledger):
        return replay(g, ledger, args.node, fix, assignment, gateway=gateway,
                      seed=int(meta.get("seed", 0)), max_workers=int(meta.get("workers", 4)))

    code, _ = _execute_to(out, g, run_fn, plan, new_meta)
    if code == EXIT_OK:
        print(f"ok: replayed from {args.node} -> {out}")
    return code


def cmd_fixtures(args, transport) -> int:
    return cmd_run(args, transport, mode="record")


# --------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xtp", description="Typed extract-transform-project pipelines.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="synthesize a physical plan without executing")
    p.add_argument("spec")
    p.add_argument("--out", help="also write the plan JSON here")
    p.set_defaults(fn=cmd_plan)

    def run_args(p, with_gateway=True):
        p.add_argument("spec")
        p.add_argument("inputs", nargs="+")
        p.add_argument("--out", required=True, help="artifact directory")
        if with_gateway:
            p.add_argument("--gateway", choices=("live", "fixture", "record"),
                           help="model gateway mode (default: the pipeline's gateway_mode)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=4)

    p = sub.add_parser("run", help="execute a pipeline over input files")
    run_args(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("provenance", help="contribution bound of source spans in a trace")
    p.add_argument("trace")
    p.add_argument("--entity", action="append", help="source_id:start:end (bytes, end exclusive)")
    p.add_argument("--mention", action="append", help="FILE:TEXT, every occurrence of TEXT in FILE")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_provenance)

    p = sub.add_parser("replay", help="substitute a node's output and re-run its descendants")
    p.add_argument("trace")
    p.add_argument("--node", required=True)
    p.add_argument("--fix", required=True, help="encoded value file, or a bare graph/report JSON")
    p.add_argument("--out", help="artifact directory (default: <run>/replay_<node>)")
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("fixtures", help="gateway fixture management")
    fsub = p.add_subparsers(dest="fixtures_command", required=True)
    r = fsub.add_parser("record", help="run with live model calls and store every response")
    run_args(r, with_gateway=False)
    r.set_defaults(fn=cmd_fixtures)
    return ap


def main(argv: list[str] | None = None, transport=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args, transport)
    except InfeasibleSLO as e:
        _err(str(e))
        return EXIT_INFEASIBLE
    except (CliError, SpecError, BuildError, PlanError, TagError, GatewayError, OperatorError,
            CircuitError, ProjectionError, ValueFormatError, ReplayError, LedgerError, OSError) as e:
        _err(str(e))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

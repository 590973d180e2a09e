"""Plan synthesis under SLOs, the online cost model, replanning and staged schedules."""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field

from xtp.flowgraph.graph import FlowGraph
from xtp.flowgraph.ledger import TraceEvent

EXHAUSTIVE_LIMIT = 4096
DEFAULT_ALPHA = 0.2
_EPS = 1e-12


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class SLO:
    accuracy_target: float
    coverage_fraction: float = 1.0
    token_budget: int | None = None
    latency_budget_ms: float | None = None

    def __post_init__(self):
        if not 0.0 < self.accuracy_target <= 1.0:
            raise PlanError(f"accuracy target {self.accuracy_target} outside (0, 1]")
        if not 0.0 < self.coverage_fraction <= 1.0:
            raise PlanError(f"coverage fraction {self.coverage_fraction} outside (0, 1]")

    @classmethod
    def from_dict(cls, obj: dict) -> "SLO":
        return cls(float(obj["accuracy"]), float(obj.get("coverage", 1.0)),
                   obj.get("token_budget"), obj.get("latency_budget_ms"))

    @classmethod
    def parse(cls, text: str) -> "SLO":
        """Read targets like ``"90%+ accuracy for 95% of the data"``."""
        m = re.search(r"(\d+(?:\.\d+)?)\s*%\+?\s*accuracy(?:\s+for\s+(\d+(?:\.\d+)?)\s*%)?", text, re.I)
        if not m:
            raise PlanError(f"cannot read an accuracy target from {text!r}")
        cov = float(m.group(2)) / 100.0 if m.group(2) else 1.0
        return cls(round(float(m.group(1)) / 100.0, 10), round(cov, 10))

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy_target, "coverage": self.coverage_fraction,
                "token_budget": self.token_budget, "latency_budget_ms": self.latency_budget_ms}


@dataclass(frozen=True)
class Estimate:
    tokens: float
    latency_ms: float
    accuracy: float


@dataclass
class PhysicalPlan:
    assignment: dict[str, str]
    stages: list[list[str]]
    est_tokens: float
    est_latency_ms: float
    est_accuracy: float
    feasible: bool = True

    def to_dict(self) -> dict:
        return {"assignment": dict(self.assignment), "stages": [list(s) for s in self.stages],
                "est": {"tokens": int(round(self.est_tokens)),
                        "latency_ms": round(self.est_latency_ms, 3),
                        "accuracy": round(self.est_accuracy, 6)}}

    @classmethod
    def from_dict(cls, obj: dict) -> "PhysicalPlan":
        est = obj.get("est", {})
        return cls(dict(obj["assignment"]), [list(s) for s in obj["stages"]],
                   est.get("tokens", 0), est.get("latency_ms", 0.0), est.get("accuracy", 1.0))


class InfeasibleSLO(PlanError):
    def __init__(self, best: PhysicalPlan, slo: SLO, reason: str):
        self.best = best
        self.best_accuracy = best.est_accuracy
        super().__init__(f"{reason}; best achievable accuracy {best.est_accuracy:.4f} "
                         f"(target {slo.accuracy_target})")


# --------------------------------------------------------------------------
# cost model

@dataclass
class CostModel:
    """Per (node, impl) EMA estimates; catalog values stand in until the first observation."""

    alpha: float = DEFAULT_ALPHA
    priors: dict[tuple[str, str], Estimate] = field(default_factory=dict)
    ema: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)
    counts: dict[tuple[str, str], int] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise PlanError("alpha must lie in (0, 1)")

    @classmethod
    def for_graph(cls, g: FlowGraph, alpha: float = DEFAULT_ALPHA) -> "CostModel":
        model = cls(alpha)
        for nid, node in g.nodes.items():
            for c in node.spec.candidates:
                model.priors[(nid, c.impl_id)] = Estimate(c.cost.tokens_est, c.cost.latency_ms_est,
                                                          c.cost.accuracy_est)
        return model

    def estimate(self, node_id: str, impl_id: str) -> Estimate:
        key = (node_id, impl_id)
        if key not in self.priors:
            raise PlanError(f"unknown candidate {impl_id} for node {node_id}")
        prior = self.priors[key]
        seen = self.ema.get(key, {})
        return Estimate(seen.get("tokens", prior.tokens), seen.get("latency_ms", prior.latency_ms),
                        seen.get("accuracy", prior.accuracy))

    def candidates(self, node_id: str) -> list[str]:
        return sorted(impl for (n, impl) in self.priors if n == node_id)

    def snapshot(self) -> "CostModel":
        return CostModel(self.alpha, dict(self.priors), {k: dict(v) for k, v in self.ema.items()},
                         dict(self.counts))


def ema_update(prev: float | None, obs: float, alpha: float) -> float:
    return obs if prev is None else (1.0 - alpha) * prev + alpha * obs


def observe(model: CostModel, event: TraceEvent, accuracy_proxy: float | None = None) -> CostModel:
    """Fold one invocation into the estimates; unknown (node, impl) pairs are ignored."""
    key = (event.node_id, event.impl_id)
    if key not in model.priors or event.outcome not in ("ok", "rerouted", "exhausted"):
        return model
    obs = {"tokens": float(event.tokens_in + event.tokens_out),
           "latency_ms": float(event.latency_ms)}
    acc = accuracy_proxy if accuracy_proxy is not None else event.confidence
    if acc is not None:
        obs["accuracy"] = min(1.0, max(_EPS, float(acc)))
    cur = model.ema.setdefault(key, {})
    for k, v in obs.items():
        cur[k] = ema_update(cur.get(k), v, model.alpha)
    model.counts[key] = model.counts.get(key, 0) + 1
    return model


# --------------------------------------------------------------------------
# scheduling

def schedule(g: FlowGraph, assignment: dict | None = None) -> list[list[str]]:
    """ASAP levels over forward edges: each node sits one stage after its deepest predecessor."""
    depth: dict[str, int] = {}
    for n in g.order:  # already topological; cycles were rejected at build time
        preds = [e.src for e in g.incoming(n)]
        depth[n] = 1 + max((depth[p] for p in preds), default=-1)
    stages: list[list[str]] = [[] for _ in range(max(depth.values(), default=-1) + 1)]
    for n in g.order:
        stages[depth[n]].append(n)
    return stages


def stage_latency(stages: list[list[str]], lat: dict[str, float]) -> float:
    return sum(max((lat[n] for n in stage), default=0.0) for stage in stages)


# --------------------------------------------------------------------------
# synthesis

@dataclass(frozen=True)
class Choice:
    node_id: str
    options: tuple[tuple[str, Estimate], ...]  # (impl_id, estimate), sorted by impl_id


def _evaluate(choices, picks, stages):
    tokens = sum(est.tokens for _, est in picks)
    acc = math.prod(est.accuracy for _, est in picks)
    lat = stage_latency(stages, {c.node_id: est.latency_ms for c, (_, est) in zip(choices, picks)})
    return tokens, lat, acc


def _feasible(tokens, lat, acc, slo: SLO) -> bool:
    if acc < slo.accuracy_target - _EPS:
        return False
    if slo.token_budget is not None and tokens > slo.token_budget:
        return False
    if slo.latency_budget_ms is not None and lat > slo.latency_budget_ms:
        return False
    return True


def search(choices: list[Choice], slo: SLO, stages: list[list[str]] | None = None) -> PhysicalPlan:
    """Cheapest assignment (tokens, then impl ids) meeting the SLO; raises InfeasibleSLO."""
    stages = stages if stages is not None else [[c.node_id] for c in choices]
    space = math.prod(len(c.options) for c in choices)
    if space <= EXHAUSTIVE_LIMIT:
        best = best_acc = None
        for picks in itertools.product(*(c.options for c in choices)):
            tokens, lat, acc = _evaluate(choices, picks, stages)
            ids = tuple(i for i, _ in picks)
            if _feasible(tokens, lat, acc, slo):
                key = (tokens, ids)
                if best is None or key < best[0]:
                    best = (key, picks, lat, acc)
            akey = (-acc, tokens, ids)
            if best_acc is None or akey < best_acc[0]:
                best_acc = (akey, picks, lat, acc)
        if best is not None:
            return _plan(choices, best[1], stages, True)
        raise InfeasibleSLO(_plan(choices, best_acc[1], stages, False), slo, "no assignment meets the SLO")
    return _greedy(choices, slo, stages)


def _greedy(choices: list[Choice], slo: SLO, stages) -> PhysicalPlan:
    """Start from the cheapest option per node; repeatedly take the upgrade with the best
    log-accuracy gain per extra token until the SLO holds."""
    picks = [min(c.options, key=lambda o: (o[1].tokens, o[0])) for c in choices]
    while True:
        tokens, lat, acc = _evaluate(choices, picks, stages)
        if _feasible(tokens, lat, acc, slo):
            return _plan(choices, picks, stages, True)
        best = None
        for i, c in enumerate(choices):
            cur = picks[i][1]
            for impl, est in c.options:
                if est.accuracy <= cur.accuracy:
                    continue
                gain = math.log(est.accuracy) - math.log(cur.accuracy)
                extra = est.tokens - cur.tokens
                rate = math.inf if extra <= 0 else gain / extra
                key = (-rate, extra, c.node_id, impl)
                if best is None or key < best[0]:
                    best = (key, i, (impl, est))
        if best is None:
            top = [max(c.options, key=lambda o: (o[1].accuracy, -o[1].tokens)) for c in choices]
            raise InfeasibleSLO(_plan(choices, top, stages, False), slo,
                                "greedy search found no assignment meeting the SLO")
        picks[best[1]] = best[2]


def _plan(choices, picks, stages, feasible) -> PhysicalPlan:
    tokens, lat, acc = _evaluate(choices, picks, stages)
    return PhysicalPlan({c.node_id: impl for c, (impl, _) in zip(choices, picks)},
                        [list(s) for s in stages], tokens, lat, acc, feasible)


def graph_choices(g: FlowGraph, model: CostModel) -> list[Choice]:
    out = []
    for nid in g.order:
        node = g.node(nid)
        opts = sorted(((c.impl_id, model.estimate(nid, c.impl_id)) for c in node.spec.candidates),
                      key=lambda o: o[0])
        out.append(Choice(nid, tuple(opts)))
    return out


def synthesize(g: FlowGraph, slo: SLO, model: CostModel | None = None) -> PhysicalPlan:
    model = model or CostModel.for_graph(g)
    return search(graph_choices(g, model), slo, schedule(g))


def evaluate_plan(g: FlowGraph, assignment: dict, model: CostModel) -> tuple[float, float, float]:
    choices = graph_choices(g, model)
    picks = [(assignment[c.node_id], model.estimate(c.node_id, assignment[c.node_id])) for c in choices]
    return _evaluate(choices, picks, schedule(g))


def should_replan(model: CostModel, plan: PhysicalPlan, slo: SLO, g: FlowGraph | None = None) -> bool:
    """True when the plan no longer meets the SLO under the current estimates."""
    picks = [model.estimate(n, impl) for n, impl in sorted(plan.assignment.items())]
    acc = math.prod(p.accuracy for p in picks)
    tokens = sum(p.tokens for p in picks)
    if acc < slo.accuracy_target - _EPS:
        return True
    if slo.token_budget is not None and tokens > slo.token_budget:
        return True
    if slo.latency_budget_ms is not None and g is not None:
        _, lat, _ = evaluate_plan(g, plan.assignment, model)
        if lat > slo.latency_budget_ms:
            return True
    return False


def datum_accuracy(events) -> float:
    """Accuracy proxy for one datum: product of the confidences of its committed invocations."""
    return math.prod(e.confidence for e in events if e.outcome == "ok" and e.confidence is not None
                     and e.impl_id not in ("load", "fix"))


def coverage(accuracies: list[float], slo: SLO) -> float:
    if not accuracies:
        return 0.0
    return sum(a >= slo.accuracy_target - _EPS for a in accuracies) / len(accuracies)

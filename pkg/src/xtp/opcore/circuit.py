"""Circuit property graphs: JSON netlist I/O, LED current rule checking, redundancy insertion."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

ATTR_KEYS = ("voltage", "resistance_ohm", "forward_voltage")


class CircuitError(ValueError):
    pass


@dataclass(frozen=True)
class Component:
    id: int
    ctype: str
    label: str | None = None
    attrs: tuple[tuple[str, object], ...] = ()

    @property
    def name(self) -> str:
        """Connection endpoint name: the label, or the type when unlabeled."""
        return self.label if self.label is not None else self.ctype

    def attr(self, key: str, default=None):
        return dict(self.attrs).get(key, default)

    def to_json(self) -> dict:
        out = {"id": self.id, "type": self.ctype}
        if self.label is not None:
            out["label"] = self.label
        out.update(self.attrs)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Component":
        try:
            cid, ctype = obj["id"], obj["type"]
        except KeyError as e:
            raise CircuitError(f"component missing {e.args[0]!r}") from None
        attrs = tuple((k, v) for k, v in obj.items() if k not in ("id", "type", "label"))
        return cls(int(cid), str(ctype), obj.get("label"), attrs)


@dataclass(frozen=True)
class PropertyGraph:
    components: tuple[Component, ...]
    connections: tuple[tuple[str, str], ...]

    def __post_init__(self):
        ids = [c.id for c in self.components]
        if len(set(ids)) != len(ids):
            raise CircuitError("component ids must be unique")
        names = [c.name for c in self.components]
        if len(set(names)) != len(names):
            raise CircuitError("component labels must be unique")
        known = set(names)
        for a, b in self.connections:
            if a not in known or b not in known:
                raise CircuitError(f"connection {a}->{b} names an unknown component")

    def by_name(self, name: str) -> Component:
        for c in self.components:
            if c.name == name:
                return c
        raise CircuitError(f"no component named {name}")

    def of_type(self, ctype: str) -> list[Component]:
        return [c for c in self.components if c.ctype == ctype]

    def successors(self, name: str) -> list[str]:
        return [b for a, b in self.connections if a == name]

    def to_dict(self) -> dict:
        return {
            "components": [c.to_json() for c in self.components],
            "connections": [{"from": a, "to": b} for a, b in self.connections],
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, obj: dict) -> "PropertyGraph":
        if "components" not in obj or "connections" not in obj:
            raise CircuitError("graph needs 'components' and 'connections'")
        comps = tuple(Component.from_json(c) for c in obj["components"])
        conns = tuple((str(c["from"]), str(c["to"])) for c in obj["connections"])
        return cls(comps, conns)

    @classmethod
    def from_json(cls, text: str) -> "PropertyGraph":
        return cls.from_dict(json.loads(text))

    def with_attr(self, name: str, key: str, value) -> "PropertyGraph":
        comps = []
        for c in self.components:
            if c.name == name:
                attrs = dict(c.attrs)
                attrs[key] = value
                c = replace(c, attrs=tuple(attrs.items()))
            comps.append(c)
        return replace(self, components=tuple(comps))


def check_circuit(g: PropertyGraph) -> tuple[Component, Component]:
    powers, grounds = g.of_type("power"), g.of_type("ground")
    if len(powers) != 1:
        raise CircuitError(f"expected exactly one power component, found {len(powers)}")
    if len(grounds) != 1:
        raise CircuitError(f"expected exactly one ground component, found {len(grounds)}")
    return powers[0], grounds[0]


def series_paths(g: PropertyGraph, start: str, goal: str) -> list[list[str]]:
    """All simple directed paths start -> goal, in connection order."""
    paths = []

    def walk(node, path):
        if node == goal:
            paths.append(path)
            return
        for nxt in g.successors(node):
            if nxt not in path:
                walk(nxt, path + [nxt])

    walk(start, [start])
    return paths


@dataclass(frozen=True)
class ValidationRule:
    rule_id: str = "led_current"
    v_source_key: str = "voltage"
    v_forward_key: str = "forward_voltage"
    resistance_key: str = "resistance_ohm"
    i_max_mA: float = 20.0

    def __post_init__(self):
        if not self.i_max_mA > 0:
            raise CircuitError("i_max_mA must be positive")

    @classmethod
    def from_dict(cls, obj: dict) -> "ValidationRule":
        return cls(**obj)


@dataclass(frozen=True)
class CircuitWarning:
    rule_id: str
    component_id: int
    message: str
    computed_mA: float

    def to_dict(self) -> dict:
        return {"rule_id": self.rule_id, "component_id": self.component_id,
                "message": self.message, "computed_mA": self.computed_mA}


def led_current_mA(v_source: float, v_forward: float, r_total: float) -> float:
    return (v_source - v_forward) / r_total * 1000.0


def validate_circuit(g: PropertyGraph, rules=(ValidationRule(),)) -> list[CircuitWarning]:
    power, ground = check_circuit(g)
    paths = series_paths(g, power.name, ground.name)
    for led in g.of_type("led"):
        if not any(led.name in p for p in paths):
            raise CircuitError(f"LED {led.name} is not on any power-to-ground path")
    warnings = []
    for path in paths:
        comps = [g.by_name(n) for n in path]
        resistors = [c for c in comps if c.ctype == "resistor"]
        leds = [c for c in comps if c.ctype == "led"]
        if not resistors:
            raise CircuitError(f"series path {'->'.join(path)} has no resistor")
        if len(leds) > 1:
            raise CircuitError(f"series path {'->'.join(path)} has more than one LED")
        if not leds:
            continue
        led = leds[0]
        for rule in rules:
            v_src = power.attr(rule.v_source_key)
            v_fwd = led.attr(rule.v_forward_key)
            r_vals = [r.attr(rule.resistance_key) for r in resistors]
            if v_src is None or v_fwd is None or any(r is None for r in r_vals):
                raise CircuitError(f"missing electrical attributes on path {'->'.join(path)}")
            r_total = float(sum(r_vals))
            if r_total <= 0:
                raise CircuitError("total resistance must be positive")
            current = led_current_mA(float(v_src), float(v_fwd), r_total)
            if current > rule.i_max_mA:
                warnings.append(CircuitWarning(
                    rule.rule_id, led.id,
                    f"{current:.1f} mA through {led.name} exceeds {rule.i_max_mA:g} mA: "
                    f"too high for standard LED",
                    current))
    return warnings


def _free_suffix(g: PropertyGraph, names: list[str]) -> int:
    used = {c.name for c in g.components}
    n = 2
    while any(f"{name}{n}" in used for name in names):
        n += 1
    return n


def _redundant_branch(g: PropertyGraph) -> tuple[list[tuple[Component, Component]], tuple]:
    switches = g.of_type("switch")
    if not switches:
        raise CircuitError("add_redundancy needs a switch component")
    _, ground = check_circuit(g)
    switch = switches[0]
    paths = series_paths(g, switch.name, ground.name)
    if not paths or len(paths[0]) < 3:
        raise CircuitError(f"no series branch between {switch.name} and {ground.name}")
    branch = [g.by_name(n) for n in paths[0][1:-1]]
    suffix = _free_suffix(g, [c.name for c in branch])
    next_id = max(c.id for c in g.components) + 1
    pairs = [(c, Component(next_id + i, c.ctype, f"{c.name}{suffix}", c.attrs))
             for i, c in enumerate(branch)]
    chain = [switch.name] + [d.name for _, d in pairs] + [ground.name]
    return pairs, tuple(zip(chain, chain[1:]))


def add_redundancy(g: PropertyGraph) -> PropertyGraph:
    """Duplicate the first switch-to-ground branch as a parallel branch.

    Copies get fresh ids and labels suffixed with the smallest free integer (``2`` first).
    """
    pairs, new_conns = _redundant_branch(g)
    return PropertyGraph(g.components + tuple(d for _, d in pairs), g.connections + new_conns)


def redundancy_lineage(g: PropertyGraph) -> dict[str, str]:
    """Name of each component add_redundancy would create -> the component it copies."""
    pairs, _ = _redundant_branch(g)
    return {d.name: c.name for c, d in pairs}

"""System configurations: typed graphs of components, terminals and domains.

A container holds domains, components (with terminals), connection points
joining terminals of one domain, and constraints over component attributes.
Its ``sc_type`` says whether it is generic (type level) or specific
(instance level).  Everything here is immutable and the operations are pure.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from cosim import expr
from cosim.errors import (
    ArityMismatch,
    CosimError,
    ExpressionError,
    MissingBinding,
    UnknownComponent,
)

SC_TYPES = ("UC-GSC", "TC-GSC", "TS-SC", "E-SC", "RI-SC", "RI-GSC")
GENERIC_TYPES = frozenset({"UC-GSC", "TC-GSC", "RI-GSC"})
DIRECTIONS = ("in", "out", "bidirectional", "undirected")

ERROR, WARNING = "ERROR", "WARNING"


@dataclass(frozen=True)
class Domain:
    name: str
    parent: str | None = None


@dataclass(frozen=True)
class Signal:
    """A data-flow variable carried by a terminal (used when compiling experiments)."""

    var: str
    dir: str
    quantity: str
    mode: str | None = None
    initial: Any = None


@dataclass(frozen=True)
class Terminal:
    id: str
    domain: str
    direction: str = "undirected"
    owner: str = ""
    signals: tuple[Signal, ...] = ()


@dataclass(frozen=True)
class Component:
    id: str
    type_label: str
    terminals: tuple[Terminal, ...] = ()
    attributes: Mapping[str, Any] = field(default_factory=dict)
    subsystem: "SystemConfigurationContainer | None" = None
    port_map: Mapping[str, str] = field(default_factory=dict)
    instance_of: str | None = None
    provides: tuple[str, ...] = ()


@dataclass(frozen=True)
class ConnectionPoint:
    id: str
    domain: str
    terminals: tuple[str, ...]


@dataclass(frozen=True)
class Constraint:
    target: str
    expression: str
    id: str | None = None


@dataclass(frozen=True)
class SystemConfigurationContainer:
    sc_type: str
    domains: tuple[Domain, ...] = ()
    components: tuple[Component, ...] = ()
    connection_points: tuple[ConnectionPoint, ...] = ()
    constraints: tuple[Constraint, ...] = ()
    id: str | None = None
    name: str | None = None

    def __post_init__(self):
        if self.sc_type not in SC_TYPES:
            raise CosimError(f"unknown sc_type {self.sc_type!r}")

    @property
    def generic(self) -> bool:
        return self.sc_type in GENERIC_TYPES

    @property
    def specific(self) -> bool:
        return not self.generic

    def component(self, cid: str) -> Component:
        for c in self.components:
            if c.id == cid:
                return c
        raise UnknownComponent(cid)

    @property
    def component_ids(self) -> list[str]:
        return [c.id for c in self.components]

    @property
    def terminals(self) -> dict[str, Terminal]:
        return {t.id: t for c in self.components for t in c.terminals}

    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]


# -- (de)serialization ------------------------------------------------------------

def container_from_dict(doc: Mapping) -> SystemConfigurationContainer:
    from cosim.schema import check

    check(doc, "sc_container")
    return _build(doc)


def _build(doc: Mapping) -> SystemConfigurationContainer:
    components = []
    for c in doc["components"]:
        terminals = tuple(
            Terminal(
                id=t["id"],
                domain=t["domain"],
                direction=t.get("direction", "undirected"),
                owner=c["id"],
                signals=tuple(Signal(**s) for s in t.get("signals", ())),
            )
            for t in c.get("terminals", ())
        )
        components.append(
            Component(
                id=c["id"],
                type_label=c["type_label"],
                terminals=terminals,
                attributes=dict(c.get("attributes", {})),
                subsystem=_build(c["subsystem"]) if c.get("subsystem") else None,
                port_map=dict(c.get("port_map", {})),
                instance_of=c.get("instance_of"),
                provides=tuple(c.get("provides", ())),
            )
        )
    return SystemConfigurationContainer(
        sc_type=doc["sc_type"],
        domains=tuple(Domain(d["name"], d.get("parent")) for d in doc["domains"]),
        components=tuple(components),
        connection_points=tuple(
            ConnectionPoint(p["id"], p["domain"], tuple(p["terminals"])) for p in doc["connection_points"]
        ),
        constraints=tuple(
            Constraint(k["target"], k["expression"], k.get("id")) for k in doc["constraints"]
        ),
        id=doc.get("id"),
        name=doc.get("name"),
    )


def container_to_dict(sc: SystemConfigurationContainer) -> dict:
    out: dict[str, Any] = {}
    if sc.id is not None:
        out["id"] = sc.id
    if sc.name is not None:
        out["name"] = sc.name
    out["sc_type"] = sc.sc_type
    out["domains"] = [
        {"name": d.name, **({"parent": d.parent} if d.parent is not None else {})} for d in sc.domains
    ]
    comps = []
    for c in sc.components:
        row: dict[str, Any] = {"id": c.id, "type_label": c.type_label}
        if c.instance_of is not None:
            row["instance_of"] = c.instance_of
        if c.provides:
            row["provides"] = list(c.provides)
        row["terminals"] = [_terminal_to_dict(t) for t in c.terminals]
        row["attributes"] = dict(c.attributes)
        if c.subsystem is not None:
            row["subsystem"] = container_to_dict(c.subsystem)
        if c.port_map:
            row["port_map"] = dict(c.port_map)
        comps.append(row)
    out["components"] = comps
    out["connection_points"] = [
        {"id": p.id, "domain": p.domain, "terminals": list(p.terminals)} for p in sc.connection_points
    ]
    out["constraints"] = [
        {**({"id": k.id} if k.id is not None else {}), "target": k.target, "expression": k.expression}
        for k in sc.constraints
    ]
    return out


def _terminal_to_dict(t: Terminal) -> dict:
    row: dict[str, Any] = {"id": t.id, "direction": t.direction, "domain": t.domain}
    if t.signals:
        row["signals"] = []
        for s in t.signals:
            sig = {"var": s.var, "dir": s.dir, "quantity": s.quantity}
            if s.mode is not None:
                sig["mode"] = s.mode
            if s.initial is not None:
                sig["initial"] = s.initial
            row["signals"].append(sig)
    return row


# -- validation ----------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Diagnostic:
    object_id: str
    code: str
    message: str
    severity: str = ERROR

    def __str__(self) -> str:
        return f"{self.severity} {self.object_id}: {self.message}"


class ValidationReport(tuple):
    """Ordered, immutable list of diagnostics (sorted by object id)."""

    def __new__(cls, diagnostics: Iterable[Diagnostic] = ()):
        return super().__new__(cls, sorted(set(diagnostics)))

    @property
    def ok(self) -> bool:
        return not any(d.severity == ERROR for d in self)

    @property
    def codes(self) -> list[str]:
        return [d.code for d in self]

    def lines(self) -> list[str]:
        return [str(d) for d in self]


def validate(container: SystemConfigurationContainer) -> ValidationReport:
    return ValidationReport(_diagnose(container, prefix=""))


def _diagnose(sc: SystemConfigurationContainer, prefix: str) -> list[Diagnostic]:
    out: list[Diagnostic] = []

    def err(obj: str, code: str, msg: str) -> None:
        out.append(Diagnostic(prefix + obj, code, msg))

    # uniqueness across all object ids in this container
    seen: dict[str, str] = {}
    for kind, ident in (
        [("domain", d.name) for d in sc.domains]
        + [("component", c.id) for c in sc.components]
        + [("terminal", t.id) for c in sc.components for t in c.terminals]
        + [("connection point", p.id) for p in sc.connection_points]
    ):
        if ident in seen:
            err(ident, "SC-DUP", f"{kind} id duplicates an existing {seen[ident]}")
        else:
            seen[ident] = kind

    domains = {d.name: d for d in sc.domains}
    for d in sc.domains:
        if d.parent is not None and d.parent not in domains:
            err(d.name, "SC-DOMAIN-PARENT", f"parent domain {d.parent!r} does not exist")
    for d in sc.domains:
        chain, cur = {d.name}, d.parent
        while cur is not None and cur in domains:
            if cur in chain:
                err(d.name, "SC-DOMAIN-CYCLE", "domain hierarchy contains a cycle")
                break
            chain.add(cur)
            cur = domains[cur].parent

    terminals = sc.terminals
    for c in sc.components:
        for t in c.terminals:
            if t.domain not in domains:
                err(t.id, "SC-TERM-DOMAIN", f"terminal references unknown domain {t.domain!r}")
            if t.direction not in DIRECTIONS:
                err(t.id, "SC-TERM-DIRECTION", f"unknown direction {t.direction!r}")
        if sc.specific and not c.instance_of:
            err(c.id, "SC-INSTANCE", f"component in a {sc.sc_type} must name the generic type it instantiates")
        if c.subsystem is not None:
            out.extend(_diagnose_composite(c, prefix))

    for p in sc.connection_points:
        if p.domain not in domains:
            err(p.id, "SC-CP-DOMAIN", f"connection point references unknown domain {p.domain!r}")
        if len(p.terminals) < 2:
            err(p.id, "SC-CP-ARITY", "connection point must join at least two terminals")
        if len(set(p.terminals)) != len(p.terminals):
            err(p.id, "SC-CP-ARITY", "connection point lists a terminal twice")
        for tid in p.terminals:
            t = terminals.get(tid)
            if t is None:
                err(p.id, "SC-CP-TERMINAL", f"unknown terminal {tid!r}")
            elif t.domain != p.domain:
                err(p.id, "SC-CP-MISMATCH", f"terminal {tid!r} is in domain {t.domain!r}, not {p.domain!r}")

    components = {c.id: c for c in sc.components}
    objects = set(seen)
    for i, k in enumerate(sc.constraints):
        cid = k.id or f"constraint[{i}]"
        if k.target not in objects:
            err(cid, "SC-CON-TARGET", f"constraint target {k.target!r} does not exist")
            continue
        try:
            node = expr.parse(k.expression)
        except ExpressionError as exc:
            err(cid, "SC-CON-SYNTAX", str(exc))
            continue
        attrs = components[k.target].attributes if k.target in components else {}
        missing = sorted({o.name for o in expr.operands(node)} - set(attrs))
        if missing:
            err(cid, "SC-CON-ATTR", f"expression references attributes {missing} absent on {k.target!r}")
            continue
        if sc.specific and all(attrs[o.name] is not None for o in expr.operands(node)):
            try:
                holds = expr.evaluate(node, lambda o: attrs[o.name])
            except ExpressionError as exc:
                err(cid, "SC-CON-SYNTAX", str(exc))
                continue
            if not holds:
                err(cid, "SC-CON-VIOLATED", f"constraint {k.expression!r} does not hold on {k.target!r}")
    return out


def _diagnose_composite(c: Component, prefix: str) -> list[Diagnostic]:
    sub = c.subsystem
    inner_prefix = f"{prefix}{c.id}/"
    out = _diagnose(sub, inner_prefix)
    inner = sub.terminals
    connected = {tid for p in sub.connection_points for tid in p.terminals}
    used: dict[str, str] = {}
    for t in c.terminals:
        target = c.port_map.get(t.id)
        if target is None:
            out.append(Diagnostic(prefix + t.id, "SC-PORT", "external terminal is not mapped into the subsystem"))
            continue
        if target not in inner:
            out.append(Diagnostic(prefix + t.id, "SC-PORT", f"mapped to unknown internal terminal {target!r}"))
        elif target in connected:
            out.append(Diagnostic(prefix + t.id, "SC-PORT", f"internal terminal {target!r} is already connected"))
        elif inner[target].domain != t.domain:
            out.append(Diagnostic(prefix + t.id, "SC-PORT", f"internal terminal {target!r} is in another domain"))
        if target in used:
            out.append(Diagnostic(prefix + t.id, "SC-PORT", f"internal terminal {target!r} also mapped from {used[target]!r}"))
        used[target] = t.id
    for ext in sorted(set(c.port_map) - {t.id for t in c.terminals}):
        out.append(Diagnostic(prefix + c.id, "SC-PORT", f"port map names unknown external terminal {ext!r}"))
    return out


# -- instantiation ---------------------------------------------------------------------

def instantiate(
    generic: SystemConfigurationContainer,
    bindings: Mapping[str, Mapping[str, Any] | Sequence[Mapping[str, Any]]],
) -> SystemConfigurationContainer:
    """Turn a TC-GSC into a TS-SC by populating attributes per type label.

    A binding is either one attribute dict applied to every component of that
    type, or a list with one dict per component (in component id order).
    """
    if generic.sc_type != "TC-GSC":
        raise CosimError(f"instantiate expects a TC-GSC, got {generic.sc_type}")
    slots: dict[str, list[Component]] = {}
    for c in sorted(generic.components, key=lambda c: c.id):
        slots.setdefault(c.type_label, []).append(c)
    extra = sorted(set(bindings) - set(slots))
    if extra:
        raise ArityMismatch(f"bindings given for types without components: {extra}")

    concrete: dict[str, Component] = {}
    for label, comps in slots.items():
        if label not in bindings:
            raise MissingBinding(label)
        b = bindings[label]
        if isinstance(b, Mapping):
            per_slot = [b] * len(comps)
        else:
            per_slot = list(b)
            if len(per_slot) < len(comps):
                raise MissingBinding(label, f"{len(comps)} components but {len(per_slot)} bindings")
            if len(per_slot) > len(comps):
                raise ArityMismatch(f"{label!r}: {len(per_slot)} bindings for {len(comps)} components")
        for comp, values in zip(comps, per_slot):
            attrs = {**comp.attributes, **values}
            unset = sorted(k for k, v in attrs.items() if v is None)
            if unset:
                raise MissingBinding(label, f"{comp.id}: attributes {unset} left unset")
            concrete[comp.id] = replace(comp, attributes=attrs, instance_of=comp.type_label)

    return replace(
        generic,
        sc_type="TS-SC",
        components=tuple(concrete[c.id] for c in generic.components),
    )


def instantiation_diagnostics(
    generic: SystemConfigurationContainer, specific: SystemConfigurationContainer
) -> list[Diagnostic]:
    """Check that ``specific`` has the component/terminal/connection shape of ``generic``."""
    out = []
    gcomps = {c.id: c for c in generic.components}
    scomps = {c.id: c for c in specific.components}
    for cid in sorted(set(gcomps) | set(scomps)):
        g, s = gcomps.get(cid), scomps.get(cid)
        if g is None:
            out.append(Diagnostic(cid, "TS-LINEAGE", "component has no counterpart in the generic configuration"))
        elif s is None:
            out.append(Diagnostic(cid, "TS-LINEAGE", "generic component is not instantiated"))
        else:
            if s.instance_of != g.type_label:
                out.append(Diagnostic(cid, "TS-LINEAGE", f"instance_of {s.instance_of!r} != generic type {g.type_label!r}"))
            if {(t.id, t.domain) for t in g.terminals} != {(t.id, t.domain) for t in s.terminals}:
                out.append(Diagnostic(cid, "TS-LINEAGE", "terminals differ from the generic component"))
    gcp = {p.id: (p.domain, frozenset(p.terminals)) for p in generic.connection_points}
    scp = {p.id: (p.domain, frozenset(p.terminals)) for p in specific.connection_points}
    for pid in sorted(set(gcp) | set(scp)):
        if gcp.get(pid) != scp.get(pid):
            out.append(Diagnostic(pid, "TS-LINEAGE", "connection point differs from the generic configuration"))
    return out


# -- subsystem extraction ----------------------------------------------------------------

@dataclass(frozen=True)
class Extraction:
    container: SystemConfigurationContainer
    boundary: tuple[str, ...]
    cut: tuple[str, ...]  # ids of connection points crossing the boundary


def extract_subsystem(sc: SystemConfigurationContainer, component_ids: Iterable[str]) -> Extraction:
    """Cut out the named components with the connections among them.

    The boundary lists the extracted-side terminals of every connection point
    that also touches a component outside the set.
    """
    ids = set(component_ids)
    known = set(sc.component_ids)
    for cid in sorted(ids - known):
        raise UnknownComponent(cid)
    owner = {t.id: t.owner for c in sc.components for t in c.terminals}
    inside, boundary, cut = [], set(), []
    for p in sc.connection_points:
        owners = {owner.get(t) for t in p.terminals}
        if owners <= ids:
            inside.append(p)
        elif owners & ids:
            cut.append(p.id)
            boundary.update(t for t in p.terminals if owner.get(t) in ids)
    keep_objects = ids | {t.id for c in sc.components if c.id in ids for t in c.terminals} | {p.id for p in inside}
    sub = replace(
        sc,
        components=tuple(c for c in sc.components if c.id in ids),
        connection_points=tuple(inside),
        constraints=tuple(k for k in sc.constraints if k.target in keep_objects),
    )
    return Extraction(sub, tuple(sorted(boundary)), tuple(sorted(cut)))


# -- research infrastructure mapping --------------------------------------------------------

@dataclass(frozen=True)
class MappingResult:
    assignments: Mapping[str, str]
    core: tuple[str, ...] = ()

    @property
    def feasible(self) -> bool:
        return not self.core

    def to_dict(self) -> dict:
        return {"assignments": dict(sorted(self.assignments.items())), "core": list(self.core)}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "MappingResult":
        return cls(dict(doc["assignments"]), tuple(doc["core"]))


def capacity(c: Component) -> int:
    cap = c.attributes.get("capacity", 1)
    if not isinstance(cap, int) or isinstance(cap, bool) or cap < 0:
        raise CosimError(f"RI component {c.id!r}: capacity must be a non-negative integer")
    return cap


def can_host(resource: Component, component: Component) -> bool:
    return component.type_label == resource.type_label or component.type_label in resource.provides


def map_to_ri(
    test_system: SystemConfigurationContainer,
    ri: SystemConfigurationContainer,
    priority: Iterable[str] = (),
) -> MappingResult:
    """Assign each test-system component to an RI component with spare capacity.

    Components listed in ``priority`` are matched first, the rest in id order.
    Matching uses augmenting paths, so earlier components are never dropped
    in favour of later ones; the unmatched remainder is the reported core.
    """
    if test_system.sc_type != "TS-SC":
        raise CosimError(f"map_to_ri expects a TS-SC, got {test_system.sc_type}")
    if ri.sc_type != "RI-SC":
        raise CosimError(f"map_to_ri expects an RI-SC, got {ri.sc_type}")
    first = [cid for cid in priority if cid in set(test_system.component_ids)]
    order = first + sorted(set(test_system.component_ids) - set(first))
    comps = {c.id: c for c in test_system.components}
    slots = [(r.id, k) for r in sorted(ri.components, key=lambda r: r.id) for k in range(capacity(r))]
    resources = {r.id: r for r in ri.components}
    options = {
        cid: [i for i, (rid, _) in enumerate(slots) if can_host(resources[rid], comps[cid])] for cid in order
    }
    holder: dict[int, str] = {}

    def augment(cid: str, visited: set[int]) -> bool:
        for s in options[cid]:
            if s in visited:
                continue
            visited.add(s)
            if s not in holder or augment(holder[s], visited):
                holder[s] = cid
                return True
        return False

    core = [cid for cid in order if not augment(cid, set())]
    assignments = {cid: slots[s][0] for s, cid in holder.items()}
    return MappingResult(dict(sorted(assignments.items())), tuple(core))

"""Holistic test description documents, their validation and the test workflow.

A *test case* names the generic system configuration (TC-GSC), the system
and objects under test, the functions under test and the criteria.  A *test
specification* binds it to a concrete test system (TS-SC), declares the
varied inputs and observed outputs and lists the test design as template
steps.  ``compile_experiment`` maps the test system onto a research
infrastructure and produces an executable experiment: a scenario plan for the
master plus the assessment settings.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping

from cosim import expr, models
from cosim.errors import (
    CosimError,
    DanglingReference,
    ExpressionError,
    IllegalTransition,
    InfeasibleMapping,
    InvalidSpecification,
    InvariantViolation,
    SchemaError,
)
from cosim.federate import Causality, DataType
from cosim.schema import check
from cosim.sysconfig import (
    Component,
    Diagnostic,
    MappingResult,
    SystemConfigurationContainer,
    ValidationReport,
    container_from_dict,
    container_to_dict,
    extract_subsystem,
    instantiation_diagnostics,
    map_to_ri,
    validate,
)

OBJECTIVE_KINDS = ("validation", "verification", "characterization")
STEP_OPS = ("set_parameter", "apply_event", "wait_until", "assess", "sweep")
# criteria evaluated by dedicated assessors, with their argument count
BUILTIN_METRICS = {"frt_envelope": 2, "qv_tracking": 3}
RESERVED_SYMBOLS = ("t0",)
DEFAULT_STEP = 0.01
EQUIVALENTS_ID = "equivalents"

_CALL = re.compile(r"^\s*([A-Za-z_]\w*)\s*\(\s*([^()]*)\)\s*$")
_SYMBOL = re.compile(r"\$([A-Za-z_][A-Za-z0-9_]*)")


# -- documents -------------------------------------------------------------------------

@dataclass(frozen=True)
class UseCase:
    id: str
    name: str
    functions: tuple[tuple[str, str], ...] = ()  # (function id, description)

    @property
    def function_ids(self) -> list[str]:
        return [f for f, _ in self.functions]


@dataclass(frozen=True)
class TestObjective:
    statement: str
    kind: str


@dataclass(frozen=True)
class Criterion:
    id: str
    metric: str
    threshold: Any = ""

    def builtin(self) -> tuple[str, tuple[str, ...]] | None:
        """``(name, args)`` when the metric calls a built-in assessor."""
        m = _CALL.match(self.metric)
        if m and m.group(1) in BUILTIN_METRICS:
            args = tuple(a.strip() for a in m.group(2).split(",") if a.strip())
            return m.group(1), args
        return None

    def signals(self) -> list[str]:
        b = self.builtin()
        if b is not None:
            return list(b[1])
        return [o.name for o in expr.operands(expr.parse(self.metric, aggregates=True))]


@dataclass(frozen=True)
class TestCase:
    id: str
    generic_config: SystemConfigurationContainer
    use_cases: tuple[UseCase, ...]
    sut: tuple[str, ...]
    oui: tuple[str, ...]
    dui: tuple[str, ...]
    fut: tuple[str, ...]
    fui: tuple[str, ...]
    poi: tuple[TestObjective, ...]
    criteria: tuple[Criterion, ...]
    name: str | None = None

    def criterion(self, cid: str) -> Criterion:
        for c in self.criteria:
            if c.id == cid:
                return c
        raise DanglingReference(cid, "criteria")


@dataclass(frozen=True)
class Parameter:
    name: str
    symbol: str | None = None
    unit: str | None = None
    values: tuple = ()


@dataclass(frozen=True)
class Observed:
    name: str
    unit: str | None = None


@dataclass(frozen=True)
class Step:
    op: str
    args: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"op": self.op, **self.args}


@dataclass(frozen=True)
class TestSpecification:
    id: str
    test_case: TestCase
    test_system: SystemConfigurationContainer
    inputs: tuple[Parameter, ...]
    outputs: tuple[Observed, ...]
    test_design: tuple[Step, ...]

    @property
    def symbols(self) -> dict[str, Parameter]:
        return {p.symbol: p for p in self.inputs if p.symbol}


@dataclass(frozen=True)
class ExperimentSpecification:
    id: str
    test_spec: TestSpecification
    mapping: MappingResult
    scenario_plan: Mapping[str, Any]
    assessment: Mapping[str, Any] = field(default_factory=dict)
    ri: SystemConfigurationContainer | None = None


# -- test cases ------------------------------------------------------------------------

def _build_test_case(doc: Mapping) -> TestCase:
    return TestCase(
        id=doc["id"],
        name=doc.get("name"),
        generic_config=container_from_dict(doc["generic_config"]),
        use_cases=tuple(
            UseCase(u["id"], u["name"], tuple((f["id"], f["description"]) for f in u["functions"]))
            for u in doc["use_cases"]
        ),
        sut=tuple(doc["sut"]),
        oui=tuple(doc["oui"]),
        dui=tuple(doc["dui"]),
        fut=tuple(doc["fut"]),
        fui=tuple(doc["fui"]),
        poi=tuple(TestObjective(p["statement"], p["kind"]) for p in doc["poi"]),
        criteria=tuple(Criterion(c["id"], c["metric"], c["threshold"]) for c in doc["criteria"]),
    )


def test_case_diagnostics(tc: TestCase) -> list[Diagnostic]:
    """Cross-reference and invariant checks; codes start with ``TC-``."""
    out: list[Diagnostic] = []
    gsc = tc.generic_config
    if gsc.sc_type != "TC-GSC":
        out.append(Diagnostic(tc.id, "TC-GSC-TYPE", f"generic_config must be a TC-GSC, got {gsc.sc_type}"))
    out.extend(validate(gsc))
    comps = set(gsc.component_ids)
    for cid in tc.sut:
        if cid not in comps:
            out.append(Diagnostic(cid, "TC-REF", "SuT component is not in the generic configuration"))
    for cid in tc.oui:
        if cid not in tc.sut:
            out.append(Diagnostic(cid, "TC-OUI", "object under investigation is not part of the SuT (oui ⊆ sut)"))
    functions: set[str] = set()
    for u in tc.use_cases:
        ids = u.function_ids
        for f in sorted({f for f in ids if ids.count(f) > 1}):
            out.append(Diagnostic(u.id, "TC-FUNC-DUP", f"function id {f!r} appears twice in the use case"))
        functions.update(ids)
    for f in tc.fut:
        if f not in functions:
            out.append(Diagnostic(f, "TC-REF", "function under test is not defined by any use case"))
    for f in tc.fui:
        if f not in tc.fut:
            out.append(Diagnostic(f, "TC-FUI", "function under investigation is not under test (fui ⊆ fut)"))
    domains = set(gsc.domain_names())
    sut_domains = {t.domain for c in gsc.components if c.id in tc.sut for t in c.terminals}
    for d in tc.dui:
        if d not in domains:
            out.append(Diagnostic(d, "TC-REF", "domain under investigation is not declared"))
        elif d not in sut_domains:
            out.append(Diagnostic(d, "TC-DUI", "domain under investigation appears on no SuT terminal"))
    for p in tc.poi:
        if p.kind not in OBJECTIVE_KINDS:
            out.append(Diagnostic(tc.id, "TC-POI", f"objective kind {p.kind!r} is not one of {OBJECTIVE_KINDS}"))
    seen: set[str] = set()
    for c in tc.criteria:
        if c.id in seen:
            out.append(Diagnostic(c.id, "TC-CRITERION", "criterion id is used twice"))
        seen.add(c.id)
        m = _CALL.match(c.metric)
        if m and m.group(1) in BUILTIN_METRICS:
            if len(c.builtin()[1]) != BUILTIN_METRICS[m.group(1)]:
                out.append(Diagnostic(c.id, "TC-CRITERION", f"{m.group(1)} takes {BUILTIN_METRICS[m.group(1)]} signals"))
            continue
        try:
            expr.parse(c.metric, aggregates=True)
        except ExpressionError as exc:
            out.append(Diagnostic(c.id, "TC-CRITERION", f"metric does not parse: {exc}"))
    return out


_TC_RULES = {
    "TC-OUI": "oui ⊆ sut",
    "TC-FUI": "fui ⊆ fut",
    "TC-DUI": "dui on a SuT terminal",
    "TC-FUNC-DUP": "function ids unique within a use case",
    "TC-GSC-TYPE": "generic_config is a TC-GSC",
    "TC-POI": "objective kind",
    "TC-CRITERION": "criterion metric",
}


def _raise_first(diags: Iterable[Diagnostic]) -> None:
    for d in diags:
        if d.severity != "ERROR":
            continue
        if d.code == "TC-REF":
            raise DanglingReference(d.object_id, d.message)
        raise InvariantViolation(_TC_RULES.get(d.code, d.code), f"{d.object_id}: {d.message}")


def parse_test_case(doc: Mapping) -> TestCase:
    """Schema-check, resolve and invariant-check a test case document."""
    check(doc, "test_case")
    tc = _build_test_case(doc)
    _raise_first(test_case_diagnostics(tc))
    return tc


def test_case_to_dict(tc: TestCase) -> dict:
    out: dict[str, Any] = {"id": tc.id}
    if tc.name is not None:
        out["name"] = tc.name
    out.update(
        generic_config=container_to_dict(tc.generic_config),
        use_cases=[
            {"id": u.id, "name": u.name, "functions": [{"id": f, "description": d} for f, d in u.functions]}
            for u in tc.use_cases
        ],
        sut=list(tc.sut),
        oui=list(tc.oui),
        dui=list(tc.dui),
        fut=list(tc.fut),
        fui=list(tc.fui),
        poi=[{"statement": p.statement, "kind": p.kind} for p in tc.poi],
        criteria=[{"id": c.id, "metric": c.metric, "threshold": c.threshold} for c in tc.criteria],
    )
    return out


# -- test specifications ---------------------------------------------------------------

def parse_test_spec(doc: Mapping) -> TestSpecification:
    check(doc, "test_spec")
    return TestSpecification(
        id=doc["id"],
        test_case=parse_test_case(doc["test_case"]),
        test_system=container_from_dict(doc["test_system"]),
        inputs=tuple(
            Parameter(p["name"], p.get("symbol"), p.get("unit"), tuple(p.get("values", ()))) for p in doc["inputs"]
        ),
        outputs=tuple(Observed(o["name"], o.get("unit")) for o in doc["outputs"]),
        test_design=tuple(Step(s["op"], {k: v for k, v in s.items() if k != "op"}) for s in doc["test_design"]),
    )


def test_spec_to_dict(spec: TestSpecification) -> dict:
    def param(p: Parameter) -> dict:
        d: dict[str, Any] = {"name": p.name}
        if p.symbol is not None:
            d["symbol"] = p.symbol
        if p.unit is not None:
            d["unit"] = p.unit
        if p.values:
            d["values"] = list(p.values)
        return d

    def observed(o: Observed) -> dict:
        return {"name": o.name, **({"unit": o.unit} if o.unit is not None else {})}

    return {
        "id": spec.id,
        "test_case": test_case_to_dict(spec.test_case),
        "test_system": container_to_dict(spec.test_system),
        "inputs": [param(p) for p in spec.inputs],
        "outputs": [observed(o) for o in spec.outputs],
        "test_design": [s.to_dict() for s in spec.test_design],
    }


@dataclass(frozen=True)
class Resolved:
    """Where a spec-level name lives in the test system."""

    component: str
    name: str
    kind: str  # "attribute" or "signal"
    direction: str | None = None  # signal direction


def resolve_name(ts: SystemConfigurationContainer, name: str) -> Resolved:
    """Resolve ``component.attr``, ``component.signal`` or a unique bare signal name."""
    comps = {c.id: c for c in ts.components}
    head, dot, tail = name.rpartition(".")
    if dot and head in comps:
        c = comps[head]
        if tail in c.attributes:
            return Resolved(c.id, tail, "attribute")
        for t in c.terminals:
            for s in t.signals:
                if s.var == tail:
                    return Resolved(c.id, tail, "signal", s.dir)
        raise DanglingReference(name, f"component {head!r}")
    hits = [
        Resolved(c.id, s.var, "signal", s.dir)
        for c in ts.components
        for t in c.terminals
        for s in t.signals
        if s.var == name and s.dir == "out"
    ]
    if len(hits) == 1:
        return hits[0]
    if len(hits) > 1:
        raise DanglingReference(name, f"ambiguous: produced by {sorted(h.component for h in hits)}")
    raise DanglingReference(name, "test system")


def _symbols_in(value: Any) -> set[str]:
    if isinstance(value, str):
        return set(_SYMBOL.findall(value))
    if isinstance(value, Mapping):
        return set().union(*(_symbols_in(v) for v in value.values())) if value else set()
    if isinstance(value, (list, tuple)):
        return set().union(*(_symbols_in(v) for v in value)) if value else set()
    return set()


_STEP_ARGS = {
    "set_parameter": ("target", "value"),
    "apply_event": ("target", "at", "value"),
    "wait_until": ("t",),
    "assess": ("criteria",),
    "sweep": ("over",),
}


def _step_diagnostics(spec: TestSpecification) -> list[Diagnostic]:
    out: list[Diagnostic] = []
    ts = spec.test_system
    known_symbols = set(spec.symbols) | set(RESERVED_SYMBOLS)
    criteria = {c.id for c in spec.test_case.criteria}
    for i, step in enumerate(spec.test_design):
        sid = f"test_design[{i}]"
        missing = [a for a in _STEP_ARGS[step.op] if a not in step.args]
        if missing:
            out.append(Diagnostic(sid, "TS-STEP", f"{step.op} needs {missing}"))
            continue
        for sym in sorted(_symbols_in(dict(step.args)) - known_symbols):
            out.append(Diagnostic(sid, "TS-STEP", f"unknown symbol ${sym}"))
        if step.op in ("set_parameter", "apply_event"):
            try:
                r = resolve_name(ts, step.args["target"])
            except DanglingReference as exc:
                out.append(Diagnostic(sid, "TS-STEP", str(exc)))
                continue
            if step.op == "set_parameter" and r.kind != "attribute":
                out.append(Diagnostic(sid, "TS-STEP", f"{step.args['target']!r} is not an attribute"))
            if step.op == "apply_event" and (r.kind != "signal" or r.direction != "in"):
                out.append(Diagnostic(sid, "TS-STEP", f"{step.args['target']!r} is not an input signal"))
        elif step.op == "wait_until":
            t = step.args["t"]
            if not (isinstance(t, str) and _symbols_in(t)) and not (
                isinstance(t, (int, float)) and not isinstance(t, bool) and t > 0
            ):
                out.append(Diagnostic(sid, "TS-STEP", "wait_until needs a positive time"))
        elif step.op == "assess":
            for cid in step.args["criteria"]:
                if cid not in criteria:
                    out.append(Diagnostic(sid, "TS-STEP", f"unknown criterion {cid!r}"))
        elif step.op == "sweep":
            for sym in step.args["over"]:
                if sym not in spec.symbols:
                    out.append(Diagnostic(sid, "TS-STEP", f"sweep over undeclared input symbol {sym!r}"))
    return out


def _signal_diagnostics(ts: SystemConfigurationContainer) -> list[Diagnostic]:
    """Signals of modelled components must be variables of the right causality."""
    out = []
    for c in ts.components:
        model = c.attributes.get("model")
        if not model:
            continue
        try:
            md = models.description(model, c.attributes)
        except CosimError as exc:
            out.append(Diagnostic(c.id, "TS-MODEL", str(exc)))
            continue
        for t in c.terminals:
            for s in t.signals:
                want = Causality.INPUT if s.dir == "in" else Causality.OUTPUT
                try:
                    v = md.variable(s.var)
                except CosimError:
                    v = None
                if v is None or v.causality is not want:
                    out.append(Diagnostic(t.id, "TS-SIGNAL", f"{model} has no {want.value} {s.var!r}"))
    return out


def validate_test_specification(spec: TestSpecification) -> ValidationReport:
    """Lineage, name resolution and test-design checks, as diagnostics."""
    diags: list[Diagnostic] = list(test_case_diagnostics(spec.test_case))
    ts = spec.test_system
    if ts.sc_type != "TS-SC":
        diags.append(Diagnostic(spec.id, "TS-LINEAGE", f"test_system must be a TS-SC, got {ts.sc_type}"))
    diags.extend(validate(ts))
    diags.extend(instantiation_diagnostics(spec.test_case.generic_config, ts))
    diags.extend(_signal_diagnostics(ts))
    for p in spec.inputs:
        try:
            resolve_name(ts, p.name)
        except DanglingReference as exc:
            diags.append(Diagnostic(p.name, "TS-INPUT", str(exc)))
    symbols = [p.symbol for p in spec.inputs if p.symbol]
    for s in sorted({s for s in symbols if symbols.count(s) > 1} | (set(symbols) & set(RESERVED_SYMBOLS))):
        diags.append(Diagnostic(s, "TS-INPUT", "input symbol is reserved or declared twice"))
    outputs = {o.name for o in spec.outputs}
    for o in spec.outputs:
        try:
            resolve_name(ts, o.name)
        except DanglingReference as exc:
            diags.append(Diagnostic(o.name, "TS-OUTPUT", str(exc)))
    for c in spec.test_case.criteria:
        try:
            names = c.signals()
        except ExpressionError:
            continue  # already reported as TC-CRITERION
        for n in names:
            if n not in outputs:
                diags.append(Diagnostic(c.id, "TS-CRITERION", f"criterion observes {n!r}, which is not an output"))
    if not spec.test_design:
        diags.append(Diagnostic(spec.id, "TS-DESIGN-EMPTY", "test design has no steps"))
    diags.extend(_step_diagnostics(spec))
    return ValidationReport(diags)


# -- compilation -----------------------------------------------------------------------

def _federate_of(c: Component) -> str:
    return str(c.attributes.get("federate") or c.id)


def _sanitize(text: str) -> str:
    return re.sub(r"\W", "_", text)


def compile_experiment(
    spec: TestSpecification,
    ri: SystemConfigurationContainer,
    step_size: float | str = DEFAULT_STEP,
    experiment_id: str | None = None,
) -> ExperimentSpecification:
    """Map the test system onto the RI and derive the scenario plan.

    Components carrying a ``model`` attribute become federates (grouped by
    their ``federate`` attribute); all other components touching them are
    folded into one aggregated equivalent federate.  Data-flow connections
    come from terminal signals sharing a quantity within a connection point;
    ``apply_event`` steps become event-schedule federates.
    """
    step_size = str(step_size)  # decimal strings keep the time base exact
    report = validate_test_specification(spec)
    if not report.ok:
        raise InvalidSpecification([d for d in report if d.severity == "ERROR"])
    ts = spec.test_system
    tc = spec.test_case
    modelled = [c for c in ts.components if c.attributes.get("model")]
    sub = extract_subsystem(ts, [c.id for c in modelled]).container
    mapping = map_to_ri(sub, ri, priority=[c for c in tc.sut if c in set(sub.component_ids)])
    if not mapping.feasible:
        raise InfeasibleMapping(mapping.core)

    # set_parameter steps override component attributes (possibly with $symbols)
    overrides: dict[tuple[str, str], Any] = {}
    for step in spec.test_design:
        if step.op == "set_parameter":
            r = resolve_name(ts, step.args["target"])
            overrides[(r.component, r.name)] = step.args["value"]

    groups: dict[str, list[Component]] = {}
    for c in modelled:
        groups.setdefault(_federate_of(c), []).append(c)
    federates = []
    fed_of = {}
    for fid in sorted(groups):
        members = groups[fid]
        model_names = {c.attributes["model"] for c in members}
        if len(model_names) != 1:
            raise InvalidSpecification(
                [Diagnostic(fid, "EX-FEDERATE", f"components {[c.id for c in members]} map to different models")]
            )
        model = model_names.pop()
        declared = {v.name for v in models.description(model).by_causality(Causality.PARAMETER)}
        params: dict[str, Any] = {}
        options: dict[str, Any] = {}
        step = step_size
        for c in members:
            fed_of[c.id] = fid
            for k, v in sorted(c.attributes.items()):
                v = overrides.get((c.id, k), v)
                if k in declared:
                    if k in params and params[k] != v:
                        raise InvalidSpecification(
                            [Diagnostic(c.id, "EX-FEDERATE", f"parameter {k!r} conflicts within federate {fid!r}")]
                        )
                    params[k] = v
                elif k in ("integrator", "internal_step"):
                    options[k] = v
                elif k == "step_size":
                    step = str(v)
        federates.append(
            {
                "id": fid,
                "model": model,
                "step_size": step,
                "params": dict(sorted(params.items())),
                "components": sorted(c.id for c in members),
                "ri_resource": mapping.assignments.get(members[0].id),
                **options,
            }
        )

    connections = []
    driven: dict[tuple[str, str], str] = {}
    owner = {t.id: c for c in ts.components for t in c.terminals}
    terminals = ts.terminals
    eq_outputs: dict[str, Any] = {}
    eq_inputs: list[str] = []
    equivalents: set[str] = set()
    for cp in ts.connection_points:
        sigs = [(owner[tid], s) for tid in cp.terminals if tid in owner for s in terminals[tid].signals]
        for dst_comp, dst in sigs:
            if dst.dir != "in":
                continue
            sources = [(c, s) for c, s in sigs if s.dir == "out" and s.quantity == dst.quantity and c.id != dst_comp.id]
            for src_comp, src in sources:
                src_fed, dst_fed = fed_of.get(src_comp.id), fed_of.get(dst_comp.id)
                if src_fed is not None and src_fed == dst_fed:
                    continue  # internal to one federate
                if src_fed is None and dst_fed is None:
                    continue
                if src_fed is None:
                    name = _sanitize(f"{src_comp.id}_{src.var}")
                    eq_outputs[name] = src.initial if isinstance(src.initial, (int, float)) else 0.0
                    equivalents.add(src_comp.id)
                    src_ep = [EQUIVALENTS_ID, name]
                else:
                    src_ep = [src_fed, src.var]
                if dst_fed is None:
                    name = _sanitize(f"{dst_comp.id}_{dst.var}")
                    if name not in eq_inputs:
                        eq_inputs.append(name)
                    equivalents.add(dst_comp.id)
                    dst_ep = [EQUIVALENTS_ID, name]
                else:
                    dst_ep = [dst_fed, dst.var]
                key = tuple(dst_ep)
                if key in driven:
                    if driven[key] == tuple(src_ep):
                        continue
                    raise InvalidSpecification(
                        [Diagnostic(cp.id, "EX-CONNECTION", f"{dst_ep[0]}.{dst_ep[1]} has more than one source")]
                    )
                driven[key] = tuple(src_ep)
                conn: dict[str, Any] = {"source": src_ep, "target": dst_ep, "mode": dst.mode or "direct"}
                if dst.initial is not None:
                    conn["initial"] = dst.initial
                connections.append(conn)

    # event steps: one schedule per driven input
    events: dict[tuple[str, str], list[tuple[Any, Any]]] = {}
    for step in spec.test_design:
        if step.op == "apply_event":
            r = resolve_name(ts, step.args["target"])
            events.setdefault((r.component, r.name), []).append((step.args["at"], step.args["value"]))
    for (cid, var), entries in sorted(events.items()):
        fid = fed_of.get(cid)
        if fid is None:
            raise InvalidSpecification([Diagnostic(cid, "EX-EVENT", "events need a modelled target")])
        target_type = models.description(groups[fid][0].attributes["model"]).variable(var).data_type
        if target_type not in (DataType.BOOLEAN, DataType.REAL):
            raise InvalidSpecification([Diagnostic(cid, "EX-EVENT", f"cannot schedule events on {target_type.value}")])
        if (fid, var) in driven:
            raise InvalidSpecification([Diagnostic(cid, "EX-EVENT", f"{fid}.{var} is already connected")])
        eid = _sanitize(f"events_{cid}_{var}")
        text = " ".join(f"{at}:{_event_value(v)}" for at, v in entries)
        federates.append({"id": eid, "model": "event_schedule", "step_size": step_size, "params": {"events": text}, "components": []})
        out_var = "on" if target_type is DataType.BOOLEAN else "value"
        connections.append({"source": [eid, out_var], "target": [fid, var], "mode": "direct"})
        driven[(fid, var)] = (eid, out_var)

    if eq_outputs or eq_inputs:
        federates.append(
            {
                "id": EQUIVALENTS_ID,
                "model": "equivalent",
                "step_size": step_size,
                "params": {
                    "outputs": " ".join(f"{n}={v}" for n, v in sorted(eq_outputs.items())),
                    "inputs": " ".join(eq_inputs),
                },
                "components": sorted(equivalents),
            }
        )

    stops = [s.args["t"] for s in spec.test_design if s.op == "wait_until"]
    plan = {
        "stop_time": stops[-1] if stops else 1.0,
        "federates": sorted(federates, key=lambda f: f["id"]),
        "connections": sorted(connections, key=lambda c: (c["target"], c["source"])),
    }
    if equivalents:
        plan["equivalents"] = sorted(equivalents)

    observe = {}
    for o in spec.outputs:
        r = resolve_name(ts, o.name)
        if r.component in fed_of:
            observe[o.name] = [fed_of[r.component], r.name]
        else:
            observe[o.name] = [EQUIVALENTS_ID, _sanitize(f"{r.component}_{r.name}")]
    assessed = [cid for s in spec.test_design if s.op == "assess" for cid in s.args["criteria"]]
    criteria = [tc.criterion(cid) for cid in dict.fromkeys(assessed)] or list(tc.criteria)
    assessment = {
        "criteria": [{"id": c.id, "metric": c.metric, "threshold": c.threshold} for c in criteria],
        "observe": observe,
    }
    event_times = [s.args["at"] for s in spec.test_design if s.op == "apply_event"]
    if event_times:
        assessment["events"] = event_times
    sweep = [s.args["over"] for s in spec.test_design if s.op == "sweep"]
    if sweep:
        assessment["sweep"] = list(sweep[-1])
    exp = ExperimentSpecification(
        id=experiment_id or f"{spec.id}-experiment",
        test_spec=spec,
        mapping=mapping,
        scenario_plan=plan,
        assessment=assessment,
        ri=ri,
    )
    return exp


def _event_value(v: Any) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    return str(v)


def experiment_to_dict(exp: ExperimentSpecification) -> dict:
    out: dict[str, Any] = {"id": exp.id, "test_spec": test_spec_to_dict(exp.test_spec)}
    if exp.ri is not None:
        out["ri"] = container_to_dict(exp.ri)
    out["mapping"] = exp.mapping.to_dict()
    out["scenario_plan"] = exp.scenario_plan
    out["assessment"] = exp.assessment
    return out


def parse_experiment(doc: Mapping) -> ExperimentSpecification:
    check(doc, "experiment")
    return ExperimentSpecification(
        id=doc["id"],
        test_spec=parse_test_spec(doc["test_spec"]),
        mapping=MappingResult.from_dict(doc["mapping"]),
        scenario_plan=doc["scenario_plan"],
        assessment=doc.get("assessment", {}),
        ri=container_from_dict(doc["ri"]) if "ri" in doc else None,
    )


def plan_symbols(plan: Mapping) -> set[str]:
    return _symbols_in(dict(plan))


def validate_experiment(exp: ExperimentSpecification) -> ValidationReport:
    """Re-validation of a compiled experiment (closure check)."""
    from cosim.master import build_schedule, scenario_from_plan

    diags = list(validate_test_specification(exp.test_spec))
    try:
        check(experiment_to_dict(exp), "experiment")
    except SchemaError as exc:
        diags.append(Diagnostic(exp.id, "EX-SCHEMA", str(exc)))
        return ValidationReport(diags)
    if not exp.mapping.feasible:
        diags.append(Diagnostic(exp.id, "EX-MAPPING", f"unmapped components {list(exp.mapping.core)}"))
    ts = exp.test_spec.test_system
    represented: dict[str, int] = {}
    for f in exp.scenario_plan["federates"]:
        if f["model"] == "equivalent":
            continue
        for cid in f.get("components", []):
            represented[cid] = represented.get(cid, 0) + 1
    for cid in exp.test_spec.test_case.sut:
        if cid not in set(ts.component_ids):
            continue
        if ts.component(cid).attributes.get("model") and represented.get(cid) != 1:
            diags.append(Diagnostic(cid, "EX-SUT", "SuT component must be represented by exactly one federate"))
    for cid in sorted(represented):
        if cid in set(ts.component_ids) and cid not in exp.mapping.assignments:
            diags.append(Diagnostic(cid, "EX-MAPPING", "federate component is not mapped to the RI"))
    try:
        bindings = {s: 0 for s in plan_symbols(exp.scenario_plan)}
        build_schedule(scenario_from_plan(exp.scenario_plan, bindings))
    except CosimError as exc:
        diags.append(Diagnostic(exp.id, "EX-PLAN", str(exc)))
    return ValidationReport(diags)


# -- any document ------------------------------------------------------------------------

def document_kind(doc: Any) -> str:
    if isinstance(doc, Mapping):
        if "scenario_plan" in doc:
            return "experiment"
        if "test_system" in doc:
            return "test_spec"
        if "generic_config" in doc:
            return "test_case"
        if "sc_type" in doc:
            return "sc_container"
    raise CosimError("unrecognised document: expected a system configuration, test case, test spec or experiment")


def validate_document(doc: Any) -> ValidationReport:
    """Diagnostics for any supported document; schema violations become diagnostics."""
    kind = document_kind(doc)
    try:
        if kind == "sc_container":
            return validate(container_from_dict(doc))
        if kind == "test_case":
            check(doc, "test_case")
            return ValidationReport(test_case_diagnostics(_build_test_case(doc)))
        if kind == "test_spec":
            return validate_test_specification(parse_test_spec(doc))
        return validate_experiment(parse_experiment(doc))
    except SchemaError as exc:
        return ValidationReport([Diagnostic(exc.path, "SCHEMA", str(exc).split(": ", 1)[-1])])
    except (DanglingReference, InvariantViolation) as exc:
        return ValidationReport([Diagnostic(doc.get("id", "?"), "TC-INVALID", str(exc))])


# -- workflow ------------------------------------------------------------------------------

class Stage(str, Enum):
    TEST_CASE = "TestCase"
    RI_CAPABILITIES = "RIcapabilities"
    TEST_SPEC = "TestSpec"
    EXPERIMENT_SPEC = "ExperimentSpec"
    EXECUTION = "Execution"
    PRE_ASSESSMENT = "PreAssessment"
    EVALUATION = "Evaluation"


STAGES = tuple(Stage)
EVENTS = ("proceed", "loop_back")


@dataclass(frozen=True)
class WorkflowState:
    stage: Stage = Stage.TEST_CASE
    history: tuple[tuple[str, str, str], ...] = ()  # (from, event, to)

    @property
    def number(self) -> int:
        return STAGES.index(self.stage) + 1

    def to_dict(self) -> dict:
        return {"stage": self.stage.value, "history": [list(h) for h in self.history]}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "WorkflowState":
        try:
            stage = Stage(doc["stage"])
        except (KeyError, ValueError):
            raise CosimError(f"bad workflow state {doc!r}") from None
        return cls(stage, tuple(tuple(h) for h in doc.get("history", ())))


def advance_workflow(state: WorkflowState, event: str) -> WorkflowState:
    """Apply ``proceed`` (next stage) or ``loop_back`` (pre-assessment to test spec)."""
    if event == "proceed":
        if state.stage is Stage.EVALUATION:
            raise IllegalTransition("Evaluation is the final stage")
        nxt = STAGES[STAGES.index(state.stage) + 1]
    elif event == "loop_back":
        if state.stage is not Stage.PRE_ASSESSMENT:
            raise IllegalTransition(f"loop_back is only allowed at PreAssessment, not {state.stage.value}")
        nxt = Stage.TEST_SPEC
    else:
        raise IllegalTransition(f"unknown workflow event {event!r}")
    return replace(state, stage=nxt, history=state.history + ((state.stage.value, event, nxt.value),))

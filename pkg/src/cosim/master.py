"""Deterministic discrete-time co-simulation master.

Federates exchange values only at synchronization points spaced by the
least common multiple of their step sizes.  At every point the federates run
in a content-derived schedule order; loops of direct/iterative connections
are solved by Gauss-Seidel iteration with snapshot/rollback.

Connection modes:

* ``direct`` -- the target sees the source's value from the same point;
* ``time_shifted`` -- the target sees the source's value from the previous
  point (the connection's initial value at t = 0);
* ``iterative`` -- like direct, but allowed to close a loop, which is then
  iterated to a fixed point.
"""
from __future__ import annotations

import csv
import heapq
import logging
import math
import re
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from cosim import models
from cosim.errors import (
    CausalityError,
    ConvergenceFailure,
    CosimError,
    CycleError,
    FederateError,
    ScenarioError,
    TypeMismatch,
    UnresolvedCycle,
)
from cosim.federate import Causality, CSFederate, DataType, ModelDescription, Status, coerce

log = logging.getLogger(__name__)

MODES = ("direct", "time_shifted", "iterative")
EPSILON = 1e-6
MAX_ITERATIONS = 50
TIME_FORMAT = "{:.9f}"

Endpoint = tuple[str, str]


def as_fraction(value: Any) -> Fraction:
    """Exact rational for a duration given as number or string ("0.01", "1/100")."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ScenarioError(f"bad duration {value!r}")
    try:
        return Fraction(str(value).strip())
    except (ValueError, ZeroDivisionError):
        raise ScenarioError(f"bad duration {value!r}") from None


def lcm_fractions(values: Iterable[Fraction]) -> Fraction:
    out: Fraction | None = None
    for v in values:
        if out is None:
            out = v
            continue
        num = math.lcm(out.numerator * v.denominator, v.numerator * out.denominator)
        out = Fraction(num, out.denominator * v.denominator)
    if out is None:
        raise ScenarioError("scenario has no federates")
    return out


def derive_seed(seed: int, instance_id: str) -> int:
    """Per-federate seed: independent of declaration order, stable across runs."""
    return (int(seed) * 1_000_003 + zlib.crc32(instance_id.encode())) % 2**63


# -- scenario ------------------------------------------------------------------------

@dataclass
class FederateInstance:
    id: str
    federate: CSFederate
    step_size: Fraction
    model: str = ""
    params: dict = field(default_factory=dict)

    @property
    def description(self) -> ModelDescription:
        return self.federate.description


@dataclass(frozen=True)
class DataFlowConnection:
    source: Endpoint
    target: Endpoint
    mode: str = "direct"
    initial: Any = None


class Scenario:
    """Federate instances plus their data-flow connections."""

    def __init__(
        self,
        stop_time: float | str,
        seed: int = 0,
        sync_interval: float | str | None = None,
        epsilon: float = EPSILON,
        max_iterations: int = MAX_ITERATIONS,
    ):
        self.stop_time = as_fraction(stop_time)
        if self.stop_time < 0:
            raise ScenarioError("stop_time must be >= 0")
        if not isinstance(seed, int) or seed < 0:
            raise ScenarioError("seed must be a non-negative integer")
        self.seed = seed
        self.sync_interval = as_fraction(sync_interval) if sync_interval is not None else None
        if not epsilon > 0 or max_iterations < 1:
            raise ScenarioError("epsilon must be > 0 and max_iterations >= 1")
        self.epsilon = float(epsilon)
        self.max_iterations = int(max_iterations)
        self.federates: dict[str, FederateInstance] = {}
        self.connections: list[DataFlowConnection] = []

    def add_federate(
        self,
        instance_id: str,
        federate: CSFederate | str,
        step_size: float | str,
        params: Mapping[str, Any] | None = None,
        **create_options,
    ) -> FederateInstance:
        """Register a federate object, or a model name from the built-in library."""
        if not instance_id or instance_id in self.federates:
            raise ScenarioError(f"duplicate or empty federate id {instance_id!r}")
        step = as_fraction(step_size)
        if step <= 0:
            raise ScenarioError(f"{instance_id}: step size must be positive")
        model = ""
        if isinstance(federate, str):
            model = federate
            federate = models.create(model, params, step_size=float(step), **create_options)
        if not isinstance(federate, CSFederate):
            raise ScenarioError(f"{instance_id}: federates must expose the co-simulation interface")
        declared = set(federate.attributes.params)
        unknown = sorted(set(params or {}) - declared)
        if unknown:
            raise ScenarioError(f"{instance_id}: unknown parameters {unknown}")
        inst = FederateInstance(instance_id, federate, step, model or federate.description.model_name, dict(params or {}))
        self.federates[instance_id] = inst
        return inst

    def connect(self, source: Endpoint, target: Endpoint, mode: str = "direct", initial: Any = None) -> "Scenario":
        return connect(self, source, target, mode, initial)


def _variable(scenario: Scenario, endpoint: Endpoint, causality: Causality):
    inst_id, name = endpoint
    inst = scenario.federates.get(inst_id)
    if inst is None:
        raise ScenarioError(f"unknown federate {inst_id!r}")
    rec = inst.federate.attributes.records.get(name)
    if rec is None or rec.causality is not causality:
        raise CausalityError(f"{inst_id}.{name} is not an {causality.value} attribute")
    return rec


def _direct_path(edges: Mapping[str, set[str]], start: str, goal: str) -> list[str] | None:
    """A path start -> ... -> goal, or None."""
    stack, parent = [start], {start: None}
    while stack:
        n = stack.pop()
        if n == goal:
            path = []
            while n is not None:
                path.append(n)
                n = parent[n]
            return path[::-1]
        for m in sorted(edges.get(n, ())):
            if m not in parent:
                parent[m] = n
                stack.append(m)
    return None


def _direct_edges(connections: Iterable[DataFlowConnection]) -> dict[str, set[str]]:
    edges: dict[str, set[str]] = {}
    for c in connections:
        if c.mode == "direct":
            edges.setdefault(c.source[0], set()).add(c.target[0])
    return edges


def connect(
    scenario: Scenario, source: Endpoint, target: Endpoint, mode: str = "direct", initial: Any = None
) -> Scenario:
    """Add a data-flow connection after checking causality, types and cycles."""
    if mode not in MODES:
        raise ScenarioError(f"unknown connection mode {mode!r}")
    source, target = (str(source[0]), str(source[1])), (str(target[0]), str(target[1]))
    src = _variable(scenario, source, Causality.OUTPUT)
    dst = _variable(scenario, target, Causality.INPUT)
    if src.data_type is not dst.data_type:
        raise TypeMismatch(
            f"{source[0]}.{source[1]} is {src.data_type.value} but {target[0]}.{target[1]} is {dst.data_type.value}"
        )
    if initial is not None:
        initial = coerce(initial, dst.data_type)
    for c in scenario.connections:
        if c.target == target:
            raise ScenarioError(f"input {target[0]}.{target[1]} is already connected")
    if mode == "direct":
        path = _direct_path(_direct_edges(scenario.connections), target[0], source[0])
        if path is not None:
            raise CycleError(sorted(set(path)))
    scenario.connections.append(DataFlowConnection(source, target, mode, initial))
    return scenario


# -- scheduling -------------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleGraph:
    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]  # direct connections (instance level)
    order: tuple[str, ...]
    loop_groups: tuple[tuple[str, ...], ...]

    def units(self) -> list[tuple[str, ...]]:
        """Execution units in order: singletons and loop groups."""
        group_of = {m: g for g in self.loop_groups for m in g}
        out, seen = [], set()
        for n in self.order:
            g = group_of.get(n, (n,))
            if g not in seen:
                seen.add(g)
                out.append(g)
        return out


def _tarjan(nodes: Sequence[str], edges: Mapping[str, set[str]]) -> list[list[str]]:
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    stack: list[str] = []
    on_stack: set[str] = set()
    out: list[list[str]] = []
    counter = [0]

    def visit(v: str) -> None:
        # iterative DFS would be overkill: scenarios have a handful of federates
        index[v] = low[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on_stack.add(v)
        for w in sorted(edges.get(v, ())):
            if w not in index:
                visit(w)
                low[v] = min(low[v], low[w])
            elif w in on_stack:
                low[v] = min(low[v], index[w])
        if low[v] == index[v]:
            comp = []
            while True:
                w = stack.pop()
                on_stack.discard(w)
                comp.append(w)
                if w == v:
                    break
            out.append(sorted(comp))

    for n in sorted(nodes):
        if n not in index:
            visit(n)
    return out


def _toposort(nodes: Iterable[str], edges: Mapping[str, set[str]], key=lambda n: n) -> list[str]:
    nodes = list(nodes)
    members = set(nodes)
    indeg = {n: 0 for n in nodes}
    for a in nodes:
        for b in edges.get(a, ()):
            if b in members and b != a:
                indeg[b] += 1
    heap = [(key(n), n) for n in nodes if indeg[n] == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, n = heapq.heappop(heap)
        out.append(n)
        for b in sorted(edges.get(n, ())):
            if b in members and b != n:
                indeg[b] -= 1
                if indeg[b] == 0:
                    heapq.heappush(heap, (key(b), b))
    if len(out) != len(nodes):
        stuck = sorted(n for n in nodes if n not in set(out))
        raise UnresolvedCycle(stuck, f"cycle of direct connections through {stuck}")
    return out


def build_schedule(scenario: Scenario) -> ScheduleGraph:
    """Execution order over the condensation of the direct+iterative graph."""
    nodes = sorted(scenario.federates)
    direct = _direct_edges(scenario.connections)
    for a, targets in direct.items():
        if a in targets:
            raise UnresolvedCycle([a], f"direct self-connection on {a!r}")
    _toposort(nodes, direct)  # raises UnresolvedCycle on direct-only cycles
    dep: dict[str, set[str]] = {}
    self_loops = set()
    for c in scenario.connections:
        if c.mode in ("direct", "iterative"):
            dep.setdefault(c.source[0], set()).add(c.target[0])
            if c.source[0] == c.target[0]:
                self_loops.add(c.source[0])
    comps = _tarjan(nodes, dep)
    comp_of = {m: i for i, comp in enumerate(comps) for m in comp}
    groups = [comp for comp in comps if len(comp) > 1 or comp[0] in self_loops]
    for g in groups:
        for m in g:
            if not scenario.federates[m].federate.supports_rollback:
                raise ScenarioError(
                    f"{m!r} cannot join the iterated loop {g}: it does not support rollback; "
                    "use a time_shifted connection instead"
                )
    cedges: dict[int, set[int]] = {}
    for a, bs in dep.items():
        for b in bs:
            if comp_of[a] != comp_of[b]:
                cedges.setdefault(comp_of[a], set()).add(comp_of[b])
    corder = _toposort(range(len(comps)), cedges, key=lambda i: comps[i][0])
    order: list[str] = []
    loop_groups = []
    for ci in corder:
        comp = comps[ci]
        inner = _toposort(comp, {a: direct.get(a, set()) & set(comp) for a in comp})
        order.extend(inner)
        if comp in groups:
            loop_groups.append(tuple(inner))
    edges = tuple(sorted((a, b) for a, bs in direct.items() for b in bs))
    return ScheduleGraph(tuple(nodes), edges, tuple(order), tuple(loop_groups))


# -- results -----------------------------------------------------------------------------

@dataclass
class TimeSeries:
    times: list[float] = field(default_factory=list)
    values: list[Any] = field(default_factory=list)

    def append(self, t: float, value: Any) -> None:
        if self.times and t <= self.times[-1]:
            raise CosimError(f"sample time {t} is not after {self.times[-1]}")
        self.times.append(float(t))
        self.values.append(value)

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self):
        return iter(zip(self.times, self.values))

    def at(self, t: float) -> Any:
        for ti, v in self:
            if abs(ti - t) < 1e-9:
                return v
        raise KeyError(t)


@dataclass(frozen=True)
class IterationRecord:
    t: float
    loop_group: tuple[str, ...]
    iterations: int
    residuals: tuple[float, ...]


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str) -> Any:
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


class ResultStore:
    """Sampled outputs of a run, keyed by (instance id, variable name)."""

    def __init__(self):
        self.series: dict[Endpoint, TimeSeries] = {}
        self.iterations: list[IterationRecord] = []

    def record(self, instance_id: str, name: str, t: float, value: Any) -> None:
        self.series.setdefault((instance_id, name), TimeSeries()).append(t, value)

    def get(self, instance_id: str, name: str) -> TimeSeries:
        try:
            return self.series[(instance_id, name)]
        except KeyError:
            raise KeyError(f"no series for {instance_id}.{name}") from None

    def instances(self) -> list[str]:
        return sorted({k[0] for k in self.series})

    def variables(self, instance_id: str) -> list[str]:
        return sorted(k[1] for k in self.series if k[0] == instance_id)

    def max_iterations(self) -> int:
        return max((r.iterations for r in self.iterations), default=0)

    def to_csv(self, directory: str | Path, prefix: str = "") -> list[Path]:
        """One file per federate: ``t,<var>,...`` with times to 9 decimals."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for inst in self.instances():
            names = self.variables(inst)
            cols = [self.series[(inst, n)] for n in names]
            path = directory / f"{prefix}{inst}.csv"
            try:
                with open(path, "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["t", *names])
                    for i, t in enumerate(cols[0].times):
                        w.writerow([TIME_FORMAT.format(t), *(format_value(c.values[i]) for c in cols)])
            except OSError as exc:
                raise CosimError(f"cannot write {path}: {exc}") from exc
            paths.append(path)
        return paths

    @classmethod
    def from_csv(cls, paths: Mapping[str, str | Path]) -> "ResultStore":
        """Read back files written by ``to_csv``; ``paths`` maps instance id -> file."""
        store = cls()
        for inst, path in sorted(paths.items()):
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
            header, body = rows[0], rows[1:]
            for row in body:
                t = float(row[0])
                for name, cell in zip(header[1:], row[1:]):
                    store.record(inst, name, t, parse_value(cell))
        return store


# -- execution ----------------------------------------------------------------------------

class _Runner:
    def __init__(self, scenario: Scenario, schedule: ScheduleGraph):
        self.sc = scenario
        self.schedule = schedule
        steps = [inst.step_size for inst in scenario.federates.values()]
        base = lcm_fractions(steps)
        if scenario.sync_interval is not None:
            base = scenario.sync_interval
            for inst in scenario.federates.values():
                if (base / inst.step_size).denominator != 1:
                    raise ScenarioError(
                        f"{inst.id}: step size {inst.step_size} does not divide the sync interval {base}"
                    )
        self.sync = base
        self.points = int(math.floor(scenario.stop_time / base))
        self.inputs: dict[str, list[DataFlowConnection]] = {}
        for c in scenario.connections:
            self.inputs.setdefault(c.target[0], []).append(c)
        self.current: dict[Endpoint, Any] = {}
        self.previous: dict[Endpoint, Any] = {}
        self.store = ResultStore()

    def time(self, k: int) -> float:
        return float(k * self.sync)

    def _call(self, inst_id: str, t: float, fn, *args):
        try:
            out = fn(*args)
        except FederateError:
            raise
        except (CosimError, ArithmeticError, ValueError, RuntimeError) as exc:
            raise FederateError(inst_id, t, exc) from exc
        return out

    def _outputs(self, inst: FederateInstance, t: float) -> None:
        fed = inst.federate
        for name in fed.description.outputs:
            self.current[(inst.id, name)] = self._call(inst.id, t, fed.get_output, fed.ref(name))

    def _feed(self, inst: FederateInstance, k: int) -> None:
        fed = inst.federate
        t = self.time(k)
        for c in self.inputs.get(inst.id, ()):
            if c.mode == "time_shifted":
                if k == 0:
                    value = c.initial if c.initial is not None else self.current[c.source]
                else:
                    value = self.previous[c.source]
            else:
                value = self.current[c.source]
            self._call(inst.id, t, fed.set_input, fed.ref(c.target[1]), value)

    def _advance(self, inst: FederateInstance, k: int) -> None:
        fed = inst.federate
        t = self.time(k)
        if k == 0:
            status = self._call(inst.id, t, fed.do_step, 0.0, 0.0)
            if status is not Status.OK:
                raise FederateError(inst.id, t, f"status {status.value}")
        else:
            n = int(self.sync / inst.step_size)
            start = (k - 1) * self.sync
            for j in range(n):
                t_j = float(start + j * inst.step_size)
                status = self._call(inst.id, t, fed.do_step, t_j, float(inst.step_size))
                if status is not Status.OK:
                    raise FederateError(inst.id, t, f"status {status.value}")
        self._outputs(inst, t)

    def _single(self, inst_id: str, k: int) -> None:
        inst = self.sc.federates[inst_id]
        self._feed(inst, k)
        self._advance(inst, k)

    def _group(self, group: tuple[str, ...], k: int) -> None:
        t = self.time(k)
        members = set(group)
        iface = sorted(
            {c.source for c in self.sc.connections if c.source[0] in members and c.target[0] in members and c.mode != "time_shifted"}
        )
        insts = [self.sc.federates[m] for m in group]
        snaps = {i.id: self._call(i.id, t, i.federate.snapshot) for i in insts}
        residuals: list[float] = []
        iterations = 0
        while True:
            before = [self.current[e] for e in iface]
            for inst in insts:
                self._feed(inst, k)
                self._advance(inst, k)
            residual = max((abs(float(self.current[e]) - float(b)) for e, b in zip(iface, before)), default=0.0)
            residuals.append(residual)
            if residual < self.sc.epsilon:
                break
            if iterations >= self.sc.max_iterations:
                raise ConvergenceFailure(group, t, residual, iterations)
            iterations += 1
            for inst in insts:
                self._call(inst.id, t, inst.federate.restore, snaps[inst.id])
        self.store.iterations.append(IterationRecord(t, group, iterations, tuple(residuals)))

    def run(self) -> ResultStore:
        for inst_id in self.schedule.order:
            inst = self.sc.federates[inst_id]
            self._call(inst_id, 0.0, inst.federate.initialize, 0.0, inst.params)
            if inst.federate.stochastic:
                inst.federate.seed(derive_seed(self.sc.seed, inst_id))
            self._outputs(inst, 0.0)
        units = self.schedule.units()
        for k in range(self.points + 1):
            t = self.time(k)
            for unit in units:
                if unit in self.schedule.loop_groups:
                    self._group(unit, k)
                else:
                    self._single(unit[0], k)
            for (inst_id, name), value in sorted(self.current.items()):
                self.store.record(inst_id, name, t, value)
            self.previous = dict(self.current)
        return self.store


def run(scenario: Scenario) -> ResultStore:
    """Execute the scenario from t = 0 to ``stop_time``."""
    schedule = build_schedule(scenario)
    log.info("schedule order %s, loop groups %s", schedule.order, schedule.loop_groups)
    return _Runner(scenario, schedule).run()


def sync_interval(scenario: Scenario) -> Fraction:
    return _Runner(scenario, build_schedule(scenario)).sync


# -- plan documents ------------------------------------------------------------------------

_SYMBOL = re.compile(r"\$([A-Za-z_][A-Za-z0-9_]*)")


def substitute(value: Any, bindings: Mapping[str, Any]) -> Any:
    """Replace ``$name`` references; a string that is exactly ``$name`` takes the bound value."""
    if isinstance(value, str):
        whole = _SYMBOL.fullmatch(value.strip())
        if whole:
            name = whole.group(1)
            if name not in bindings:
                raise ScenarioError(f"unbound symbol ${name}")
            return bindings[name]

        def repl(m):
            if m.group(1) not in bindings:
                raise ScenarioError(f"unbound symbol ${m.group(1)}")
            return str(bindings[m.group(1)])

        return _SYMBOL.sub(repl, value)
    if isinstance(value, list):
        return [substitute(v, bindings) for v in value]
    if isinstance(value, dict):
        return {k: substitute(v, bindings) for k, v in value.items()}
    return value


def scenario_from_plan(
    plan: Mapping[str, Any],
    bindings: Mapping[str, Any] | None = None,
    seed: int | None = None,
) -> Scenario:
    """Build a scenario from a ``scenario_plan`` document section."""
    from cosim.schema import check

    plan = substitute(dict(plan), bindings or {})
    check(plan, "experiment.schema.json#/$defs/scenario_plan")
    sc = Scenario(
        stop_time=plan["stop_time"],
        seed=plan.get("seed", 0) if seed is None else seed,
        sync_interval=plan.get("sync_interval"),
        epsilon=plan.get("epsilon", EPSILON),
        max_iterations=plan.get("max_iterations", MAX_ITERATIONS),
    )
    for f in sorted(plan["federates"], key=lambda f: f["id"]):
        options = {k: f[k] for k in ("integrator", "internal_step") if k in f}
        sc.add_federate(f["id"], f["model"], f["step_size"], f.get("params", {}), **options)
    conns = sorted(plan["connections"], key=lambda c: (tuple(c["target"]), tuple(c["source"])))
    for c in conns:
        sc.connect(tuple(c["source"]), tuple(c["target"]), c.get("mode", "direct"), c.get("initial"))
    return sc

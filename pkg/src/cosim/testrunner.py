"""Execution of test campaigns, criterion assessment and reporting.

A campaign runs the compiled scenario once per sweep point.  Each run binds
the plan symbols (``$x``, ``$y``, ``$t0`` ...) into the scenario plan, so the
fault location, inception time and clearing time become ordinary federate
parameters.  Verdicts are computed from the recorded traces only, which
lets ``assess_campaign`` re-evaluate a stored campaign without re-running it.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from cosim import expr
from cosim.errors import CosimError, InsufficientTrace, PlanError
from cosim.master import (
    TIME_FORMAT,
    ResultStore,
    TimeSeries,
    format_value,
    parse_value,
    run,
    scenario_from_plan,
    substitute,
)
from cosim.models.frt import FRTEnvelope
from cosim.models.qv import QVCurve
from cosim.models.wtg import NORMAL
from cosim.testspec import BUILTIN_METRICS, Criterion, ExperimentSpecification

log = logging.getLogger(__name__)

PASS, FAIL, NOT_APPLICABLE = "pass", "fail", "not_applicable"
OUTCOMES = (PASS, FAIL, NOT_APPLICABLE)
TOL = 0.02
SETTLE = 0.5
_EPS_T = 1e-9

Evidence = tuple[float, Any, Any]


@dataclass(frozen=True)
class Verdict:
    criterion: str
    outcome: str
    evidence: tuple[Evidence, ...] = ()
    note: str = ""

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise CosimError(f"unknown verdict outcome {self.outcome!r}")
        if self.outcome == FAIL and not self.evidence:
            raise CosimError(f"{self.criterion}: a failing verdict needs evidence")

    @property
    def ok(self) -> bool:
        return self.outcome != FAIL

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "outcome": self.outcome,
            "evidence": [list(e) for e in self.evidence],
            "note": self.note,
        }


# -- plans -----------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    index: int
    bindings: Mapping[str, Any]

    @property
    def x(self) -> Any:
        return self.bindings.get("x")

    @property
    def y(self) -> Any:
        return self.bindings.get("y")

    def label(self) -> str:
        return " ".join(f"{k}={v}" for k, v in sorted(self.bindings.items()))


@dataclass(frozen=True)
class CampaignPlan:
    """Sweep points (symbol -> value) sharing one fault inception time and seed."""

    sweep: tuple[SweepPoint, ...]
    t0: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.sweep:
            raise PlanError("the sweep needs at least one point")
        if not (isinstance(self.t0, (int, float)) and self.t0 >= 0):
            raise PlanError("t0 must be a non-negative number")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise PlanError("seed must be an unsigned 64-bit integer")
        for p in self.sweep:
            if "t0" in p.bindings:
                raise PlanError(f"sweep point {p.index}: t0 is set plan-wide")
            y = p.bindings.get("y")
            if y is not None and not (isinstance(y, (int, float)) and y > self.t0):
                raise PlanError(f"sweep point {p.index}: clearing time y={y!r} must be after t0={self.t0}")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "CampaignPlan":
        if not isinstance(doc, Mapping) or "sweep" not in doc:
            raise PlanError("a plan needs a 'sweep' list")
        unknown = set(doc) - {"sweep", "t0", "seed"}
        if unknown:
            raise PlanError(f"unknown plan fields {sorted(unknown)}")
        points = []
        for i, entry in enumerate(doc["sweep"]):
            if not isinstance(entry, Mapping) or not entry:
                raise PlanError(f"sweep point {i} must be a non-empty object")
            points.append(SweepPoint(i, dict(entry)))
        return cls(tuple(points), doc.get("t0", 0.1), doc.get("seed", 0))

    @classmethod
    def load(cls, path: str | Path) -> "CampaignPlan":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise PlanError(f"cannot read plan {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {"t0": self.t0, "seed": self.seed, "sweep": [dict(p.bindings) for p in self.sweep]}

    def bindings(self, point: SweepPoint) -> dict:
        return {**point.bindings, "t0": self.t0}


# -- assessment -------------------------------------------------------------------------

def _arrays(trace: TimeSeries | tuple) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(trace, TimeSeries):
        times, values = trace.times, trace.values
    else:
        times, values = trace
    return np.asarray(times, dtype=float), np.asarray(values, dtype=float)


def trip_events(trace: TimeSeries | tuple) -> list[float]:
    """Times at which a trip flag switches on."""
    times, values = _arrays(trace)
    on = values != 0
    rising = on & np.concatenate(([True], ~on[:-1]))
    return [float(t) for t in times[rising]]


def assess_frt(
    trace: TimeSeries | tuple,
    envelope: FRTEnvelope,
    trips: Sequence[float] = (),
    t_fault: float = 0.1,
    criterion: str = "frt-envelope",
) -> Verdict:
    """Envelope check of U_PCC, with the allowed-disconnect rule for trips.

    Pass iff no trip happened and every sample in ``[t_fault, t_fault +
    horizon]`` is at or above the envelope, or the (first) trip happened at a
    sample with U_PCC below ``u_ret``.
    """
    times, u = _arrays(trace)
    end = t_fault + envelope.horizon
    if not len(times) or times[0] > t_fault + _EPS_T or times[-1] < end - _EPS_T:
        raise InsufficientTrace(
            f"trace must cover [{t_fault}, {end}]"
            + (f", it covers [{times[0]}, {times[-1]}]" if len(times) else ", it is empty")
        )
    if len(trips):
        t_trip = float(min(trips))
        hit = np.flatnonzero(np.abs(times - t_trip) < _EPS_T)
        if not len(hit):
            raise InsufficientTrace(f"no U_PCC sample at the trip time {t_trip}")
        u_trip = float(u[hit[0]])
        ev = ((t_trip, u_trip, envelope.u_ret),)
        if u_trip < envelope.u_ret:
            return Verdict(criterion, PASS, ev, "disconnected inside the allowed zone")
        return Verdict(criterion, FAIL, ev, "tripped above the retained voltage")
    window = (times >= t_fault - _EPS_T) & (times <= end + _EPS_T)
    limits = envelope.limits(np.round(times - t_fault, 9))
    margin = np.where(window, u - limits, np.inf)
    bad = np.flatnonzero(margin < 0)
    if len(bad):
        return Verdict(criterion, FAIL, tuple((float(times[i]), float(u[i]), float(limits[i])) for i in bad))
    i = int(np.argmin(margin))
    return Verdict(criterion, PASS, ((float(times[i]), float(u[i]), float(limits[i])),))


def assess_qv(
    u_trace: TimeSeries | tuple,
    q_trace: TimeSeries | tuple,
    curve: QVCurve,
    tol: float = TOL,
    settle: float = SETTLE,
    state_trace: TimeSeries | tuple | None = None,
    u_clear: float = 0.9,
    criterion: str = "qv-tracking",
    events: Sequence[float] = (),
) -> Verdict:
    """Q(V) tracking on settled windows of normal operation.

    A sample is assessed when it lies at least ``settle`` after the start of
    an uninterrupted run of samples with U_PCC >= ``u_clear`` (and, if a state
    trace is given, the FRT state NORMAL).  Each time in ``events`` (switching
    actions of the test design) starts a new run.
    """
    times, u = _arrays(u_trace)
    tq, q = _arrays(q_trace)
    if not len(times) or len(tq) != len(times) or np.any(np.abs(tq - times) > _EPS_T):
        raise InsufficientTrace("U_PCC and Q_PCC traces must be non-empty and share sample times")
    ok = u >= u_clear
    if state_trace is not None:
        ts, st = _arrays(state_trace)
        if len(ts) != len(times):
            raise InsufficientTrace("state trace must share the sample times")
        ok &= st == NORMAL
    assessed = np.zeros(len(times), dtype=bool)
    pending = sorted(float(e) for e in events)
    start = None
    for i, flag in enumerate(ok):
        while pending and pending[0] <= times[i] + _EPS_T:
            pending.pop(0)
            start = None
        if not flag:
            start = None
            continue
        if start is None:
            start = times[i]
        assessed[i] = times[i] - start >= settle - _EPS_T
    if not assessed.any():
        return Verdict(criterion, NOT_APPLICABLE, (), "no settled window in normal operation")
    target = np.asarray(curve(u), dtype=float)
    err = np.where(assessed, np.abs(q - target), -np.inf)
    bad = np.flatnonzero(err > tol)
    if len(bad):
        return Verdict(criterion, FAIL, tuple((float(times[i]), float(q[i]), float(target[i])) for i in bad))
    i = int(np.argmax(err))
    return Verdict(criterion, PASS, ((float(times[i]), float(q[i]), float(target[i])),))


def _aggregate(series: TimeSeries, how: str | None) -> tuple[float, Any]:
    if not len(series):
        raise InsufficientTrace("empty trace")
    if how in (None, "final"):
        return series.times[-1], series.values[-1]
    values = [float(v) for v in series.values]
    i = int(np.argmin(values) if how == "min" else np.argmax(values))
    return series.times[i], series.values[i]


def assess_expression(criterion: Criterion, traces: Mapping[str, TimeSeries]) -> Verdict:
    """Criterion given as a comparison expression over trace aggregates.

    ``min(s)``/``max(s)``/``final(s)`` aggregate a trace; a bare name means
    its final value.
    """
    node = expr.parse(criterion.metric, aggregates=True)

    def lookup(op: expr.Operand) -> Any:
        if op.name not in traces:
            raise InsufficientTrace(f"no trace for {op.name!r}")
        return _aggregate(traces[op.name], op.aggregate)[1]

    if expr.evaluate(node, lookup):
        return Verdict(criterion.id, PASS)
    evidence = []
    for c in expr.comparisons(node):
        t, v = _aggregate(traces[c.left.name], c.left.aggregate)
        if not expr.evaluate(c, lambda _: v):
            evidence.append((t, v, c.right))
    return Verdict(criterion.id, FAIL, tuple(evidence))


@dataclass(frozen=True)
class AssessmentConfig:
    """Assessment section of an experiment, with overrides applied."""

    criteria: tuple[Criterion, ...]
    observe: Mapping[str, tuple[str, str]]
    t0: float = 0.1
    events: tuple = ()  # switching instants, possibly symbolic ("$y")

    def event_times(self, bindings: Mapping[str, Any]) -> list[float]:
        try:
            return sorted(float(substitute(e, {**bindings, "t0": self.t0})) for e in self.events)
        except (CosimError, TypeError, ValueError) as exc:
            raise PlanError(f"cannot resolve event times {list(self.events)}: {exc}") from exc

    @classmethod
    def from_experiment(
        cls, assessment: Mapping, t0: float, overrides: Mapping[str, Any] | None = None
    ) -> "AssessmentConfig":
        criteria = [Criterion(c["id"], c["metric"], c.get("threshold", "")) for c in assessment.get("criteria", [])]
        criteria = apply_overrides(criteria, overrides or {})
        observe = {k: (v[0], v[1]) for k, v in assessment.get("observe", {}).items()}
        return cls(tuple(criteria), observe, float(t0), tuple(assessment.get("events", ())))


# --set keys: envelope.<field> or <threshold key> (tol, settle, curve, u_clear)
ENVELOPE_FIELDS = ("u_ret", "u_clear", "u_final", "t_clear", "t_rec3")
QV_FIELDS = ("tol", "settle", "curve", "u_clear")


def override_keys() -> list[str]:
    return [f"envelope.{f}" for f in ENVELOPE_FIELDS] + [f"qv.{f}" for f in QV_FIELDS]


def apply_overrides(criteria: Sequence[Criterion], overrides: Mapping[str, Any]) -> list[Criterion]:
    unknown = sorted(set(overrides) - set(override_keys()))
    if unknown:
        raise PlanError(f"unknown override keys {unknown}; known: {override_keys()}")
    out = []
    for c in criteria:
        b = c.builtin()
        if b is None or not isinstance(c.threshold, Mapping):
            out.append(c)
            continue
        prefix = "envelope." if b[0] == "frt_envelope" else "qv."
        th = dict(c.threshold)
        for k, v in overrides.items():
            if k.startswith(prefix):
                th[k[len(prefix):]] = v
        out.append(Criterion(c.id, c.metric, th))
    return out


def evaluate_criteria(
    store: ResultStore, config: AssessmentConfig, bindings: Mapping[str, Any] | None = None
) -> list[Verdict]:
    """Exactly one verdict per criterion."""
    events = config.event_times(bindings or {})
    traces = {}
    for name, (inst, var) in config.observe.items():
        try:
            traces[name] = store.get(inst, var)
        except KeyError:
            pass
    verdicts = []
    for c in config.criteria:
        b = c.builtin()
        try:
            if b is None:
                verdicts.append(assess_expression(c, traces))
                continue
            name, args = b
            missing = [a for a in args if a not in traces]
            if missing:
                raise InsufficientTrace(f"no trace for {missing}")
            th = dict(c.threshold) if isinstance(c.threshold, Mapping) else {}
            if name == "frt_envelope":
                env = FRTEnvelope.from_dict(th)
                verdicts.append(assess_frt(traces[args[0]], env, trip_events(traces[args[1]]), config.t0, c.id))
            else:
                curve = QVCurve.parse(th.get("curve", "0.90:0.25 1.00:0.05 1.10:-0.15"))
                verdicts.append(
                    assess_qv(
                        traces[args[0]],
                        traces[args[1]],
                        curve,
                        float(th.get("tol", TOL)),
                        float(th.get("settle", SETTLE)),
                        traces[args[2]],
                        float(th.get("u_clear", 0.9)),
                        c.id,
                        events,
                    )
                )
        except InsufficientTrace as exc:
            verdicts.append(Verdict(c.id, FAIL, ((config.t0, None, None),), f"insufficient trace: {exc}"))
    return verdicts


# -- campaigns --------------------------------------------------------------------------

class CampaignError(CosimError):
    """An execution error annotated with the sweep point it happened at."""

    def __init__(self, point: SweepPoint, cause: BaseException):
        self.point = point
        self.cause = cause
        super().__init__(f"sweep point {point.index} ({point.label()}): {cause}")


@dataclass
class PointResult:
    point: SweepPoint
    store: ResultStore
    verdicts: list[Verdict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(v.ok for v in self.verdicts)


def _set_params(plan: Mapping, params: Mapping[str, Any]) -> dict:
    """Apply ``federate.param`` overrides to a scenario plan."""
    plan = json.loads(json.dumps(plan))
    feds = {f["id"]: f for f in plan["federates"]}
    for key, value in params.items():
        fid, _, name = key.partition(".")
        if fid not in feds or not name:
            raise PlanError(f"parameter override {key!r} names no federate of the plan")
        feds[fid].setdefault("params", {})[name] = value
    return plan


def run_point(
    scenario_plan: Mapping, plan: CampaignPlan, point: SweepPoint, params: Mapping[str, Any] | None = None
) -> ResultStore:
    sp = _set_params(scenario_plan, params or {})
    try:
        return run(scenario_from_plan(sp, plan.bindings(point), seed=plan.seed))
    except CosimError as exc:
        raise CampaignError(point, exc) from exc


def _run_args(args):
    return run_point(*args)


def run_frt_campaign(
    exp: ExperimentSpecification,
    plan: CampaignPlan,
    params: Mapping[str, Any] | None = None,
    overrides: Mapping[str, Any] | None = None,
    workers: int = 1,
) -> list[PointResult]:
    """Run every sweep point from the same seed and assess it.

    ``params`` overrides federate parameters (``"frt.k_q": 0``); ``overrides``
    adjusts assessment thresholds (``"envelope.u_ret": 0.2``).
    """
    config = AssessmentConfig.from_experiment(exp.assessment, plan.t0, overrides)
    jobs = [(exp.scenario_plan, plan, p, params) for p in plan.sweep]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            stores = list(pool.map(_run_args, jobs))
    else:
        stores = [_run_args(j) for j in jobs]
    results = []
    for p, store in zip(plan.sweep, stores):
        verdicts = evaluate_criteria(store, config, p.bindings)
        log.info("point %d (%s): %s", p.index, p.label(), ", ".join(f"{v.criterion}={v.outcome}" for v in verdicts))
        results.append(PointResult(p, store, verdicts))
    return results


# -- reports ----------------------------------------------------------------------------

TRACE_FILE = "trace_{:03d}.csv"
PLOT_FILE = "plot_{:03d}.csv"
SUMMARY_FILE = "summary.csv"
CAMPAIGN_FILE = "campaign.json"
ENVELOPE_FILE = "envelope.csv"


def write_trace(store: ResultStore, path: Path) -> None:
    """All series of one run in a single file, columns ``<instance>.<var>``."""
    keys = sorted(store.series)
    if not keys:
        raise CosimError("nothing to write: the result store is empty")
    times = store.series[keys[0]].times
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *(f"{i}.{v}" for i, v in keys)])
        for k, t in enumerate(times):
            w.writerow([TIME_FORMAT.format(t), *(format_value(store.series[key].values[k]) for key in keys)])


def read_trace(path: Path) -> ResultStore:
    store = ResultStore()
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InsufficientTrace(f"{path} is empty")
    header = rows[0]
    for row in rows[1:]:
        t = float(row[0])
        for col, cell in zip(header[1:], row[1:]):
            inst, _, var = col.partition(".")
            store.record(inst, var, t, parse_value(cell))
    return store


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(
    results: Sequence[PointResult],
    outdir: str | Path,
    config: AssessmentConfig,
    plan: CampaignPlan,
    scenario_plan: Mapping | None = None,
) -> list[Path]:
    """Write traces, plot data, the envelope polyline and the summary table."""
    if not results:
        raise CosimError("a report needs at least one campaign result")
    outdir = Path(outdir)
    written: list[Path] = []
    envelope = next(
        (FRTEnvelope.from_dict(c.threshold) for c in config.criteria if (c.builtin() or ("",))[0] == "frt_envelope"),
        None,
    )
    u_obs = next((c.builtin()[1][0] for c in config.criteria if (c.builtin() or ("",))[0] == "frt_envelope"), None)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        for r in results:
            path = outdir / TRACE_FILE.format(r.point.index)
            write_trace(r.store, path)
            written.append(path)
            if u_obs is not None and u_obs in config.observe:
                series = r.store.get(*config.observe[u_obs])
                path = outdir / PLOT_FILE.format(r.point.index)
                with open(path, "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["t", "U_PCC", "U_lim"])
                    for t, u in series:
                        lim = envelope.limit(round(t - config.t0, 9))
                        w.writerow([TIME_FORMAT.format(t), _fmt(u), "" if math.isinf(lim) else _fmt(lim)])
                written.append(path)
        if envelope is not None:
            path = outdir / ENVELOPE_FILE
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["t", "U_lim"])
                pts = [(0.0, envelope.u_ret), (envelope.t_clear, envelope.u_ret)] + envelope.anchors[1:]
                for tau, u in pts:
                    w.writerow([TIME_FORMAT.format(config.t0 + tau), _fmt(u)])
            written.append(path)
        path = outdir / SUMMARY_FILE
        written.append(write_summary(results, config, path))
        path = outdir / CAMPAIGN_FILE
        doc = {
            "plan": plan.to_dict(),
            "assessment": {
                "t0": config.t0,
                "criteria": [{"id": c.id, "metric": c.metric, "threshold": c.threshold} for c in config.criteria],
                "observe": {k: list(v) for k, v in config.observe.items()},
                "events": list(config.events),
            },
            "points": [
                {
                    "index": r.point.index,
                    "bindings": dict(r.point.bindings),
                    "trace": TRACE_FILE.format(r.point.index),
                    "verdicts": [v.to_dict() for v in r.verdicts],
                }
                for r in results
            ],
        }
        if scenario_plan is not None:
            doc["scenario_plan"] = scenario_plan
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        written.append(path)
    except OSError as exc:
        raise CosimError(f"cannot write report file {exc.filename}: {exc.strerror}") from exc
    return written


def summary_rows(results: Sequence[PointResult], config: AssessmentConfig) -> tuple[list[str], list[list[str]]]:
    u_obs = next((c.builtin()[1][0] for c in config.criteria if (c.builtin() or ("",))[0] == "frt_envelope"), None)
    header = ["point", "x", "y", "min_U_PCC", *(c.id for c in config.criteria), "verdict"]
    rows = []
    for r in results:
        min_u = ""
        if u_obs is not None and u_obs in config.observe:
            try:
                min_u = f"{min(r.store.get(*config.observe[u_obs]).values):.6f}"
            except KeyError:
                pass
        rows.append(
            [
                str(r.point.index),
                _fmt(r.point.x),
                _fmt(r.point.y),
                min_u,
                *(v.outcome for v in r.verdicts),
                PASS if r.ok else FAIL,
            ]
        )
    return header, rows


def write_summary(results: Sequence[PointResult], config: AssessmentConfig, path: Path) -> Path:
    header, rows = summary_rows(results, config)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def format_summary(results: Sequence[PointResult], config: AssessmentConfig) -> str:
    header, rows = summary_rows(results, config)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)


def assess_campaign(outdir: str | Path, overrides: Mapping[str, Any] | None = None) -> tuple[list[PointResult], AssessmentConfig]:
    """Re-evaluate verdicts from the traces stored by ``emit_report``."""
    outdir = Path(outdir)
    try:
        with open(outdir / CAMPAIGN_FILE) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CosimError(f"cannot read {outdir / CAMPAIGN_FILE}: {exc}") from exc
    plan = CampaignPlan.from_dict(doc["plan"])
    config = AssessmentConfig.from_experiment(doc["assessment"], doc["assessment"]["t0"], overrides)
    results = []
    for entry, point in zip(doc["points"], plan.sweep):
        store = read_trace(outdir / entry["trace"])
        results.append(PointResult(point, store, evaluate_criteria(store, config, point.bindings)))
    return results, config

"""FMI-inspired federate interfaces.

Two federate kinds exist: co-simulation federates (``CSFederate``) advance
themselves in ``do_step``; model-exchange federates (``MEFederate``) only
expose derivatives and rely on a caller to integrate them.  ``MECapsule``
wraps an ME federate together with a fixed-step integrator and presents it as
a CS federate, so the master never needs to know which kind it is stepping.
"""
from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from cosim.errors import (
    DirectionError,
    DuplicateName,
    SchemaError,
    SolverFailure,
    TypeMismatch,
    UnknownVariable,
)


class DataType(str, Enum):
    REAL = "real"
    INTEGER = "integer"
    BOOLEAN = "boolean"
    STRING = "string"


class Causality(str, Enum):
    PARAMETER = "parameter"
    INPUT = "input"
    OUTPUT = "output"
    LOCAL = "local"


class Variability(str, Enum):
    CONSTANT = "constant"
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"


class Kind(str, Enum):
    CS = "CS"
    ME = "ME"


class Status(str, Enum):
    OK = "ok"
    ERROR = "error"


def coerce(value: Any, data_type: DataType) -> Any:
    """Convert ``value`` to the Python type backing ``data_type``.

    Raises ``TypeMismatch`` for lossy conversions (e.g. 1.5 -> integer).
    """
    dt = DataType(data_type)
    if dt is DataType.REAL:
        if isinstance(value, (bool, np.bool_)):
            return float(value)
        if isinstance(value, (int, float, np.integer, np.floating)):
            return float(value)
    elif dt is DataType.INTEGER:
        if isinstance(value, (bool, np.bool_)):
            return int(value)
        if isinstance(value, (int, np.integer)):
            return int(value)
        if isinstance(value, (float, np.floating)) and float(value).is_integer():
            return int(value)
    elif dt is DataType.BOOLEAN:
        if isinstance(value, (bool, np.bool_)):
            return bool(value)
        if isinstance(value, (int, float, np.integer, np.floating)) and value in (0, 1):
            return bool(value)
    elif isinstance(value, str):
        return value
    raise TypeMismatch(f"cannot use {value!r} as {dt.value}")


@dataclass(frozen=True)
class FederateVariable:
    name: str
    value_ref: int
    data_type: DataType = DataType.REAL
    causality: Causality = Causality.LOCAL
    variability: Variability = Variability.CONTINUOUS
    start: Any = None

    def __post_init__(self):
        object.__setattr__(self, "data_type", DataType(self.data_type))
        object.__setattr__(self, "causality", Causality(self.causality))
        object.__setattr__(self, "variability", Variability(self.variability))
        if self.causality is Causality.PARAMETER and self.variability is Variability.CONTINUOUS:
            raise SchemaError(self.name, "parameters must have constant or discrete variability")
        if self.start is not None:
            object.__setattr__(self, "start", coerce(self.start, self.data_type))

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "value_ref": self.value_ref,
            "data_type": self.data_type.value,
            "causality": self.causality.value,
            "variability": self.variability.value,
        }
        if self.start is not None:
            d["start"] = self.start
        return d


@dataclass(frozen=True)
class ModelDescription:
    model_name: str
    kind: Kind = Kind.CS
    variables: tuple[FederateVariable, ...] = ()
    state_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "variables", tuple(self.variables))
        refs = [v.value_ref for v in self.variables]
        if len(set(refs)) != len(refs):
            raise SchemaError(self.model_name, "value_ref values must be unique")
        if self.state_dim < 0:
            raise SchemaError(self.model_name, "state_dim must be >= 0")
        if self.kind is Kind.CS and self.state_dim:
            raise SchemaError(self.model_name, "state_dim is only meaningful for ME models")

    def variable(self, name: str) -> FederateVariable:
        for v in self.variables:
            if v.name == name:
                return v
        raise UnknownVariable(f"{self.model_name} has no variable {name!r}")

    def by_causality(self, causality: Causality | str) -> list[FederateVariable]:
        c = Causality(causality)
        return [v for v in self.variables if v.causality is c]

    @property
    def inputs(self) -> list[str]:
        return [v.name for v in self.by_causality(Causality.INPUT)]

    @property
    def outputs(self) -> list[str]:
        return [v.name for v in self.by_causality(Causality.OUTPUT)]

    def to_dict(self) -> dict:
        d = {
            "model_name": self.model_name,
            "kind": self.kind.value,
            "variables": [v.to_dict() for v in self.variables],
        }
        if self.kind is Kind.ME:
            d["state_dim"] = self.state_dim
        return d

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ModelDescription":
        from cosim.schema import check

        check(doc, "model_description")
        return cls(
            model_name=doc["model_name"],
            kind=Kind(doc["kind"]),
            variables=tuple(FederateVariable(**v) for v in doc.get("variables", ())),
            state_dim=int(doc.get("state_dim", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ModelDescription":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def describe(model_name: str, kind: Kind | str = Kind.CS, state_dim: int = 0, **groups) -> ModelDescription:
    """Build a description from ``parameters=``/``inputs=``/``outputs=``/``locals=`` lists.

    Each list item is a name, or a tuple ``(name, data_type[, start[, variability]])``.
    Value references are assigned consecutively in the order given.
    """
    causality_of = {
        "parameters": Causality.PARAMETER,
        "inputs": Causality.INPUT,
        "outputs": Causality.OUTPUT,
        "locals": Causality.LOCAL,
    }
    variables, ref = [], 0
    for group in ("parameters", "inputs", "outputs", "locals"):
        for item in groups.pop(group, ()):
            if isinstance(item, str):
                item = (item,)
            name = item[0]
            dt = DataType(item[1]) if len(item) > 1 else DataType.REAL
            start = item[2] if len(item) > 2 else None
            causality = causality_of[group]
            if len(item) > 3:
                var = Variability(item[3])
            elif causality is Causality.PARAMETER:
                var = Variability.CONSTANT
            elif dt is DataType.REAL:
                var = Variability.CONTINUOUS
            else:
                var = Variability.DISCRETE
            variables.append(FederateVariable(name, ref, dt, causality, var, start))
            ref += 1
    if groups:
        raise TypeError(f"unexpected variable groups {sorted(groups)}")
    return ModelDescription(model_name, Kind(kind), tuple(variables), state_dim)


# -- attribute mapping ---------------------------------------------------------

@dataclass(frozen=True)
class VariableRecord:
    value_ref: int
    data_type: DataType
    causality: Causality


@dataclass(frozen=True)
class AttributeMap:
    """Split of a model's variables into master-level params and attributes.

    Parameters stay parameters; inputs and outputs become "attributes".  The
    exact causality and data type is retained per name so the right typed
    accessor can be chosen later.
    """

    params: tuple[str, ...]
    attributes: tuple[str, ...]
    records: Mapping[str, VariableRecord] = field(default_factory=dict)


def to_attribute_map(md: ModelDescription) -> AttributeMap:
    seen: set[str] = set()
    params, attrs, records = [], [], {}
    for v in md.variables:
        if v.name in seen:
            raise DuplicateName(f"{md.model_name}: variable {v.name!r} declared twice")
        seen.add(v.name)
        if v.causality is Causality.PARAMETER:
            params.append(v.name)
        elif v.causality in (Causality.INPUT, Causality.OUTPUT):
            attrs.append(v.name)
        else:
            continue
        records[v.name] = VariableRecord(v.value_ref, v.data_type, v.causality)
    return AttributeMap(tuple(params), tuple(attrs), records)


@dataclass(frozen=True)
class Accessor:
    value_ref: int
    data_type: DataType
    direction: Causality


def select_accessor(
    amap: AttributeMap,
    name: str,
    access: str | None = None,
    written: Iterable[str] = (),
) -> Accessor:
    """Look up the typed accessor for ``name``.

    ``access="set"`` rejects outputs; ``access="get"`` rejects inputs that
    were never written (names in ``written`` count as written).
    """
    rec = amap.records.get(name)
    if rec is None:
        raise UnknownVariable(f"no parameter or attribute named {name!r}")
    if access == "set" and rec.causality is Causality.OUTPUT:
        raise DirectionError(f"{name!r} is an output and cannot be set")
    if access == "get" and rec.causality is Causality.INPUT and name not in set(written):
        raise DirectionError(f"input {name!r} has not been written")
    return Accessor(rec.value_ref, rec.data_type, rec.causality)


# -- integrators -----------------------------------------------------------------

Derivative = Callable[[float, np.ndarray], np.ndarray]


def euler_step(f: Derivative, t: float, x: np.ndarray, h: float) -> np.ndarray:
    return x + h * f(t, x)


def rk4_step(f: Derivative, t: float, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


INTEGRATORS: dict[str, Callable] = {"euler": euler_step, "rk4": rk4_step}


# -- federate base classes ---------------------------------------------------------

class _Variables:
    """Value storage keyed by value reference, shared by CS and ME federates."""

    def __init__(self, description: ModelDescription):
        self.description = description
        self.attributes = to_attribute_map(description)
        self._vars = {v.value_ref: v for v in description.variables}
        self._refs = {v.name: v.value_ref for v in description.variables}
        self._values: dict[int, Any] = {v.value_ref: v.start for v in description.variables}
        self._written: set[int] = {
            v.value_ref for v in description.variables if v.start is not None
        }

    def ref(self, name: str) -> int:
        try:
            return self._refs[name]
        except KeyError:
            raise UnknownVariable(f"{self.description.model_name} has no variable {name!r}") from None

    def _var(self, value_ref: int) -> FederateVariable:
        try:
            return self._vars[value_ref]
        except KeyError:
            raise UnknownVariable(f"{self.description.model_name} has no value_ref {value_ref}") from None

    def _apply_parameters(self, parameters: Mapping[str, Any] | None) -> None:
        for name, value in (parameters or {}).items():
            var = self._var(self.ref(name))
            if var.causality is not Causality.PARAMETER:
                raise DirectionError(f"{name!r} is not a parameter")
            self._values[var.value_ref] = coerce(value, var.data_type)
            self._written.add(var.value_ref)

    def set_input(self, value_ref: int, value: Any) -> None:
        var = self._var(value_ref)
        if var.causality is not Causality.INPUT:
            raise DirectionError(f"{var.name!r} is not an input")
        self._values[value_ref] = coerce(value, var.data_type)
        self._written.add(value_ref)

    def get_output(self, value_ref: int) -> Any:
        var = self._var(value_ref)
        if var.causality is Causality.INPUT and value_ref not in self._written:
            raise DirectionError(f"input {var.name!r} has not been written")
        return self._values[value_ref]

    # name-based conveniences used by model code and tests
    def __getitem__(self, name: str) -> Any:
        return self._values[self.ref(name)]

    def __setitem__(self, name: str, value: Any) -> None:
        var = self._var(self.ref(name))
        self._values[var.value_ref] = coerce(value, var.data_type)
        self._written.add(var.value_ref)

    def set(self, name: str, value: Any) -> None:
        self.set_input(self.ref(name), value)

    def get(self, name: str) -> Any:
        return self.get_output(self.ref(name))


class CSFederate(_Variables, ABC):
    """A federate that advances itself.

    Subclasses implement ``step``; ``do_step`` wraps it with the time
    monotonicity check.  ``step_size == 0`` asks the federate to refresh its
    outputs from the current inputs without advancing time.
    """

    kind = Kind.CS
    supports_rollback = False
    stochastic = False

    def __init__(self, description: ModelDescription):
        super().__init__(description)
        self.time = 0.0

    def initialize(self, start_time: float = 0.0, parameters: Mapping[str, Any] | None = None) -> None:
        self._apply_parameters(parameters)
        self.time = float(start_time)
        self.setup()

    def setup(self) -> None:
        """Hook run at the end of ``initialize``; outputs must be readable afterwards."""

    def seed(self, seed: int) -> None:
        """Receive the scenario seed; only stochastic federates care."""

    def do_step(self, current_time: float, step_size: float) -> Status:
        if step_size < 0:
            raise ValueError("step_size must be >= 0")
        if current_time < self.time - 1e-9:
            raise ValueError(
                f"{self.description.model_name}: do_step at t={current_time} "
                f"precedes federate time {self.time}"
            )
        status = self.step(float(current_time), float(step_size))
        if status is Status.OK:
            self.time = float(current_time) + float(step_size)
        return status

    @abstractmethod
    def step(self, current_time: float, step_size: float) -> Status:
        ...

    def snapshot(self) -> Any:
        if not self.supports_rollback:
            raise NotImplementedError(f"{self.description.model_name} does not support rollback")
        return (self.time, dict(self._values), set(self._written), self._state_snapshot())

    def restore(self, snap: Any) -> None:
        if not self.supports_rollback:
            raise NotImplementedError(f"{self.description.model_name} does not support rollback")
        time, values, written, extra = snap
        self.time = time
        self._values = dict(values)
        self._written = set(written)
        self._state_restore(extra)

    def _state_snapshot(self) -> Any:
        return None

    def _state_restore(self, extra: Any) -> None:
        pass


class MEFederate(_Variables, ABC):
    """A federate exposing continuous states and their derivatives.

    Outputs are recomputed from (t, x, inputs) by ``compute_outputs`` whenever
    they are read.
    """

    kind = Kind.ME

    def __init__(self, description: ModelDescription):
        if description.kind is not Kind.ME:
            raise SchemaError(description.model_name, "MEFederate needs an ME description")
        super().__init__(description)
        self.t = 0.0
        self.x = np.zeros(description.state_dim)

    @property
    def state_dim(self) -> int:
        return self.description.state_dim

    def initialize(self, start_time: float = 0.0, parameters: Mapping[str, Any] | None = None) -> None:
        self._apply_parameters(parameters)
        self.t = float(start_time)
        self.x = np.asarray(self.initial_states(), dtype=float).copy()
        if self.x.shape != (self.state_dim,):
            raise SchemaError(self.description.model_name, "initial state has wrong length")

    def initial_states(self) -> np.ndarray:
        return np.zeros(self.state_dim)

    def set_time(self, t: float) -> None:
        self.t = float(t)

    def set_continuous_states(self, x) -> None:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,):
            raise ValueError(f"expected {self.state_dim} states, got {x.shape}")
        self.x = x.copy()

    def get_continuous_states(self) -> np.ndarray:
        return self.x.copy()

    @abstractmethod
    def get_derivatives(self) -> np.ndarray:
        ...

    def compute_outputs(self) -> Mapping[str, Any]:
        return {}

    def get_output(self, value_ref: int) -> Any:
        var = self._var(value_ref)
        if var.causality is Causality.OUTPUT:
            for name, value in self.compute_outputs().items():
                self[name] = value
        return super().get_output(value_ref)


class MECapsule(CSFederate):
    """Co-simulation via capsuling: an ME federate plus a fixed-step integrator.

    Inputs are held constant over each ``do_step`` (zero-order hold); the inner
    states are only touched inside ``do_step``.
    """

    supports_rollback = True

    def __init__(
        self,
        inner: MEFederate,
        integrator: str = "rk4",
        internal_step: float = 1e-3,
        step_size: float | None = None,
    ):
        if integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {integrator!r}; choose from {sorted(INTEGRATORS)}")
        if not internal_step > 0:
            raise ValueError("internal_step must be positive")
        self.inner = inner
        self.integrator = integrator
        self.internal_step = float(internal_step)
        self._integrate = INTEGRATORS[integrator]
        if step_size is not None:
            self.substeps(step_size)
        desc = replace(inner.description, kind=Kind.CS, state_dim=0)
        super().__init__(desc)
        # all variable access goes through the inner federate
        self._values = inner._values
        self._written = inner._written

    def substeps(self, dt: float) -> int:
        """Number of internal steps covering ``dt``; rejects non-multiples."""
        n = round(dt / self.internal_step)
        if dt < 0 or abs(n * self.internal_step - dt) > 1e-9 * max(1.0, dt):
            raise ValueError(f"step {dt} is not an integer multiple of internal_step {self.internal_step}")
        return n

    def initialize(self, start_time: float = 0.0, parameters: Mapping[str, Any] | None = None) -> None:
        self.inner.initialize(start_time, parameters)
        self._values = self.inner._values
        self._written = self.inner._written
        self.time = float(start_time)

    def set_input(self, value_ref: int, value: Any) -> None:
        self.inner.set_input(value_ref, value)

    def get_output(self, value_ref: int) -> Any:
        return self.inner.get_output(value_ref)

    def _derivatives(self, t: float, x: np.ndarray) -> np.ndarray:
        self.inner.set_time(t)
        self.inner.set_continuous_states(x)
        dx = np.asarray(self.inner.get_derivatives(), dtype=float)
        if not np.all(np.isfinite(dx)):
            raise SolverFailure(f"{self.description.model_name}: non-finite derivative at t={t}")
        return dx

    def step(self, current_time: float, step_size: float) -> Status:
        n = self.substeps(step_size)
        x = self.inner.get_continuous_states()
        h = self.internal_step
        for k in range(n):
            x = self._integrate(self._derivatives, current_time + k * h, x, h)
        if not np.all(np.isfinite(x)):
            raise SolverFailure(f"{self.description.model_name}: non-finite state")
        self.inner.set_time(current_time + step_size)
        self.inner.set_continuous_states(x)
        return Status.OK

    def snapshot(self) -> Any:
        inner = self.inner
        return (self.time, inner.t, inner.x.copy(), dict(inner._values), set(inner._written))

    def restore(self, snap: Any) -> None:
        time, t, x, values, written = snap
        self.time = time
        inner = self.inner
        inner.t = t
        inner.x = x.copy()
        inner._values.clear()
        inner._values.update(values)
        inner._written.clear()
        inner._written.update(written)


def capsule_step(c: MECapsule, t: float, dt: float) -> Status:
    """Advance ``c`` from ``t`` to ``t + dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return c.do_step(t, dt)


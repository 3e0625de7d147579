"""Small utility federates: event schedules, boundary equivalents and test signals."""
from __future__ import annotations

import numpy as np

from cosim.errors import CosimError
from cosim.federate import (
    CSFederate,
    DataType,
    Kind,
    MEFederate,
    ModelDescription,
    Status,
    describe,
)

_TIME_DIGITS = 9


def parse_schedule(text: str) -> list[tuple[float, float]]:
    """Parse ``"t:value t:value ..."``; booleans are written as ``true``/``false``."""
    out = []
    for tok in str(text).replace(",", " ").split():
        t, sep, v = tok.partition(":")
        if not sep:
            raise CosimError(f"bad schedule entry {tok!r}; expected time:value")
        v = {"true": "1", "false": "0"}.get(v.lower(), v)
        try:
            out.append((float(t), float(v)))
        except ValueError:
            raise CosimError(f"bad schedule entry {tok!r}") from None
    times = [t for t, _ in out]
    if any(b < a for a, b in zip(times, times[1:])):
        raise CosimError("schedule times must be non-decreasing")
    return out


EVENT_DESCRIPTION = describe(
    "event_schedule",
    Kind.CS,
    parameters=[("events", "string", ""), ("initial", "real", 0.0)],
    outputs=[("value", "real", 0.0), ("on", "boolean", False)],
)


class EventSchedule(CSFederate):
    """Piecewise-constant signal: the value of the latest event at or before now."""

    supports_rollback = True

    def __init__(self):
        super().__init__(EVENT_DESCRIPTION)
        self.schedule: list[tuple[float, float]] = []

    def setup(self) -> None:
        self.schedule = parse_schedule(self["events"])
        self._emit(self.time)

    def _emit(self, t: float) -> None:
        now = round(t, _TIME_DIGITS)
        value = self["initial"]
        for when, v in self.schedule:
            if round(when, _TIME_DIGITS) <= now:
                value = v
        self["value"] = value
        self["on"] = value != 0.0

    def step(self, current_time: float, step_size: float) -> Status:
        self._emit(current_time + step_size)
        return Status.OK


def _parse_names(text: str) -> list[tuple[str, float]]:
    out = []
    for tok in str(text).replace(",", " ").split():
        name, _, value = tok.partition("=")
        out.append((name, float(value) if value else 0.0))
    return out


def equivalent_description(outputs: str = "", inputs: str = "") -> ModelDescription:
    """Description of a boundary equivalent with the given signal names.

    ``outputs`` is ``"name=value ..."`` (constant sources), ``inputs`` is a
    list of names (sinks).
    """
    outs = _parse_names(outputs)
    ins = [n for n, _ in _parse_names(inputs)]
    return describe(
        "equivalent",
        Kind.CS,
        parameters=[("outputs", "string", outputs), ("inputs", "string", inputs)],
        inputs=[(n, "real", 0.0) for n in ins],
        outputs=[(n, "real", v) for n, v in outs],
    )


class Equivalent(CSFederate):
    """Simple stand-in for components outside the system under test.

    Outputs hold constant values; inputs are accepted and recorded.
    """

    supports_rollback = True

    def __init__(self, outputs: str = "", inputs: str = ""):
        super().__init__(equivalent_description(outputs, inputs))

    def step(self, current_time: float, step_size: float) -> Status:
        return Status.OK


POLY_DESCRIPTION = describe(
    "polynomial",
    Kind.CS,
    parameters=[("c0", "real", 0.0), ("c1", "real", 0.0), ("c2", "real", 0.0)],
    outputs=[("y", "real", 0.0)],
)


class Polynomial(CSFederate):
    """Source emitting ``c0 + c1*t + c2*t**2``."""

    supports_rollback = True

    def __init__(self):
        super().__init__(POLY_DESCRIPTION)

    def setup(self) -> None:
        self._emit(self.time)

    def _emit(self, t: float) -> None:
        self["y"] = self["c0"] + self["c1"] * t + self["c2"] * t * t

    def step(self, current_time: float, step_size: float) -> Status:
        self._emit(current_time + step_size)
        return Status.OK


GAIN_DESCRIPTION = describe(
    "gain",
    Kind.CS,
    parameters=[("k", "real", 1.0), ("b", "real", 0.0)],
    inputs=[("u", "real", 0.0)],
    outputs=[("y", "real", 0.0)],
)


class Gain(CSFederate):
    """Static map ``y = k*u + b``; the smallest possible algebraic-loop member."""

    supports_rollback = True

    def __init__(self):
        super().__init__(GAIN_DESCRIPTION)

    def setup(self) -> None:
        self.step(self.time, 0.0)

    def step(self, current_time: float, step_size: float) -> Status:
        self["y"] = self["k"] * self["u"] + self["b"]
        return Status.OK


SUM_DESCRIPTION = describe(
    "affine",
    Kind.CS,
    parameters=[("k1", "real", 1.0), ("k2", "real", 0.0), ("k3", "real", 0.0), ("b", "real", 0.0)],
    inputs=[("u1", "real", 0.0), ("u2", "real", 0.0), ("u3", "real", 0.0)],
    outputs=[("y", "real", 0.0)],
)


class Affine(CSFederate):
    """``y = k1*u1 + k2*u2 + k3*u3 + b`` for building small linear loops."""

    supports_rollback = True

    def __init__(self):
        super().__init__(SUM_DESCRIPTION)

    def setup(self) -> None:
        self.step(self.time, 0.0)

    def step(self, current_time: float, step_size: float) -> Status:
        self["y"] = self["k1"] * self["u1"] + self["k2"] * self["u2"] + self["k3"] * self["u3"] + self["b"]
        return Status.OK


LINEAR2_DESCRIPTION = describe(
    "linear2",
    Kind.ME,
    state_dim=2,
    parameters=[
        ("a11", "real", 0.0), ("a12", "real", 1.0), ("a21", "real", -1.0), ("a22", "real", 0.0),
        ("b1", "real", 0.0), ("b2", "real", 0.0),
        ("x1_0", "real", 1.0), ("x2_0", "real", 0.0),
    ],
    inputs=[("u", "real", 0.0)],
    outputs=[("x1", "real", 0.0), ("x2", "real", 0.0)],
)


class Linear2(MEFederate):
    """``dx/dt = A x + b u`` with two states."""

    def __init__(self):
        super().__init__(LINEAR2_DESCRIPTION)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self["a11"], self["a12"]], [self["a21"], self["a22"]]])

    def initial_states(self) -> np.ndarray:
        return np.array([self["x1_0"], self["x2_0"]])

    def get_derivatives(self) -> np.ndarray:
        b = np.array([self["b1"], self["b2"]])
        return self.matrix @ self.x + b * self["u"]

    def compute_outputs(self) -> dict:
        return {"x1": float(self.x[0]), "x2": float(self.x[1])}


DECAY_DESCRIPTION = describe(
    "decay",
    Kind.ME,
    state_dim=1,
    parameters=[("rate", "real", 1.0), ("x0", "real", 1.0)],
    outputs=[("x", "real", 0.0)],
)


class Decay(MEFederate):
    """``dx/dt = -rate * x``."""

    def __init__(self):
        super().__init__(DECAY_DESCRIPTION)

    def initial_states(self) -> np.ndarray:
        return np.array([self["x0"]])

    def get_derivatives(self) -> np.ndarray:
        return -self["rate"] * self.x

    def compute_outputs(self) -> dict:
        return {"x": float(self.x[0])}


def is_boolean(description: ModelDescription, name: str) -> bool:
    return description.variable(name).data_type is DataType.BOOLEAN

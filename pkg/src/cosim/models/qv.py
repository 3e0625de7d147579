"""Supervisory plant controller: reactive power set point from a Q(V) droop curve."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from cosim.errors import CosimError
from cosim.federate import CSFederate, Kind, Status, describe
from cosim.models.wtg import NORMAL

DEFAULT_CURVE = "0.90:0.25 1.00:0.05 1.10:-0.15"


@dataclass(frozen=True)
class QVCurve:
    """Piecewise-linear Q(V), clamped beyond the end breakpoints."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(v), float(q)) for v, q in self.points)
        object.__setattr__(self, "points", pts)
        if not pts:
            raise CosimError("Q(V) curve needs at least one breakpoint")
        v = [p[0] for p in pts]
        q = [p[1] for p in pts]
        if any(b <= a for a, b in zip(v, v[1:])):
            raise CosimError("Q(V) breakpoint voltages must be strictly increasing")
        if any(b > a for a, b in zip(q, q[1:])):
            raise CosimError("Q(V) curve must be non-increasing in V")

    def __call__(self, v: float | Sequence[float]):
        vs = [p[0] for p in self.points]
        qs = [p[1] for p in self.points]
        out = np.interp(v, vs, qs)
        return float(out) if np.ndim(out) == 0 else out

    @classmethod
    def parse(cls, value: "str | Iterable | QVCurve") -> "QVCurve":
        """Accept ``"v:q v:q ..."`` (commas also separate) or a list of pairs."""
        if isinstance(value, QVCurve):
            return value
        if isinstance(value, str):
            try:
                pairs = [tuple(float(x) for x in tok.split(":")) for tok in value.replace(",", " ").split()]
            except ValueError:
                raise CosimError(f"cannot parse Q(V) curve {value!r}") from None
            if any(len(p) != 2 for p in pairs):
                raise CosimError(f"cannot parse Q(V) curve {value!r}")
            return cls(tuple(pairs))
        return cls(tuple(tuple(p) for p in value))

    def format(self) -> str:
        return " ".join(f"{v:g}:{q:g}" for v, q in self.points)


DESCRIPTION = describe(
    "qv_controller",
    Kind.CS,
    parameters=[("curve", "string", DEFAULT_CURVE)],
    inputs=[("U_PCC", "real", 1.0), ("frt_state", "integer", NORMAL)],
    outputs=[("Q_ref", "real", 0.0)],
)


class QVController(CSFederate):
    """Issues ``Q_ref = curve(U_PCC)`` in normal operation and holds it otherwise."""

    supports_rollback = True

    def __init__(self):
        super().__init__(DESCRIPTION)
        self.curve = QVCurve.parse(DEFAULT_CURVE)

    def setup(self) -> None:
        self.curve = QVCurve.parse(self["curve"])
        self["Q_ref"] = self.curve(float(self["U_PCC"]))

    def step(self, current_time: float, step_size: float) -> Status:
        if self["frt_state"] == NORMAL:
            self["Q_ref"] = self.curve(float(self["U_PCC"]))
        return Status.OK

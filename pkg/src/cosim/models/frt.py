"""Fault ride-through: the voltage-against-time envelope and the protection FSM."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from cosim.errors import CosimError
from cosim.federate import CSFederate, Kind, Status, describe
from cosim.models.wtg import FRT_ACTIVE, NORMAL, TRIPPED

STATE_NAMES = {NORMAL: "NORMAL", FRT_ACTIVE: "FRT_ACTIVE", TRIPPED: "TRIPPED"}

# time resolution used to decide which side of an anchor a sample falls on
_TIME_DIGITS = 9


@dataclass(frozen=True)
class FRTEnvelope:
    """Lower voltage limit as a function of time since fault inception.

    ``U_lim`` is ``u_ret`` on ``[0, t_clear)``; from ``t_clear`` it runs
    piecewise-linearly from ``u_clear`` through the optional ``recovery``
    anchors to ``u_final`` at ``t_rec3`` and stays there.  Negative times
    (before the fault) have no limit.
    """

    u_ret: float = 0.15
    u_clear: float = 0.90
    u_final: float = 0.90
    t_clear: float = 0.25
    t_rec3: float = 1.5
    recovery: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "recovery", tuple((float(t), float(u)) for t, u in self.recovery))
        times = [0.0, self.t_clear] + [t for t, _ in self.recovery] + [self.t_rec3]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise CosimError(f"envelope anchor times must be strictly increasing: {times}")
        volts = [self.u_clear] + [u for _, u in self.recovery] + [self.u_final]
        if not 0.0 <= self.u_ret <= self.u_clear <= self.u_final <= 1.0:
            raise CosimError("envelope needs 0 <= u_ret <= u_clear <= u_final <= 1")
        if any(b < a for a, b in zip(volts, volts[1:])):
            raise CosimError("recovery anchors must not decrease in voltage")

    @property
    def anchors(self) -> list[tuple[float, float]]:
        """(time since fault, U) anchor points, the deep-dip part included."""
        return [(0.0, self.u_ret), (self.t_clear, self.u_clear), *self.recovery, (self.t_rec3, self.u_final)]

    @property
    def horizon(self) -> float:
        return self.t_rec3

    def limit(self, tau: float) -> float:
        tau = round(float(tau), _TIME_DIGITS)
        if tau < 0:
            return float("-inf")
        if tau < self.t_clear:
            return self.u_ret
        pts = self.anchors[1:]
        return float(np.interp(tau, [t for t, _ in pts], [u for _, u in pts]))

    def limits(self, tau: Sequence[float]) -> np.ndarray:
        return np.array([self.limit(t) for t in tau])

    def to_dict(self) -> dict:
        d = {
            "u_ret": self.u_ret,
            "u_clear": self.u_clear,
            "u_final": self.u_final,
            "t_clear": self.t_clear,
            "t_rec3": self.t_rec3,
        }
        if self.recovery:
            d["recovery"] = [list(p) for p in self.recovery]
        return d

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any] | None) -> "FRTEnvelope":
        doc = dict(doc or {})
        unknown = set(doc) - {"u_ret", "u_clear", "u_final", "t_clear", "t_rec3", "recovery"}
        if unknown:
            raise CosimError(f"unknown envelope fields {sorted(unknown)}")
        rec = doc.pop("recovery", ())
        return cls(**{k: float(v) for k, v in doc.items()}, recovery=tuple(tuple(p) for p in rec))


def fsm_transition(state: int, u: float, u_ret: float, u_clear: float, h_v: float) -> int:
    """Next FSM state for one voltage sample.  Total over all inputs."""
    if state == TRIPPED or u < u_ret:
        return TRIPPED
    if state == NORMAL:
        return FRT_ACTIVE if u < u_clear else NORMAL
    return NORMAL if u >= u_clear + h_v else FRT_ACTIVE


DESCRIPTION = describe(
    "frt_fsm",
    Kind.CS,
    parameters=[
        ("u_ret", "real", 0.15),
        ("u_clear", "real", 0.90),
        ("h_v", "real", 0.02),
        ("k_q", "real", 2.0),
    ],
    inputs=[("U_PCC", "real", 1.0)],
    outputs=[
        ("state", "integer", NORMAL),
        ("iq_boost", "real", 0.0),
        ("trip", "boolean", False),
    ],
    locals=[("entered_at", "real", 0.0, "discrete")],
)


class FRTController(CSFederate):
    """Discrete FRT logic evaluated once per sample of ``U_PCC``."""

    supports_rollback = True

    def __init__(self):
        super().__init__(DESCRIPTION)

    def setup(self) -> None:
        if not 0 <= self["u_ret"] <= self["u_clear"]:
            raise CosimError("FRT controller needs 0 <= u_ret <= u_clear")
        if self["h_v"] < 0 or self["k_q"] < 0:
            raise CosimError("h_v and k_q must be non-negative")
        self["entered_at"] = self.time

    def step(self, current_time: float, step_size: float) -> Status:
        u = float(self["U_PCC"])
        old = self["state"]
        new = fsm_transition(old, u, self["u_ret"], self["u_clear"], self["h_v"])
        if new != old:
            self["entered_at"] = current_time + step_size
        self["state"] = new
        self["trip"] = new == TRIPPED
        self["iq_boost"] = self["k_q"] * max(0.0, self["u_clear"] - u) if new == FRT_ACTIVE else 0.0
        return Status.OK

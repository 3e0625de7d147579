"""Aggregated wind turbine generator seen from the grid: a controlled current source.

The grid-side converter tracks current references with a first-order lag
(time constant ``T_c``).  References follow from the active power set point
and the reactive power request; during fault ride-through an extra reactive
current is added and the q-axis gets priority inside the current limit.
"""
from __future__ import annotations

import math

import numpy as np

from cosim.federate import Kind, MEFederate, describe

NORMAL, FRT_ACTIVE, TRIPPED = 0, 1, 2

DESCRIPTION = describe(
    "wtg",
    Kind.ME,
    state_dim=2,
    parameters=[
        ("p_ref", "real", 0.6),
        ("i_max", "real", 1.1),
        ("T_c", "real", 0.02),
        ("v_floor", "real", 0.1),
    ],
    inputs=[
        ("V_pcc", "real", 1.0),
        ("Q_ref", "real", 0.0),
        ("iq_boost", "real", 0.0),
        ("frt_state", "integer", NORMAL),
    ],
    outputs=[
        ("I_d", "real", 0.0),
        ("I_q", "real", 0.0),
        ("chopper_on", "boolean", False),
    ],
)


def limit_current(i_d: float, i_q: float, i_max: float, q_priority: bool) -> tuple[float, float]:
    """Project a current reference into the disc of radius ``i_max``.

    With q priority the reactive part is served first and the active part
    gets what is left; otherwise the reference is scaled radially.
    """
    if q_priority:
        iq = min(max(i_q, -i_max), i_max)
        room = math.sqrt(max(i_max * i_max - iq * iq, 0.0))
        return min(max(i_d, -room), room), iq
    mag = math.hypot(i_d, i_q)
    if mag <= i_max:
        return i_d, i_q
    k = i_max / mag
    return i_d * k, i_q * k


class WTGModel(MEFederate):
    """States ``x = [i_d, i_q]``."""

    def __init__(self):
        super().__init__(DESCRIPTION)

    def references(self) -> tuple[float, float]:
        """Limited current references for the present inputs."""
        state = self["frt_state"]
        if state == TRIPPED:
            return 0.0, 0.0
        v = max(float(self["V_pcc"]), self["v_floor"])
        i_d = self["p_ref"] / v
        i_q = self["Q_ref"] / v
        if state == FRT_ACTIVE:
            i_q += self["iq_boost"]
        return limit_current(i_d, i_q, self["i_max"], q_priority=state == FRT_ACTIVE)

    def initial_states(self) -> np.ndarray:
        if not self["T_c"] > 0:
            raise ValueError("T_c must be positive")
        return np.array(self.references())

    def get_derivatives(self) -> np.ndarray:
        ref = np.array(self.references())
        return (ref - self.x) / self["T_c"]

    def compute_outputs(self) -> dict:
        i_d, i_q = float(self.x[0]), float(self.x[1])
        # the DC chopper burns the active power the grid side cannot export
        exported = max(float(self["V_pcc"]), 0.0) * i_d
        chopper = self["frt_state"] == FRT_ACTIVE and exported < self["p_ref"] - 1e-6
        return {"I_d": i_d, "I_q": i_q, "chopper_on": bool(chopper)}

"""Quasi-static transmission grid federate.

Each step is one power-flow solution.  For fault studies the solved base case
is turned into a fault-study network once, at initialisation:

* every generator with a transient reactance keeps its pre-fault EMF behind
  that reactance (see ``fault_study_network``);
* loads become constant impedances at their base-case voltage.

The wind power plant is a current source ``(i_d, i_q)`` at its terminal bus,
oriented on a phase-locked-loop angle: the terminal-voltage angle of the last
accepted step, held when the terminal voltage falls below ``pll_v_min``.
Every solve is therefore linear in the bus voltages, which keeps bolted
faults next to the plant solvable.  Quantities at the point of common coupling
are measured on the grid side of the collection-grid branch.
"""
from __future__ import annotations

from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from cosim.errors import CosimError, NonConvergence
from cosim.federate import CSFederate, Kind, Status, describe
from cosim.models.powerflow import (
    PQ,
    PV,
    SLACK,
    Branch,
    Bus,
    Fault,
    GridNetwork,
    PowerFlowResult,
    apply_fault,
    load_network,
    network_from_dict,
    solve_power_flow,
)

DESCRIPTION = describe(
    "grid",
    Kind.CS,
    parameters=[
        ("network", "string", "ieee9_wpp"),
        ("pcc_bus", "string", "10"),
        ("wtg_bus", "string", "11"),
        ("fault_location", "string", ""),
        ("fault_admittance", "real", 1e4),
        ("p_init", "real", 0.6),
        ("q_init", "real", 0.0),
        ("load_model", "string", "impedance"),
        ("pll_v_min", "real", 0.1),
    ],
    inputs=[("i_d", "real", 0.0), ("i_q", "real", 0.0), ("fault", "boolean", False)],
    outputs=[
        ("U_PCC", "real", 1.0),
        ("theta_PCC", "real", 0.0),
        ("P_PCC", "real", 0.0),
        ("Q_PCC", "real", 0.0),
        ("U_WTG", "real", 1.0),
    ],
)


def packaged_network(name: str) -> GridNetwork:
    """Load a network shipped in ``cosim/data`` by stem name, or from a file path."""
    path = Path(name)
    if path.suffix == ".json" and path.exists():
        return load_network(path)
    res = resources.files("cosim.data").joinpath(f"{name}.json")
    if not res.is_file():
        raise CosimError(f"unknown network {name!r}")
    import json

    return network_from_dict(json.loads(res.read_text()))


def internal_bus_id(bus_id: str) -> str:
    return f"{bus_id}'"


def fault_study_network(base: PowerFlowResult, load_model: str = "impedance") -> tuple[GridNetwork, float]:
    """Convert a solved case into its fault-study equivalent.

    The slack machine gets an internal slack bus behind its reactance; every
    other machine becomes a Norton equivalent (fixed-phase current source plus
    the reactance as a shunt), so its EMF stays frozen at the pre-fault phasor.
    Angles are re-referenced to the slack EMF; the returned offset must be
    added to solution angles to express them in the base-case reference.
    """
    net = base.network
    emf: dict[str, complex] = {}
    for b in net.buses:
        if b.type in (SLACK, PV) and b.x_source:
            v = base.voltage(b.id)
            vm = abs(v)
            s_load = complex(b.p_load * (vm / b.v_ref) ** b.exp_p, b.q_load * (vm / b.v_ref) ** b.exp_q)
            s_gen = base.injection(b.id) + s_load
            emf[b.id] = v + 1j * b.x_source * np.conj(s_gen / v)
    slack = next(b for b in net.buses if b.type == SLACK)
    offset = float(np.angle(emf[slack.id])) if slack.id in emf else 0.0
    rot = np.exp(-1j * offset)

    buses: list[Bus] = []
    branches = list(net.branches)
    for b in net.buses:
        vm = abs(base.voltage(b.id))
        if load_model == "impedance" and (b.p_load or b.q_load):
            b = replace(b, exp_p=2.0, exp_q=2.0, v_ref=vm)
        elif load_model not in ("impedance", "as_given"):
            raise CosimError(f"unknown load model {load_model!r}")
        if b.id in emf:
            e = emf[b.id] * rot
            if b.type == SLACK:
                gid = internal_bus_id(b.id)
                buses.append(Bus(id=gid, type=SLACK, v_set=float(abs(e))))
                branches.append(Branch(gid, b.id, 0.0, b.x_source, id=f"{gid}-{b.id}"))
                b = replace(b, type=PQ, p_gen=0.0, q_gen=0.0, v_set=1.0)
            else:
                i_n = e / (1j * b.x_source)
                b = replace(
                    b, type=PQ, p_gen=0.0, q_gen=0.0, v_set=1.0,
                    b_shunt=b.b_shunt - 1.0 / b.x_source,
                    i_re=float(i_n.real), i_im=float(i_n.imag),
                )
        elif b.type == PV:
            # a machine without reactance data keeps regulating its voltage
            pass
        buses.append(b)
    return replace(net, buses=tuple(buses), branches=tuple(branches), fault=None), offset


class GridFederate(CSFederate):
    """Power grid re-solved at every step with the plant's present currents."""

    supports_rollback = True

    def __init__(self):
        super().__init__(DESCRIPTION)
        self._warm: dict[bool, np.ndarray] = {}
        self.theta_pll = 0.0
        self.last: PowerFlowResult | None = None

    def setup(self) -> None:
        net = packaged_network(self["network"])
        pcc, wtg = self["pcc_bus"], self["wtg_bus"]
        net.index(pcc)
        net.index(wtg)
        base_net = net.with_bus(wtg, type=PQ, p_gen=self["p_init"], q_gen=self["q_init"], i_d=0.0, i_q=0.0)
        self.base = solve_power_flow(base_net)
        study, self.angle_offset = fault_study_network(self.base, self["load_model"])
        self.prefault = study.with_bus(wtg, p_gen=0.0, q_gen=0.0)
        location = self["fault_location"]
        self.faulted = (
            apply_fault(self.prefault, Fault.parse(location, self["fault_admittance"])) if location else None
        )
        self._warm = {}
        self.theta_pll = float(np.angle(self.base.voltage(wtg))) - self.angle_offset
        self._solve()

    def _solve(self) -> None:
        faulted = bool(self["fault"])
        if faulted and self.faulted is None:
            raise CosimError("fault switched on but no fault_location configured")
        current = complex(self["i_d"], -self["i_q"]) * np.exp(1j * self.theta_pll)
        net = (self.faulted if faulted else self.prefault).with_bus(
            self["wtg_bus"], i_re=current.real, i_im=current.imag
        )
        try:
            res = solve_power_flow(net, v0=self._warm.get(faulted))
        except NonConvergence:
            res = solve_power_flow(net)
        self._warm[faulted] = res.v.copy()
        self.last = res
        pcc, wtg = self["pcc_bus"], self["wtg_bus"]
        s = -res.branch_flow(pcc, wtg)
        self["U_PCC"] = abs(res.voltage(pcc))
        self["theta_PCC"] = float(np.angle(res.voltage(pcc))) + self.angle_offset
        self["P_PCC"] = s.real
        self["Q_PCC"] = s.imag
        self["U_WTG"] = abs(res.voltage(wtg))
        if self["U_WTG"] >= self["pll_v_min"]:
            self.theta_pll = float(np.angle(res.voltage(wtg)))

    def step(self, current_time: float, step_size: float) -> Status:
        self._solve()
        return Status.OK

    def _state_snapshot(self):
        return self.theta_pll, {k: v.copy() for k, v in self._warm.items()}

    def _state_restore(self, extra) -> None:
        self.theta_pll = extra[0]
        self._warm = {k: v.copy() for k, v in extra[1].items()}

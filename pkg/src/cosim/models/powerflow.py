"""Per-unit network data and a Newton-Raphson power flow in rectangular coordinates.

Bus power convention: positive P/Q is injected into the network.  Loads use an
exponential voltage model ``P = p_load * (|V|/v_ref)**exp_p`` so that constant
power (exponent 0), constant current (1) and constant impedance (2) behaviour
can be mixed.  A bus may also carry a voltage-oriented current source
``(i_d, i_q)`` whose injected power is ``|V| * (i_d + j*i_q)``, and a
fixed-phase current injection ``i_re + j*i_im`` (a Norton source) whose
injected power is ``V * conj(i_re + j*i_im)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from cosim.errors import CosimError, NonConvergence

SLACK, PV, PQ = "slack", "PV", "PQ"
BUS_TYPES = (SLACK, PV, PQ)

TOL = 1e-10
MAX_ITER = 50
MAX_BACKTRACK = 12


@dataclass(frozen=True)
class Bus:
    id: str
    type: str = PQ
    v_set: float = 1.0
    p_gen: float = 0.0
    q_gen: float = 0.0
    p_load: float = 0.0
    q_load: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    exp_p: float = 0.0
    exp_q: float = 0.0
    v_ref: float = 1.0
    i_d: float = 0.0
    i_q: float = 0.0
    i_re: float = 0.0
    i_im: float = 0.0
    x_source: float | None = None  # generator transient reactance, used for fault studies


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0
    id: str | None = None

    @property
    def name(self) -> str:
        return self.id or f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class Fault:
    """Shunt fault at a bus, or at ``fraction`` along a branch."""

    admittance: complex = 1e4 + 0j
    bus: str | None = None
    branch: tuple[str, str] | None = None
    fraction: float = 0.5

    @classmethod
    def parse(cls, value, admittance: complex = 1e4) -> "Fault":
        """Build a fault from a location description.

        Strings read ``<bus>[:<admittance>]`` or ``<from>-<to>@<fraction>[:<admittance>]``,
        where the admittance is a Python complex literal (``"20"``, ``"5-40j"``).
        Dicts carry ``bus``/``branch``/``fraction``/``admittance`` keys.
        """
        if isinstance(value, Fault):
            return value
        if isinstance(value, int):
            value = str(value)
        if isinstance(value, str):
            loc, _, adm = value.strip().partition(":")
            try:
                y = complex(adm.replace(" ", "")) if adm else complex(admittance)
            except ValueError:
                raise CosimError(f"bad fault admittance in {value!r}") from None
            if "@" in loc:
                ends, _, frac = loc.partition("@")
                f, sep, t = ends.partition("-")
                if not sep or not f or not t:
                    raise CosimError(f"bad branch fault location {value!r}")
                try:
                    fraction = float(frac)
                except ValueError:
                    raise CosimError(f"bad fault fraction in {value!r}") from None
                return cls(admittance=y, branch=(f, t), fraction=fraction)
            if not loc:
                raise CosimError("empty fault location")
            return cls(admittance=y, bus=loc)
        if not isinstance(value, dict):
            raise CosimError(f"cannot interpret fault location {value!r}")
        adm = value.get("admittance", 1e4)
        if isinstance(adm, (list, tuple)):
            adm = complex(adm[0], adm[1])
        branch = value.get("branch")
        return cls(
            admittance=complex(adm),
            bus=str(value["bus"]) if value.get("bus") is not None else None,
            branch=(str(branch[0]), str(branch[1])) if branch else None,
            fraction=float(value.get("fraction", 0.5)),
        )


@dataclass(frozen=True)
class GridNetwork:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 100.0
    frequency_hz: float = 50.0
    fault: Fault | None = None

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))

    @property
    def bus_ids(self) -> list[str]:
        return [b.id for b in self.buses]

    def index(self, bus_id: str) -> int:
        for i, b in enumerate(self.buses):
            if b.id == bus_id:
                return i
        raise CosimError(f"unknown bus {bus_id!r}")

    def bus(self, bus_id: str) -> Bus:
        return self.buses[self.index(bus_id)]

    def with_bus(self, bus_id: str, **changes) -> "GridNetwork":
        buses = tuple(replace(b, **changes) if b.id == bus_id else b for b in self.buses)
        return replace(self, buses=buses)

    def check(self) -> None:
        """Raise ``CosimError`` unless the network is well formed."""
        ids = self.bus_ids
        if len(set(ids)) != len(ids):
            raise CosimError("duplicate bus ids")
        if sum(b.type == SLACK for b in self.buses) != 1:
            raise CosimError("network must have exactly one slack bus")
        for b in self.buses:
            if b.type not in BUS_TYPES:
                raise CosimError(f"bus {b.id}: unknown type {b.type!r}")
        known = set(ids)
        adj: dict[str, set[str]] = {i: set() for i in ids}
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise CosimError(f"branch {br.name} references unknown bus")
            if br.r == 0 and br.x == 0:
                raise CosimError(f"branch {br.name} has zero impedance")
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
        seen, stack = set(), [ids[0]]
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(adj[n] - seen)
        if seen != known:
            raise CosimError(f"network is not connected: {sorted(known - seen)} isolated")


# -- serialization -----------------------------------------------------------

_BUS_FIELDS = {f for f in Bus.__dataclass_fields__}


def network_from_dict(doc: dict) -> GridNetwork:
    buses = []
    for raw in doc["buses"]:
        kw = {k: v for k, v in raw.items() if k in _BUS_FIELDS}
        kw["id"] = str(raw["id"])
        buses.append(Bus(**kw))
    branches = [
        Branch(
            from_bus=str(raw["from"]),
            to_bus=str(raw["to"]),
            r=float(raw.get("r", 0.0)),
            x=float(raw.get("x", 0.0)),
            b=float(raw.get("b", 0.0)),
            tap=float(raw.get("tap", 1.0) or 1.0),
            id=raw.get("id"),
        )
        for raw in doc["branches"]
    ]
    fault = Fault.parse(doc["fault"]) if doc.get("fault") else None
    net = GridNetwork(
        buses=tuple(buses),
        branches=tuple(branches),
        base_mva=float(doc.get("base_mva", 100.0)),
        frequency_hz=float(doc.get("frequency_hz", 50.0)),
        fault=fault,
    )
    net.check()
    return net


def network_to_dict(net: GridNetwork) -> dict:
    defaults = Bus(id="")
    buses = []
    for b in net.buses:
        row = {"id": b.id, "type": b.type}
        for name in _BUS_FIELDS - {"id", "type"}:
            val = getattr(b, name)
            if val != getattr(defaults, name):
                row[name] = val
        buses.append(row)
    branches = []
    for br in net.branches:
        row = {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "b": br.b}
        if br.tap != 1.0:
            row["tap"] = br.tap
        if br.id:
            row["id"] = br.id
        branches.append(row)
    return {
        "base_mva": net.base_mva,
        "frequency_hz": net.frequency_hz,
        "buses": buses,
        "branches": branches,
    }


def load_network(path: str | Path) -> GridNetwork:
    with open(path) as fh:
        return network_from_dict(json.load(fh))


# -- faults ------------------------------------------------------------------

def apply_fault(net: GridNetwork, fault: Fault | None) -> GridNetwork:
    """Return a network with ``fault`` materialised as a bus shunt.

    Branch faults split the branch at ``fraction`` into two sections joined
    by a new bus ``"<from>-<to>@<fraction>"``; line charging is split
    proportionally.
    """
    if fault is None:
        return replace(net, fault=None)
    y = complex(fault.admittance)
    if fault.bus is not None:
        b = net.bus(fault.bus)
        net = net.with_bus(fault.bus, g_shunt=b.g_shunt + y.real, b_shunt=b.b_shunt + y.imag)
        return replace(net, fault=None)
    if fault.branch is None:
        raise CosimError("fault needs a bus or a branch")
    net = split_branch(net, fault.branch, fault.fraction)
    mid = _split_id(fault.branch, fault.fraction)
    return replace(net.with_bus(mid, g_shunt=y.real, b_shunt=y.imag), fault=None)


def _split_id(branch: tuple[str, str], fraction: float) -> str:
    return f"{branch[0]}-{branch[1]}@{fraction:g}"


def split_branch(net: GridNetwork, branch: tuple[str, str], fraction: float) -> GridNetwork:
    if not 0.0 < fraction < 1.0:
        raise CosimError(f"fault fraction must lie in (0, 1), got {fraction}")
    f, t = branch
    mid = _split_id(branch, fraction)
    if mid in net.bus_ids:
        return net
    out, found = [], False
    for br in net.branches:
        if not found and {br.from_bus, br.to_bus} == {f, t}:
            found = True
            a = fraction if br.from_bus == f else 1.0 - fraction
            out.append(replace(br, to_bus=mid, r=br.r * a, x=br.x * a, b=br.b * a, id=None))
            out.append(
                Branch(mid, br.to_bus, br.r * (1 - a), br.x * (1 - a), br.b * (1 - a), 1.0)
            )
        else:
            out.append(br)
    if not found:
        raise CosimError(f"no branch between {f} and {t}")
    return replace(net, buses=net.buses + (Bus(id=mid),), branches=tuple(out))


# -- solver ------------------------------------------------------------------

def admittance_matrix(net: GridNetwork) -> np.ndarray:
    n = len(net.buses)
    idx = {b.id: i for i, b in enumerate(net.buses)}
    Y = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        tap = br.tap
        Y[f, f] += (ys + 0.5j * br.b) / tap**2
        Y[t, t] += ys + 0.5j * br.b
        Y[f, t] -= ys / tap
        Y[t, f] -= ys / tap
    for i, b in enumerate(net.buses):
        Y[i, i] += complex(b.g_shunt, b.b_shunt)
    return Y


@dataclass
class PowerFlowResult:
    network: GridNetwork
    v: np.ndarray
    iterations: int
    mismatch: float
    ybus: np.ndarray = field(repr=False)

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.v)

    @property
    def va(self) -> np.ndarray:
        return np.angle(self.v)

    def voltage(self, bus_id: str) -> complex:
        return complex(self.v[self.network.index(bus_id)])

    def injection(self, bus_id: str) -> complex:
        """Complex power injected into the network at ``bus_id`` (from the solution)."""
        i = self.network.index(bus_id)
        return complex(self.v[i] * np.conj(self.ybus[i] @ self.v))

    def branch_flow(self, from_bus: str, to_bus: str) -> complex:
        """Complex power entering the first matching branch at ``from_bus``."""
        for br in self.network.branches:
            if (br.from_bus, br.to_bus) == (from_bus, to_bus):
                return self._flow(br, forward=True)
            if (br.from_bus, br.to_bus) == (to_bus, from_bus):
                return self._flow(br, forward=False)
        raise CosimError(f"no branch between {from_bus} and {to_bus}")

    def branch_flows(self) -> dict[str, tuple[complex, complex]]:
        return {br.name: (self._flow(br, True), self._flow(br, False)) for br in self.network.branches}

    def _flow(self, br: Branch, forward: bool) -> complex:
        vf = self.v[self.network.index(br.from_bus)]
        vt = self.v[self.network.index(br.to_bus)]
        ys = 1.0 / complex(br.r, br.x)
        if forward:
            i = (ys + 0.5j * br.b) / br.tap**2 * vf - ys / br.tap * vt
            return complex(vf * np.conj(i))
        i = (ys + 0.5j * br.b) * vt - ys / br.tap * vf
        return complex(vt * np.conj(i))


def _voltage_dependent(net: GridNetwork, vm: np.ndarray):
    """Injections that depend on |V| only (generation, loads, voltage-oriented sources)."""
    s = np.empty(len(vm), dtype=complex)
    d_vm = np.empty(len(vm), dtype=complex)
    for i, b in enumerate(net.buses):
        r = vm[i] / b.v_ref
        pl = b.p_load * r**b.exp_p
        ql = b.q_load * r**b.exp_q
        s[i] = complex(b.p_gen - pl + vm[i] * b.i_d, b.q_gen - ql + vm[i] * b.i_q)
        if vm[i] > 0:
            d_vm[i] = complex(-b.exp_p * pl / vm[i] + b.i_d, -b.exp_q * ql / vm[i] + b.i_q)
        else:
            d_vm[i] = complex(b.i_d, b.i_q)
    return s, d_vm


def _norton(net: GridNetwork) -> np.ndarray:
    return np.array([complex(b.i_re, b.i_im) for b in net.buses], dtype=complex)


def _specified(net: GridNetwork, v: np.ndarray) -> np.ndarray:
    """Specified complex power injection at every bus for voltages ``v``."""
    s, _ = _voltage_dependent(net, np.abs(v))
    return s + v * np.conj(_norton(net))


def power_mismatch(net: GridNetwork, v: Sequence[complex], ybus: np.ndarray | None = None) -> np.ndarray:
    """Per-bus mismatch ``S_calc - S_spec``; slack rows are zeroed, PV rows keep only P."""
    v = np.asarray(v, dtype=complex)
    Y = admittance_matrix(net) if ybus is None else ybus
    s_calc = v * np.conj(Y @ v)
    s_spec = _specified(net, v)
    mis = s_calc - s_spec
    for i, b in enumerate(net.buses):
        if b.type == SLACK:
            mis[i] = 0.0
        elif b.type == PV:
            mis[i] = mis[i].real
    return mis


def flat_start(net: GridNetwork) -> np.ndarray:
    return np.array([b.v_set if b.type in (SLACK, PV) else 1.0 for b in net.buses], dtype=complex)


def solve_power_flow(
    net: GridNetwork,
    v0: Sequence[complex] | None = None,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> PowerFlowResult:
    """Solve the AC power flow with Newton-Raphson in rectangular coordinates.

    PQ buses use the current mismatch ``(Y V)_i - conj(S_i / V_i)``, which is
    exactly linear in V for impedance loads and fixed-phase sources and so
    stays well conditioned under bolted faults; PV buses use the active power
    mismatch and ``|V|^2 - V_set^2``.  Convergence is judged on the power
    mismatch.  ``v0`` warm-starts the iteration; PV/slack magnitudes are reset
    to their set points.  Raises ``NonConvergence`` after ``max_iter`` iterations.
    """
    if net.fault is not None:
        net = apply_fault(net, net.fault)
    net.check()
    Y = admittance_matrix(net)
    n = len(net.buses)
    types = [b.type for b in net.buses]
    pv = np.array([i for i in range(n) if types[i] == PV], dtype=int)
    pq = np.array([i for i in range(n) if types[i] == PQ], dtype=int)
    free = np.array([i for i in range(n) if types[i] != SLACK], dtype=int)
    v_set2 = np.array([b.v_set**2 for b in net.buses])
    i_n = _norton(net)

    if v0 is None:
        v = flat_start(net)
    else:
        v = np.array(v0, dtype=complex)
        if v.shape != (n,):
            raise CosimError(f"warm start has {v.shape} entries for {n} buses")
        for i, b in enumerate(net.buses):
            if b.type in (SLACK, PV):
                v[i] = b.v_set * np.exp(1j * np.angle(v[i]))
            elif abs(v[i]) < 1e-6:
                v[i] = 1.0

    def residual(v):
        vm = np.abs(v)
        s_a, ds_a = _voltage_dependent(net, vm)
        ibus = Y @ v
        mis = v * np.conj(ibus) - (s_a + v * np.conj(i_n))
        r = np.empty(n, dtype=complex)
        with np.errstate(divide="ignore", invalid="ignore"):
            r[pq] = ibus[pq] - np.conj(s_a[pq] / v[pq]) - i_n[pq]
        r[pv] = mis[pv].real + 1j * (vm[pv] ** 2 - v_set2[pv])
        return r, mis, ibus, s_a, ds_a

    def pack(z):
        return np.r_[z[free].real, z[free].imag]

    def power_error(mis):
        return float(max(np.max(np.abs(mis[pq]), initial=0.0), np.max(np.abs(mis[pv].real), initial=0.0)))

    r, mis, ibus, s_a, ds_a = residual(v)
    err = power_error(mis)
    it = 0
    while err >= tol:
        if it >= max_iter:
            raise NonConvergence(it, err)
        it += 1
        vm = np.abs(v)
        # complex derivatives of each residual with respect to e_k and f_k
        d_de = np.zeros((n, n), dtype=complex)
        d_df = np.zeros((n, n), dtype=complex)
        d_de[pq] = Y[pq]
        d_df[pq] = 1j * Y[pq]
        for i in pq:
            cv = np.conj(v[i])
            ds = np.conj(ds_a[i])
            d_de[i, i] -= ds * (v[i].real / vm[i]) / cv - np.conj(s_a[i]) / cv**2
            d_df[i, i] -= ds * (v[i].imag / vm[i]) / cv + 1j * np.conj(s_a[i]) / cv**2
        for i in pv:
            dp_de = (v[i] * np.conj(Y[i])).real
            dp_df = (-1j * v[i] * np.conj(Y[i])).real
            dp_de[i] += np.conj(ibus[i]).real - ds_a[i].real * v[i].real / vm[i] - np.conj(i_n[i]).real
            dp_df[i] += (1j * np.conj(ibus[i])).real - ds_a[i].real * v[i].imag / vm[i] - (1j * np.conj(i_n[i])).real
            d_de[i] = dp_de
            d_df[i] = dp_df
            d_de[i, i] += 2j * v[i].real
            d_df[i, i] += 2j * v[i].imag
        J = np.block(
            [
                [d_de[np.ix_(free, free)].real, d_df[np.ix_(free, free)].real],
                [d_de[np.ix_(free, free)].imag, d_df[np.ix_(free, free)].imag],
            ]
        )
        g = pack(r)
        try:
            dx = np.linalg.solve(J, -g)
        except np.linalg.LinAlgError as exc:
            raise NonConvergence(it, err) from exc
        # backtracking keeps the iterate from jumping through zero voltage
        norm = float(np.linalg.norm(g))
        step = 1.0
        for _ in range(MAX_BACKTRACK):
            v_new = v.copy()
            v_new[free] += step * (dx[: len(free)] + 1j * dx[len(free):])
            if np.all(np.abs(v_new[pq]) > 0):
                trial = residual(v_new)
                g_new = pack(trial[0])
                if np.isfinite(g_new).all() and np.linalg.norm(g_new) < norm:
                    break
            step *= 0.5
        else:
            raise NonConvergence(it, err)
        v = v_new
        r, mis, ibus, s_a, ds_a = trial
        err = power_error(mis)
    return PowerFlowResult(network=net, v=v, iterations=it, mismatch=err, ybus=Y)

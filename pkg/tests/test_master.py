from __future__ import annotations

import hashlib
import zlib
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cosim.errors import (
    CausalityError,
    ConvergenceFailure,
    CycleError,
    FederateError,
    ScenarioError,
    TypeMismatch,
    UnresolvedCycle,
)
from cosim.federate import CSFederate, Status, describe
from cosim.master import (
    ResultStore,
    Scenario,
    TimeSeries,
    as_fraction,
    build_schedule,
    derive_seed,
    format_value,
    lcm_fractions,
    parse_value,
    run,
    scenario_from_plan,
    substitute,
    sync_interval,
)
from oracles import exp_decay


def gain_loop(epsilon=1e-9, stop=0.3, mode="iterative", max_iterations=50) -> Scenario:
    """x = 0.5*y + 1 and y = 0.5*x as two coupled gains."""
    sc = Scenario(stop, epsilon=epsilon, max_iterations=max_iterations)
    sc.add_federate("fx", "gain", "0.1", {"k": 0.5, "b": 1.0})
    sc.add_federate("fy", "gain", "0.1", {"k": 0.5})
    sc.connect(("fy", "y"), ("fx", "u"), mode)
    sc.connect(("fx", "y"), ("fy", "u"), "iterative")
    return sc


def loop_fixed_point() -> tuple[float, float]:
    return tuple(np.linalg.solve([[1.0, -0.5], [-0.5, 1.0]], [1.0, 0.0]))


# -- time base -------------------------------------------------------------------------

def test_fraction_parsing_and_lcm():
    assert as_fraction("0.1") == Fraction(1, 10)
    assert as_fraction(0.1) == Fraction(1, 10)
    assert lcm_fractions([Fraction(1, 100), Fraction(1, 40)]) == Fraction(1, 20)
    assert lcm_fractions([Fraction(3, 10), Fraction(1, 5)]) == Fraction(3, 5)


@given(st.lists(st.integers(1, 50), min_size=1, max_size=4), st.integers(1, 1000))
def test_lcm_is_a_common_multiple(nums, den):
    steps = [Fraction(n, den) for n in nums]
    m = lcm_fractions(steps)
    assert all((m / s).denominator == 1 for s in steps)
    # and the least one: no proper divisor of m is a common multiple
    for p in (2, 3, 5, 7):
        assert not all(((m / p) / s).denominator == 1 for s in steps)


def test_sync_interval_and_sample_times():
    sc = Scenario("0.1")
    sc.add_federate("a", "polynomial", "0.02", {"c1": 1.0})
    sc.add_federate("b", "polynomial", "0.05", {"c1": 1.0})
    assert sync_interval(sc) == Fraction(1, 10)
    store = run(sc)
    assert store.get("a", "y").times == [0.0, 0.1]
    assert store.get("a", "y").values == pytest.approx([0.0, 0.1])


def test_explicit_sync_interval_must_be_a_multiple():
    sc = Scenario("1", sync_interval="0.25")
    sc.add_federate("a", "polynomial", "0.1")
    with pytest.raises(ScenarioError):
        run(sc)


def test_derive_seed_formula():
    assert derive_seed(42, "comm") == (42 * 1_000_003 + zlib.crc32(b"comm")) % 2**63
    assert derive_seed(1, "a") != derive_seed(1, "b")


# -- scenario construction ---------------------------------------------------------------

def test_connect_checks_causality_types_and_fan_in():
    sc = Scenario(1)
    sc.add_federate("src", "event_schedule", "0.1")
    sc.add_federate("g", "gain", "0.1")
    with pytest.raises(CausalityError):
        sc.connect(("g", "u"), ("g", "y"))
    with pytest.raises(TypeMismatch):
        sc.connect(("src", "on"), ("g", "u"))
    with pytest.raises(ScenarioError):
        sc.connect(("nope", "y"), ("g", "u"))
    with pytest.raises(ScenarioError):
        sc.connect(("src", "value"), ("g", "u"), "sideways")
    sc.connect(("src", "value"), ("g", "u"))
    with pytest.raises(ScenarioError):
        sc.connect(("src", "value"), ("g", "u"), "time_shifted")


def test_add_federate_validation():
    sc = Scenario(1)
    sc.add_federate("a", "gain", "0.1")
    with pytest.raises(ScenarioError):
        sc.add_federate("a", "gain", "0.1")
    with pytest.raises(ScenarioError):
        sc.add_federate("b", "gain", "0")
    with pytest.raises(ScenarioError):
        sc.add_federate("c", "gain", "0.1", {"kk": 1.0})
    with pytest.raises(ScenarioError):
        Scenario(-1)
    with pytest.raises(ScenarioError):
        Scenario(1, seed=-3)


def test_direct_cycle_rejected_at_connect_time():
    sc = Scenario(1)
    for n in ("a", "b", "c"):
        sc.add_federate(n, "gain", "0.1")
    sc.connect(("a", "y"), ("b", "u"))
    sc.connect(("b", "y"), ("c", "u"))
    with pytest.raises(CycleError) as err:
        sc.connect(("c", "y"), ("a", "u"))
    assert tuple(err.value.members) == ("a", "b", "c")
    # the same edge is fine when it is not direct
    sc.connect(("c", "y"), ("a", "u"), "time_shifted")
    assert build_schedule(sc).order == ("a", "b", "c")


def test_direct_self_loop_is_unresolved():
    sc = Scenario(1)
    sc.add_federate("a", "affine", "0.1")
    with pytest.raises(CycleError):
        sc.connect(("a", "y"), ("a", "u1"))


# -- scheduling --------------------------------------------------------------------------

def test_schedule_respects_direct_edges_and_groups_loops():
    sc = gain_loop()
    sc.add_federate("src", "polynomial", "0.1", {"c0": 2.0})
    sc.add_federate("sink", "gain", "0.1")
    sc.connect(("fx", "y"), ("sink", "u"))
    g = build_schedule(sc)
    assert g.loop_groups == (("fx", "fy"),)
    assert g.units() == [("fx", "fy"), ("sink",), ("src",)]
    assert g.order.index("fx") < g.order.index("sink")


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), max_size=12))
@settings(max_examples=60, deadline=None)
def test_schedule_is_a_topological_order(pairs):
    sc = Scenario(1)
    for i in range(6):
        sc.add_federate(f"n{i}", "affine", "0.1")
    used: dict[str, int] = {}
    for a, b in pairs:
        if a >= b:
            continue  # keep the direct graph acyclic
        port = used.get(f"n{b}", 0) + 1
        if port > 3:
            continue
        used[f"n{b}"] = port
        sc.connect((f"n{a}", "y"), (f"n{b}", f"u{port}"))
    g = build_schedule(sc)
    pos = {n: i for i, n in enumerate(g.order)}
    assert sorted(g.order) == sorted(sc.federates)
    assert all(pos[a] < pos[b] for a, b in g.edges)
    assert g.loop_groups == ()


def test_loop_members_need_rollback():
    class NoRollback(CSFederate):
        def __init__(self):
            super().__init__(describe("nr", inputs=["u"], outputs=["y"]))

        def step(self, t, h):
            self["y"] = self["u"]
            return Status.OK

    sc = Scenario(1)
    sc.add_federate("a", NoRollback(), "0.1")
    sc.add_federate("b", "gain", "0.1")
    sc.connect(("a", "y"), ("b", "u"), "iterative")
    sc.connect(("b", "y"), ("a", "u"), "iterative")
    with pytest.raises(ScenarioError):
        build_schedule(sc)


# -- loop iteration ------------------------------------------------------------------------

def test_loop_converges_to_the_fixed_point():
    x, y = loop_fixed_point()
    store = run(gain_loop())
    for t, v in store.get("fx", "y"):
        assert v == pytest.approx(x, abs=1e-8)
    for t, v in store.get("fy", "y"):
        assert v == pytest.approx(y, abs=1e-8)
    assert store.max_iterations() <= 15
    assert all(r.residuals[-1] < 1e-9 for r in store.iterations)


def test_quoted_values_are_not_a_fixed_point():
    # (1.6, 0.8) violates x = 0.5*y + 1; the fixed point is (4/3, 2/3)
    assert 0.5 * 0.8 + 1 != pytest.approx(1.6)
    assert loop_fixed_point() == pytest.approx((4 / 3, 2 / 3))


def test_loop_iteration_count_is_contraction_bound():
    # each sweep shrinks the error by 1/4, so 1e-9 from an O(1) start takes ~15 sweeps
    store = run(gain_loop(stop=0.0))
    rec = store.iterations[0]
    ratios = [b / a for a, b in zip(rec.residuals[1:], rec.residuals[2:]) if a > 0]
    assert all(r == pytest.approx(0.25, rel=1e-3) for r in ratios[:-1])


def test_loop_without_convergence_raises():
    sc = Scenario(0.1, epsilon=1e-9, max_iterations=5)
    sc.add_federate("fx", "gain", "0.1", {"k": 0.5, "b": 1.0})
    sc.add_federate("fy", "gain", "0.1", {"k": 0.5})
    sc.connect(("fy", "y"), ("fx", "u"), "iterative")
    sc.connect(("fx", "y"), ("fy", "u"), "iterative")
    with pytest.raises(ConvergenceFailure) as err:
        run(sc)
    assert err.value.iterations == 5


def test_time_shifted_uses_previous_point():
    sc = Scenario("0.3")
    sc.add_federate("p", "polynomial", "0.1", {"c1": 1.0})
    sc.add_federate("g", "gain", "0.1")
    sc.add_federate("h", "gain", "0.1")
    sc.connect(("p", "y"), ("g", "u"), "time_shifted", initial=-1.0)
    sc.connect(("p", "y"), ("h", "u"), "direct")
    store = run(sc)
    assert store.get("g", "y").values == pytest.approx([-1.0, 0.0, 0.1, 0.2])
    assert store.get("h", "y").values == pytest.approx([0.0, 0.1, 0.2, 0.3])


def test_capsuled_decay_through_the_master():
    sc = Scenario("1")
    sc.add_federate("d", "decay", "0.1", {"rate": 2.0}, internal_step=0.001)
    store = run(sc)
    for t, v in store.get("d", "x"):
        assert v == pytest.approx(exp_decay(1.0, 2.0, t), rel=1e-9)


def test_federate_errors_are_wrapped():
    sc = Scenario("0.2")
    sc.add_federate("c", "comm_delay", "0.1", {"mu": -1.0})
    with pytest.raises(FederateError) as err:
        run(sc)
    assert err.value.instance_id == "c"


# -- determinism and results ---------------------------------------------------------------

def _noisy(seed):
    sc = Scenario("0.5", seed=seed)
    sc.add_federate("p", "polynomial", "0.01", {"c1": 1.0})
    sc.add_federate("c", "comm_delay", "0.01")
    sc.connect(("p", "y"), ("c", "u"))
    return run(sc)


def test_runs_are_reproducible(tmp_path):
    digests = []
    for sub in ("a", "b"):
        paths = _noisy(11).to_csv(tmp_path / sub)
        digests.append([hashlib.sha256(p.read_bytes()).hexdigest() for p in paths])
    assert digests[0] == digests[1]
    assert _noisy(12).get("c", "last_delay").values != _noisy(11).get("c", "last_delay").values


def test_csv_round_trip(tmp_path):
    store = _noisy(3)
    paths = store.to_csv(tmp_path, prefix="run_")
    assert [p.name for p in paths] == ["run_c.csv", "run_p.csv"]
    header = paths[0].read_text().splitlines()[0]
    assert header == "t,last_delay,y"
    back = ResultStore.from_csv({"c": paths[0], "p": paths[1]})
    for key, series in store.series.items():
        assert back.series[key].times == series.times
        assert back.series[key].values == series.values  # repr keeps floats exact


@given(st.one_of(st.booleans(), st.integers(-10**6, 10**6), st.floats(allow_nan=False, allow_infinity=False)))
def test_format_parse_value(v):
    back = parse_value(format_value(v))
    assert back == v


def test_time_series_rules():
    ts = TimeSeries()
    ts.append(0.0, 1)
    with pytest.raises(Exception):
        ts.append(0.0, 2)
    assert ts.at(0.0) == 1
    with pytest.raises(KeyError):
        ts.at(1.0)
    with pytest.raises(KeyError):
        ResultStore().get("a", "b")


# -- plans ----------------------------------------------------------------------------------

def test_substitute():
    b = {"x": "8", "y": 0.3}
    assert substitute("$y", b) == 0.3
    assert substitute("$t0:1 $y:0", {"t0": 0.1, "y": 0.3}) == "0.1:1 0.3:0"
    assert substitute({"a": ["$x", 1]}, b) == {"a": ["8", 1]}
    with pytest.raises(ScenarioError):
        substitute("$zz", b)
    with pytest.raises(ScenarioError):
        substitute("at $zz", b)


def test_scenario_from_plan():
    plan = {
        "stop_time": "$T",
        "federates": [
            {"id": "fy", "model": "gain", "step_size": "0.1", "params": {"k": 0.5}},
            {"id": "fx", "model": "gain", "step_size": "0.1", "params": {"k": 0.5, "b": 1.0}},
        ],
        "connections": [
            {"source": ["fy", "y"], "target": ["fx", "u"], "mode": "iterative"},
            {"source": ["fx", "y"], "target": ["fy", "u"], "mode": "iterative"},
        ],
        "epsilon": 1e-9,
    }
    sc = scenario_from_plan(plan, {"T": 0.2})
    assert list(sc.federates) == ["fx", "fy"]
    store = run(sc)
    assert store.get("fx", "y").values[-1] == pytest.approx(4 / 3)

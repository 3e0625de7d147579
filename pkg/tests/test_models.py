from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cosim.errors import CosimError, ScenarioError
from cosim.federate import Kind
from cosim.models import MODELS, create, description, model_entry
from cosim.models.delay import CommDelay, draw_delays
from cosim.models.frt import FRTController, FRTEnvelope, fsm_transition
from cosim.models.qv import DEFAULT_CURVE, QVController, QVCurve
from cosim.models.sources import Equivalent, EventSchedule, parse_schedule
from cosim.models.wtg import FRT_ACTIVE, NORMAL, TRIPPED, WTGModel, limit_current
from oracles import envelope_limit, qv_reference

volts = st.floats(0.0, 1.3, allow_nan=False)


# -- registry ------------------------------------------------------------------------

def test_registry_creates_every_model():
    for name in MODELS:
        fed = create(name)
        assert fed.description.model_name == name
        assert fed.kind is Kind.CS  # ME models come capsuled
    with pytest.raises(ScenarioError):
        model_entry("nope")


def test_equivalent_description_follows_params():
    md = description("equivalent", {"outputs": "a=1.5 b", "inputs": "c"})
    assert md.outputs == ["a", "b"] and md.inputs == ["c"]
    eq = Equivalent("a=1.5", "c")
    eq.initialize()
    eq.set("c", 3.0)
    eq.do_step(0.0, 1.0)
    assert eq.get("a") == 1.5


# -- FRT envelope and FSM ------------------------------------------------------------

def test_envelope_shape():
    env = FRTEnvelope(u_ret=0.15, u_clear=0.7, u_final=0.9, t_clear=0.25, t_rec3=1.5)
    assert env.limit(-0.01) == -np.inf
    assert env.limit(0.0) == 0.15
    assert env.limit(0.2499999) == 0.15
    assert env.limit(0.25) == 0.7  # the jump belongs to the recovery side
    assert env.limit(0.875) == pytest.approx(0.8)
    assert env.limit(10.0) == 0.9
    assert env.anchors == [(0.0, 0.15), (0.25, 0.7), (1.5, 0.9)]


@pytest.mark.parametrize(
    "kwargs",
    [
        {"t_clear": 0.0},
        {"t_clear": 2.0, "t_rec3": 1.5},
        {"u_ret": 0.95},
        {"u_clear": 0.95, "u_final": 0.9},
        {"recovery": ((0.5, 0.95), (1.0, 0.92)), "u_final": 0.99},
    ],
)
def test_envelope_rejects_bad_shapes(kwargs):
    with pytest.raises(CosimError):
        FRTEnvelope(**kwargs)


def test_envelope_dict_round_trip():
    env = FRTEnvelope(u_clear=0.5, recovery=((0.5, 0.7), (1.0, 0.85)))
    assert FRTEnvelope.from_dict(env.to_dict()) == env
    with pytest.raises(CosimError):
        FRTEnvelope.from_dict({"u_rett": 0.1})


@given(st.floats(-0.5, 3.0), st.floats(0.0, 0.3), st.floats(0.3, 0.9), st.floats(0.05, 0.5))
@settings(max_examples=200, deadline=None)
def test_envelope_limit_matches_oracle(tau, u_ret, u_clear, t_clear):
    env = FRTEnvelope(u_ret=u_ret, u_clear=u_clear, u_final=0.95, t_clear=t_clear, t_rec3=t_clear + 1.0,
                      recovery=((t_clear + 0.4, (u_clear + 0.95) / 2),))
    tau = round(tau, 9)
    assert env.limit(tau) == pytest.approx(envelope_limit(tau, env.to_dict()), abs=1e-12)


@given(st.sampled_from([NORMAL, FRT_ACTIVE, TRIPPED]), volts)
def test_fsm_is_total_and_tripped_absorbs(state, u):
    new = fsm_transition(state, u, 0.15, 0.9, 0.02)
    assert new in (NORMAL, FRT_ACTIVE, TRIPPED)
    if state == TRIPPED or u < 0.15:
        assert new == TRIPPED


def test_fsm_hysteresis():
    assert fsm_transition(NORMAL, 0.89, 0.15, 0.9, 0.02) == FRT_ACTIVE
    assert fsm_transition(FRT_ACTIVE, 0.91, 0.15, 0.9, 0.02) == FRT_ACTIVE
    assert fsm_transition(FRT_ACTIVE, 0.92, 0.15, 0.9, 0.02) == NORMAL
    assert fsm_transition(NORMAL, 0.9, 0.15, 0.9, 0.02) == NORMAL


def test_frt_controller_boost_and_trip():
    c = FRTController()
    c.initialize(0.0, {"k_q": 2.0})
    c.set("U_PCC", 0.5)
    c.do_step(0.0, 0.01)
    assert c.get("state") == FRT_ACTIVE
    assert c.get("iq_boost") == pytest.approx(0.8)
    assert c["entered_at"] == pytest.approx(0.01)
    c.set("U_PCC", 0.1)
    c.do_step(0.01, 0.01)
    assert c.get("state") == TRIPPED and c.get("trip") is True and c.get("iq_boost") == 0.0
    c.set("U_PCC", 1.0)
    c.do_step(0.02, 0.01)
    assert c.get("state") == TRIPPED


def test_frt_controller_rejects_bad_thresholds():
    with pytest.raises(CosimError):
        FRTController().initialize(0.0, {"u_ret": 0.95})


# -- Q(V) -------------------------------------------------------------------------------

@given(volts)
def test_qv_curve_matches_oracle(v):
    curve = QVCurve.parse(DEFAULT_CURVE)
    assert curve(v) == pytest.approx(qv_reference(v, curve.points), abs=1e-12)


def test_qv_curve_parse_and_format():
    c = QVCurve.parse("0.9:0.2, 1.1:-0.2")
    assert c.points == ((0.9, 0.2), (1.1, -0.2))
    assert QVCurve.parse(c.format()) == c
    assert QVCurve.parse([[0.9, 0.2], [1.1, -0.2]]) == c
    for bad in ("0.9", "x:y", "1.0:0 0.9:0.1", "0.9:0 1.0:0.1"):
        with pytest.raises(CosimError):
            QVCurve.parse(bad)


def test_qv_controller_holds_during_frt():
    c = QVController()
    c.initialize(0.0)
    c.set("U_PCC", 0.95)
    c.do_step(0.0, 0.01)
    held = c.get("Q_ref")
    assert held == pytest.approx(0.15)
    c.set("frt_state", FRT_ACTIVE)
    c.set("U_PCC", 0.5)
    c.do_step(0.01, 0.01)
    assert c.get("Q_ref") == held


# -- communication delay ---------------------------------------------------------------

def test_zero_sigma_is_an_exact_shift():
    d = CommDelay()
    d.initialize(0.0, {"mu": 0.03, "sigma": 0.0})
    out = []
    for k in range(20):
        d.set("u", float(k >= 5))
        d.do_step(k * 0.01, 0.01)
        out.append(d.get("y"))
    # the change sent at t=0.06 arrives at 0.09
    assert out.index(1.0) == 8
    assert set(d.delays) == {0.03}


def test_delay_statistics():
    x = draw_delays(np.random.default_rng(7), 10_000, 0.010, 0.002)
    assert abs(x.mean() - 0.010) <= 0.06e-3
    assert abs(x.std(ddof=1) - 0.002) <= 0.05e-3
    assert draw_delays(np.random.default_rng(7), 10, 0.001, 0.01, d_min=0.0).min() >= 0.0


def test_delay_rng_state_survives_rollback():
    d = CommDelay()
    d.initialize(0.0)
    d.seed(3)
    snap = d.snapshot()
    d.set("u", 1.0)
    d.do_step(0.0, 0.01)
    first = d.delays[-1]
    d.restore(snap)
    assert d.delays == []
    d.set("u", 1.0)
    d.do_step(0.0, 0.01)
    assert d.delays == [first]


def test_delay_keeps_message_order_on_overtaking():
    d = CommDelay()
    d.initialize(0.0, {"mu": 0.05, "sigma": 0.0})
    d.set("u", 1.0)
    d.do_step(0.0, 0.01)
    d.set("u", 2.0)
    d.do_step(0.01, 0.01)
    for k in range(2, 10):
        d.do_step(k * 0.01, 0.01)
    assert d.get("y") == 2.0


def test_delay_parameter_checks():
    with pytest.raises(CosimError):
        CommDelay().initialize(0.0, {"mu": 0.0})
    with pytest.raises(CosimError):
        CommDelay().initialize(0.0, {"sigma": -1.0})


# -- events ------------------------------------------------------------------------------

def test_event_schedule():
    e = EventSchedule()
    e.initialize(0.0, {"events": "0.1:true 0.3:false"})
    seen = []
    for k in range(5):
        e.do_step(k * 0.1, 0.1)
        seen.append(e.get("on"))
    assert seen == [True, True, False, False, False]
    assert parse_schedule("0:1, 1:2.5") == [(0.0, 1.0), (1.0, 2.5)]
    for bad in ("0.1", "a:1", "0.2:1 0.1:0"):
        with pytest.raises(CosimError):
            parse_schedule(bad)


# -- wind turbine ---------------------------------------------------------------------------

@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 2.0), st.booleans())
def test_limit_current_stays_in_disc(i_d, i_q, i_max, q_priority):
    d, q = limit_current(i_d, i_q, i_max, q_priority)
    assert np.hypot(d, q) <= i_max * (1 + 1e-12)
    if np.hypot(i_d, i_q) <= i_max:
        assert (d, q) == pytest.approx((i_d, i_q))
    if q_priority:
        assert q == pytest.approx(max(-i_max, min(i_max, i_q)))


def test_wtg_references_by_state():
    w = WTGModel()
    w.initialize(0.0)
    w.set("V_pcc", 0.5)
    w.set("iq_boost", 0.8)
    assert w.references() == pytest.approx((1.1, 0.0))  # 1.2 pu of active current, radially limited
    w.set("frt_state", FRT_ACTIVE)
    d, q = w.references()
    assert q == pytest.approx(0.8) and d == pytest.approx(np.sqrt(1.1**2 - 0.64))
    w.set("frt_state", TRIPPED)
    assert w.references() == (0.0, 0.0)


def test_wtg_first_order_lag():
    cap = create("wtg", internal_step=0.001)
    cap.initialize(0.0)
    cap.set("Q_ref", 0.2)
    cap.do_step(0.0, 0.02)  # one time constant
    assert cap.get("I_q") == pytest.approx(0.2 * (1 - np.exp(-1)), rel=1e-6)


# -- grid ------------------------------------------------------------------------------------

def test_grid_fault_and_reactive_support():
    g = create("grid")
    g.initialize(0.0, {"fault_location": "8"})
    u0 = g.get("U_PCC")
    g.set("i_d", 0.6)
    g.do_step(0.0, 0.01)
    assert g.get("P_PCC") == pytest.approx(0.6 * g.get("U_WTG"), rel=0.02)
    g.set("fault", True)
    g.do_step(0.01, 0.01)
    u_fault = g.get("U_PCC")
    assert u_fault < 0.7 < u0
    g.set("i_q", 0.5)
    g.do_step(0.02, 0.01)
    assert g.get("U_PCC") > u_fault


def test_grid_fault_without_location_is_an_error():
    g = create("grid")
    g.initialize(0.0)
    g.set("fault", True)
    with pytest.raises(CosimError):
        g.do_step(0.0, 0.01)

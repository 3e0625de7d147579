"""Acceptance criteria 1 to 10, one line each in the terminal summary.

Every test records ``criterion N: PASS|FAIL  <what was checked>`` whether it
passes or not; the lines are printed at the end of the pytest run.
"""
from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, DATA, FIXTURES
from cosim.errors import CycleError, IllegalTransition
from cosim.master import Scenario, run
from cosim.models.delay import CommDelay
from cosim.models.frt import FRTEnvelope
from cosim.models.powerflow import network_from_dict, solve_power_flow
from cosim.models.wtg import TRIPPED
from cosim.schema import load_json
from cosim.sysconfig import container_from_dict, container_to_dict
from cosim.testrunner import PASS, assess_frt, emit_report, run_frt_campaign, trip_events, AssessmentConfig
from cosim.testspec import (
    STAGES,
    Stage,
    WorkflowState,
    advance_workflow,
    compile_experiment,
    experiment_to_dict,
    parse_experiment,
    parse_test_case,
    parse_test_spec,
    test_case_to_dict as case_to_dict,
    test_spec_to_dict as spec_to_dict,
    validate_document,
    validate_experiment,
)
from oracles import envelope_predicate, gauss_seidel_power_flow, linear_expm
from test_federate import decay_error
from test_master import gain_loop, loop_fixed_point
from test_testrunner import GRID, series, synthetic_trace


@contextmanager
def criterion(n: int | str, title: str):
    """Record a PASS or FAIL line for criterion ``n`` and re-raise failures."""
    try:
        yield
    except BaseException:
        line = f"criterion {n}: FAIL  {title}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"criterion {n}: PASS  {title}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def test_criterion_1_newton_raphson_matches_gauss_seidel():
    with criterion(1, "IEEE 9-bus NR vs Gauss-Seidel, |dV| <= 1e-6 pu, |dtheta| <= 1e-6 rad"):
        doc = load_json(DATA / "ieee9.json")
        nr = solve_power_flow(network_from_dict(doc))
        gs = gauss_seidel_power_flow(doc)
        dv = max(abs(abs(nr.voltage(b)) - abs(v)) for b, v in gs.items())
        da = max(abs(np.angle(nr.voltage(b)) - np.angle(v)) for b, v in gs.items())
        assert dv <= 1e-6 and da <= 1e-6, (dv, da)


def test_criterion_2_integrator_convergence_order():
    with criterion(2, "dx/dt=-x on [0,1], error ratio per halving: rk4 in [12,20], euler in [1.8,2.2]"):
        hs = [0.1, 0.05, 0.025, 0.0125]
        for integrator, low, high in (("rk4", 12.0, 20.0), ("euler", 1.8, 2.2)):
            errors = [decay_error(integrator, h) for h in hs]
            ratios = [a / b for a, b in zip(errors, errors[1:])]
            assert len(ratios) == 3
            assert all(low <= r <= high for r in ratios), (integrator, ratios)


def test_criterion_3_capsule_matches_matrix_exponential():
    with criterion(3, "MECapsule(rk4, dt/100) vs expm, relative error <= 1e-6 at every sync point"):
        dt, u = 0.1, 0.3
        p = {"a11": -0.5, "a12": 2.0, "a21": -2.0, "a22": -0.3, "b1": 1.0, "b2": -0.5, "x1_0": 1.0, "x2_0": -0.2}
        sc = Scenario("3")
        sc.add_federate("src", "polynomial", "0.1", {"c0": u})
        sc.add_federate("lin", "linear2", "0.1", p, integrator="rk4", internal_step=dt / 100)
        sc.connect(("src", "y"), ("lin", "u"))
        store = run(sc)
        A = [[p["a11"], p["a12"]], [p["a21"], p["a22"]]]
        x1, x2 = store.get("lin", "x1"), store.get("lin", "x2")
        assert len(x1.times) == 31
        for t, a, b in zip(x1.times, x1.values, x2.values):
            exact = linear_expm(A, [p["x1_0"], p["x2_0"]], [p["b1"], p["b2"]], u, t)
            rel = np.linalg.norm(np.array([a, b]) - exact) / np.linalg.norm(exact)
            assert rel <= 1e-6, (t, rel)


@pytest.mark.xfail(strict=True, reason="(1.6, 0.8) does not satisfy x = 0.5*y + 1; the fixed point is (4/3, 2/3)")
def test_criterion_4_loop_reaches_the_quoted_values():
    with criterion(4, "gain loop converges to the quoted (x, y) = (1.6, 0.8) [expected failure: not a fixed point]"):
        store = run(gain_loop())
        assert store.get("fx", "y").values[-1] == pytest.approx(1.6, abs=1e-8)
        assert store.get("fy", "y").values[-1] == pytest.approx(0.8, abs=1e-8)


def test_criterion_4_loop_converges_and_direct_cycle_is_rejected():
    with criterion("4*", "gain loop reaches the true fixed point (4/3, 2/3) in <= 15 iterations at eps=1e-9; direct cycle raises CycleError"):
        x, y = loop_fixed_point()
        assert (x, y) == pytest.approx((4 / 3, 2 / 3), abs=1e-15)
        store = run(gain_loop(epsilon=1e-9))
        assert all(v == pytest.approx(x, abs=1e-8) for v in store.get("fx", "y").values)
        assert all(v == pytest.approx(y, abs=1e-8) for v in store.get("fy", "y").values)
        assert 0 < store.max_iterations() <= 15
        sc = Scenario(0.3)
        sc.add_federate("fx", "gain", "0.1", {"k": 0.5, "b": 1.0})
        sc.add_federate("fy", "gain", "0.1", {"k": 0.5})
        sc.connect(("fy", "y"), ("fx", "u"))
        with pytest.raises(CycleError):
            sc.connect(("fx", "y"), ("fy", "u"))


def _digests(results, out, experiment, plan) -> dict[str, str]:
    config = AssessmentConfig.from_experiment(experiment.assessment, plan.t0)
    emit_report(results, out, config, plan, experiment.scenario_plan)
    return {p.relative_to(out).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.rglob("*.csv"))}


def test_criterion_5_campaigns_are_bit_reproducible(campaign, experiment, campaign_plan, tmp_path):
    with criterion(5, "two campaign runs with the same seed give identical CSV hashes"):
        first = _digests(campaign, tmp_path / "a", experiment, campaign_plan)
        # the second run goes through worker processes to rule out hidden per-process state
        second = _digests(run_frt_campaign(experiment, campaign_plan, workers=2), tmp_path / "b", experiment, campaign_plan)
        assert len(first) >= len(campaign) and first == second


def _min_u(result) -> float:
    return min(result.store.get("grid", "U_PCC").values)


def test_criterion_6_fault_ride_through_scenarios(campaign, experiment, campaign_plan):
    with criterion(6, "remote fault rides through; bolted PCC fault trips below U_ret and passes; k_q=0 never raises min U_PCC"):
        remote, bolted = campaign[0], campaign[1]
        # (a) a fault far from the plant, cleared before t_clear: no trip, pass
        assert not trip_events(remote.store.get("frt", "trip"))
        assert {v.criterion: v.outcome for v in remote.verdicts}["frt-envelope"] == PASS
        # (b) bolted fault next to the PCC: U drops below U_ret, the unit trips, and the allowed disconnect passes
        trips = trip_events(bolted.store.get("frt", "trip"))
        assert trips and bolted.store.get("grid", "U_PCC").at(trips[0]) < 0.15
        assert bolted.store.get("frt", "state").values[-1] == TRIPPED
        assert {v.criterion: v.outcome for v in bolted.verdicts}["frt-envelope"] == PASS
        # (c) paired runs without reactive current boost
        no_boost = run_frt_campaign(experiment, campaign_plan, params={"frt.k_q": 0.0})
        for with_q, without_q in zip(campaign, no_boost):
            assert _min_u(without_q) <= _min_u(with_q), with_q.point


def test_criterion_7_assess_frt_matches_brute_force():
    with criterion(7, "assess_frt agrees with the brute-force predicate on 1000 random traces"):
        env = FRTEnvelope(u_ret=0.15, u_clear=0.9, u_final=0.9, t_clear=0.25, t_rec3=1.5)
        rng = np.random.default_rng(20240601)
        outcomes = []
        for _ in range(1000):
            u, trips = synthetic_trace(rng, env, 0.1)
            got = assess_frt(series(GRID, u), env, trips, 0.1).outcome == PASS
            want = envelope_predicate(GRID, u, trips, 0.1, env.to_dict())
            assert got == want
            outcomes.append(got)
        # both verdicts must be exercised for the agreement to mean anything
        assert 0 < sum(outcomes) < len(outcomes)


def test_criterion_8_delay_statistics_and_zero_sigma_shift():
    with criterion(8, "1e4 delays, mu=10 ms sigma=2 ms: |mean err| <= 0.06 ms, |std err| <= 0.05 ms; sigma=0 is an exact shift"):
        d = CommDelay()
        d.seed(8)
        d.initialize(0.0, {"mu": 0.010, "sigma": 0.002})
        for k in range(10_000):
            d.set("u", float(k))  # every step sends a new message
            d.do_step(k * 0.001, 0.001)
        x = np.array(d.delays)
        assert len(x) == 10_000
        assert abs(x.mean() - 0.010) <= 0.06e-3
        assert abs(x.std(ddof=1) - 0.002) <= 0.05e-3
        # with sigma = 0 the output is the input shifted by exactly mu
        sc = Scenario("1")
        sc.add_federate("src", "polynomial", "0.01", {"c1": 1.0})
        sc.add_federate("link", "comm_delay", "0.01", {"mu": 0.05, "sigma": 0.0})
        sc.connect(("src", "y"), ("link", "u"))
        store = run(sc)
        src, out = store.get("src", "y"), store.get("link", "y")
        shift = 5
        assert out.values[shift:] == src.values[: len(src.values) - shift]


def test_criterion_9_diagnostics_round_trips_and_revalidation():
    with criterion(9, "invalid corpus yields exactly the planted diagnostics; valid fixtures round-trip; compiled output re-validates"):
        manifest = json.loads((FIXTURES / "invalid" / "manifest.json").read_text())
        assert len(manifest) == 10
        for name, planted in manifest.items():
            report = validate_document(load_json(FIXTURES / "invalid" / name))
            assert [[d.object_id, d.code] for d in report] == planted, name
        for name in ("tc_gsc.json", "ts_sc.json", "ri_sc.json"):
            doc = load_json(DATA / name)
            assert validate_document(doc).ok
            assert container_to_dict(container_from_dict(doc)) == doc, name
        tc_doc = load_json(DATA / "test_case.json")
        assert case_to_dict(parse_test_case(tc_doc)) == tc_doc
        spec_doc = load_json(DATA / "test_spec.json")
        spec = parse_test_spec(spec_doc)
        assert parse_test_spec(json.loads(json.dumps(spec_to_dict(spec)))) == spec
        exp_doc = load_json(DATA / "experiment.json")
        assert experiment_to_dict(parse_experiment(exp_doc)) == exp_doc
        compiled = compile_experiment(spec, container_from_dict(load_json(DATA / "ri_sc.json")))
        assert validate_experiment(compiled).ok
        assert validate_document(json.loads(json.dumps(experiment_to_dict(compiled)))).ok


def test_criterion_10_workflow_transitions():
    with criterion(10, "Evaluation is reached from TestCase in exactly 6 proceeds; loop_back only at PreAssessment"):
        s = WorkflowState()
        assert s.stage is Stage.TEST_CASE
        steps = 0
        while s.stage is not Stage.EVALUATION:
            s = advance_workflow(s, "proceed")
            steps += 1
        assert steps == 6
        s = WorkflowState()
        for stage in STAGES:
            assert s.stage is stage
            if stage is Stage.PRE_ASSESSMENT:
                assert advance_workflow(s, "loop_back").stage is Stage.TEST_SPEC
            else:
                with pytest.raises(IllegalTransition):
                    advance_workflow(s, "loop_back")
            if stage is not Stage.EVALUATION:
                s = advance_workflow(s, "proceed")

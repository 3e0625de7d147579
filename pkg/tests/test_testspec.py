from __future__ import annotations

import copy
import json

import pytest
from hypothesis import given, strategies as st

from cosim.errors import (
    CosimError,
    DanglingReference,
    IllegalTransition,
    InfeasibleMapping,
    InvalidSpecification,
    InvariantViolation,
)
from cosim.master import build_schedule, scenario_from_plan
from cosim.schema import load_json
from cosim.sysconfig import container_from_dict
from cosim.testspec import (
    STAGES,
    Stage,
    WorkflowState,
    advance_workflow,
    compile_experiment,
    document_kind,
    experiment_to_dict,
    parse_experiment,
    parse_test_case,
    parse_test_spec,
    resolve_name,
    validate_document,
    validate_experiment,
    validate_test_specification,
)
from cosim.testspec import test_case_to_dict as case_to_dict
from cosim.testspec import test_spec_to_dict as spec_to_dict
from conftest import DATA, FIXTURES


@pytest.fixture(scope="module")
def spec_doc():
    return load_json(DATA / "test_spec.json")


@pytest.fixture(scope="module")
def spec(spec_doc):
    return parse_test_spec(spec_doc)


@pytest.fixture(scope="module")
def ri(data_dir):
    return container_from_dict(load_json(data_dir / "ri_sc.json"))


# -- the worked example as described -------------------------------------------------------

def test_test_case_encodes_the_wind_plant_example(spec):
    tc = spec.test_case
    # functions under test: FRT capability and reactive power control
    assert set(tc.fut) == {"frt", "q_control"}
    # purpose of investigation is validation, the object under investigation includes the FRT controller
    assert {p.kind for p in tc.poi} == {"validation"}
    assert "frt" in tc.oui and set(tc.oui) <= set(tc.sut)
    assert "tx_grid" not in tc.sut  # the transmission grid is the environment
    assert [c.id for c in tc.criteria] == ["frt-envelope", "qv-tracking"]


def test_test_system_hosts_the_plant_on_the_nine_bus_grid(spec):
    grid = spec.test_system.component("tx_grid")
    assert grid.attributes["network"].startswith("ieee9")


# -- round trips ------------------------------------------------------------------------------

def test_test_case_round_trip(spec_doc):
    tc = parse_test_case(spec_doc["test_case"])
    again = case_to_dict(tc)
    assert parse_test_case(again) == tc
    assert case_to_dict(parse_test_case(again)) == again


def test_test_spec_round_trip(spec):
    doc = spec_to_dict(spec)
    assert parse_test_spec(doc) == spec
    assert spec_to_dict(parse_test_spec(json.loads(json.dumps(doc)))) == doc


def test_experiment_round_trip(data_dir):
    exp = parse_experiment(load_json(data_dir / "experiment.json"))
    doc = experiment_to_dict(exp)
    assert parse_experiment(json.loads(json.dumps(doc))) == exp


# -- validation ---------------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["tc_gsc.json", "ts_sc.json", "test_case.json", "test_spec.json", "ri_sc.json", "experiment.json"])
def test_valid_documents_have_no_diagnostics(data_dir, name):
    report = validate_document(load_json(data_dir / name))
    assert report.ok and len(report) == 0, report.lines()


MANIFEST = json.loads((FIXTURES / "invalid" / "manifest.json").read_text())


@pytest.mark.parametrize("name", sorted(MANIFEST))
def test_invalid_fixture_yields_exactly_its_planted_diagnostics(name):
    report = validate_document(load_json(FIXTURES / "invalid" / name))
    assert [[d.object_id, d.code] for d in report] == MANIFEST[name]
    assert not report.ok


def test_invalid_corpus_size():
    assert len(MANIFEST) == 10
    assert len({code for diags in MANIFEST.values() for _, code in diags}) == 10


def test_parse_test_case_raises_on_invariants(spec_doc):
    doc = copy.deepcopy(spec_doc["test_case"])
    doc["oui"].append("tx_grid")
    with pytest.raises(InvariantViolation) as err:
        parse_test_case(doc)
    assert err.value.rule == "oui ⊆ sut"
    doc = copy.deepcopy(spec_doc["test_case"])
    doc["sut"].append("ghost")
    with pytest.raises(DanglingReference):
        parse_test_case(doc)


def test_schema_errors_become_diagnostics(spec_doc):
    doc = copy.deepcopy(spec_doc["test_case"])
    del doc["sut"]
    assert validate_document(doc).codes == ["SCHEMA"]
    with pytest.raises(CosimError):
        document_kind({"what": 1})


@pytest.mark.parametrize(
    "step,fragment",
    [
        ({"op": "wait_until"}, "needs"),
        ({"op": "wait_until", "t": -1}, "positive"),
        ({"op": "set_parameter", "target": "tx_grid.nope", "value": 1}, "tx_grid"),
        ({"op": "set_parameter", "target": "frt.U_PCC", "value": 1}, "not an attribute"),
        ({"op": "apply_event", "target": "tx_grid.U_PCC", "at": 0.1, "value": True}, "not an input signal"),
        ({"op": "assess", "criteria": ["nope"]}, "unknown criterion"),
        ({"op": "sweep", "over": ["z"]}, "undeclared"),
        ({"op": "wait_until", "t": "$q"}, "unknown symbol"),
    ],
)
def test_step_diagnostics(spec_doc, step, fragment):
    doc = copy.deepcopy(spec_doc)
    doc["test_design"].append(step)
    report = validate_test_specification(parse_test_spec(doc))
    assert report.codes == ["TS-STEP"]
    assert fragment in report[0].message


def test_resolve_name(spec):
    ts = spec.test_system
    assert resolve_name(ts, "tx_grid.fault_location").kind == "attribute"
    r = resolve_name(ts, "tx_grid.U_PCC")
    assert (r.kind, r.direction) == ("signal", "out")
    with pytest.raises(DanglingReference):
        resolve_name(ts, "U_PCC")  # produced on several terminals
    with pytest.raises(DanglingReference):
        resolve_name(ts, "nothing")


# -- compilation ---------------------------------------------------------------------------------

def test_compile_reproduces_the_shipped_experiment(spec, ri, data_dir):
    exp = compile_experiment(spec, ri)
    assert experiment_to_dict(exp) == load_json(data_dir / "experiment.json")


def test_compiled_experiment_revalidates(spec, ri):
    exp = compile_experiment(spec, ri)
    assert validate_experiment(exp).ok
    assert validate_document(experiment_to_dict(exp)).ok


def test_compiled_plan_structure(spec, ri):
    exp = compile_experiment(spec, ri)
    plan = exp.scenario_plan
    feds = {f["id"]: f for f in plan["federates"]}
    assert feds["grid"]["components"] == ["coll_grid", "tx_grid"]
    assert feds["grid"]["params"]["fault_location"] == "$x"
    assert feds["events_tx_grid_fault"]["params"]["events"] == "$t0:1 $y:0"
    assert plan["stop_time"] == 2.5
    assert exp.assessment["events"] == ["$t0", "$y"]
    modes = {(tuple(c["source"]), tuple(c["target"])): c["mode"] for c in plan["connections"]}
    assert modes[(("grid", "U_PCC"), ("wtg", "V_pcc"))] == "iterative"
    sc = scenario_from_plan(plan, {"x": "8", "y": 0.3, "t0": 0.1})
    assert build_schedule(sc).loop_groups == (("wtg", "grid"),)


def test_compile_with_missing_capability_is_infeasible(spec, data_dir):
    ri = container_from_dict(load_json(data_dir / "ri_sc_nocomm.json"))
    with pytest.raises(InfeasibleMapping) as err:
        compile_experiment(spec, ri)
    assert tuple(err.value.core) == ("comm",)


def test_compile_rejects_invalid_specifications(spec_doc, ri):
    doc = copy.deepcopy(spec_doc)
    doc["outputs"].append({"name": "tx_grid.nope"})
    with pytest.raises(InvalidSpecification) as err:
        compile_experiment(parse_test_spec(doc), ri)
    assert [d.code for d in err.value.diagnostics] == ["TS-OUTPUT"]


def test_step_override(spec, ri):
    exp = compile_experiment(spec, ri, step_size=0.02)
    assert {f["step_size"] for f in exp.scenario_plan["federates"]} == {"0.02"}


# -- workflow -------------------------------------------------------------------------------------

def test_workflow_reaches_evaluation_in_six_steps():
    s = WorkflowState()
    assert s.stage is Stage.TEST_CASE and s.number == 1
    for n in range(2, 8):
        s = advance_workflow(s, "proceed")
        assert s.number == n
    assert s.stage is Stage.EVALUATION
    with pytest.raises(IllegalTransition):
        advance_workflow(s, "proceed")


def test_loop_back_only_from_pre_assessment():
    s = WorkflowState()
    for stage in STAGES:
        if stage is Stage.PRE_ASSESSMENT:
            assert advance_workflow(s, "loop_back").stage is Stage.TEST_SPEC
        else:
            with pytest.raises(IllegalTransition):
                advance_workflow(s, "loop_back")
        if stage is not Stage.EVALUATION:
            s = advance_workflow(s, "proceed")
    with pytest.raises(IllegalTransition):
        advance_workflow(WorkflowState(), "jump")


@given(st.lists(st.sampled_from(["proceed", "loop_back"]), max_size=30))
def test_workflow_state_round_trips_and_stays_in_range(events):
    s = WorkflowState()
    for e in events:
        try:
            s = advance_workflow(s, e)
        except IllegalTransition:
            continue
        assert 1 <= s.number <= 7
    assert WorkflowState.from_dict(json.loads(json.dumps(s.to_dict()))) == s

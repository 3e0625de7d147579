from __future__ import annotations

import sys
from pathlib import Path

import pytest

from cosim.schema import load_json

HERE = Path(__file__).parent
DATA = HERE.parent / "src" / "cosim" / "data"
FIXTURES = HERE / "fixtures"

sys.path.insert(0, str(HERE))


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture
def load():
    def _load(name: str):
        return load_json(DATA / name)
    return _load


@pytest.fixture(scope="session")
def experiment():
    from cosim.testspec import parse_experiment
    return parse_experiment(load_json(DATA / "experiment.json"))


@pytest.fixture(scope="session")
def campaign_plan():
    from cosim.testrunner import CampaignPlan
    return CampaignPlan.load(DATA / "plan.json")


@pytest.fixture(scope="session")
def campaign(experiment, campaign_plan):
    """The shipped four-point campaign, run once per test session."""
    from cosim.testrunner import run_frt_campaign
    return run_frt_campaign(experiment, campaign_plan)


# one line per acceptance criterion, collected by test_acceptance and echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import json
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SCENARIOS = os.path.join(ROOT, "scenarios")

# The 8-feature irrigation model exactly as listed in the parse example.
IRRIGATION_8 = {
    "name": "Irrigation",
    "root": {
        "name": "Fleet",
        "groups": [
            {
                "kind": "mandatory",
                "children": [
                    {
                        "name": "Sensing",
                        "groups": [
                            {"kind": "or", "children": [{"name": "SoilMoisture"}, {"name": "AirTemp"}, {"name": "Brightness"}]}
                        ],
                    }
                ],
            },
            {"kind": "alternative", "children": [{"name": "Sprinkler"}, {"name": "Tap"}]},
            {"kind": "optional", "children": [{"name": "Fertilizing"}]},
        ],
    },
    "constraints": [{"kind": "requires", "from": "Fertilizing", "to": "SoilMoisture"}],
    "capabilities": {"Sprinkler": ["water.sprinkle"], "Tap": ["water.tap"], "SoilMoisture": ["sense.soil"]},
}


@pytest.fixture
def irrigation8_text():
    return json.dumps(IRRIGATION_8)


@pytest.fixture
def scenario_path():
    return os.path.join(SCENARIOS, "irrigation.json")


@pytest.fixture
def scenario_data(scenario_path):
    with open(scenario_path, encoding="utf-8") as fh:
        return json.load(fh)


# -- acceptance reporting: one line per criterion ----------------------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[number] = (title, "PASS" if report.outcome == "passed" else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, verdict = _criteria[number]
        terminalreporter.write_line(f"[{verdict}] criterion {number}: {title}")

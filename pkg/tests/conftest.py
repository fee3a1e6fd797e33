import sys
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
SCENARIO_DIR = FIXTURES / "scenarios"
PIPELINE_DIR = FIXTURES / "pipeline"

CRITERIA = {
    1: "geometric oracle agreement",
    2: "PET scenario suite",
    3: "baseline domination",
    4: "published count comparison (external data)",
    5: "ordered-logit correctness",
    6: "simulated-ML reduction",
    7: "parameter recovery",
    8: "report arithmetic",
    9: "determinism",
    10: "signal snapshot correctness",
}
_outcomes: dict[int, list[str]] = {}


def pytest_addoption(parser):
    parser.addoption(
        "--citysim",
        default=None,
        help="path to the CitySim University@Alafaya trajectory CSV (enables criterion 4)",
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def citysim_path(request):
    return request.config.getoption("--citysim")


def pytest_runtest_logreport(report):
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    if report.when == "call" or report.outcome in ("failed", "skipped"):
        _outcomes.setdefault(marks, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        elif "failed" in results:
            status = "FAIL"
        elif all(r == "skipped" for r in results):
            status = "SKIP"
        else:
            status = "PASS"
        tr.write_line(f"criterion {n:>2} {status:<7} {name}")


sys.path.insert(0, str(Path(__file__).parent))

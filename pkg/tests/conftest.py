import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run long learning tests (minutes to hours on one core)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="long-running; pass --runslow to enable")
    for item in items:
        marker = item.get_closest_marker("slow")
        if marker is not None:
            item.add_marker(skip)
            if "criterion" in marker.kwargs:
                ACCEPTANCE_LINES.append(f"SKIP  {marker.kwargs['criterion']}: "
                                        "long-running, not run (pass --runslow)")


ACCEPTANCE_LINES: list[str] = []


class Criterion:
    """Records one acceptance line per criterion, then asserts/skips/xfails."""

    def __init__(self, name):
        self.name = name

    def _log(self, status, detail):
        line = f"{status:5} {self.name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    def check(self, ok, detail):
        self._log("PASS" if ok else "FAIL", detail)
        assert ok, f"{self.name}: {detail}"

    def skip(self, detail):
        self._log("SKIP", detail)
        pytest.skip(detail)

    def xfail(self, detail):
        self._log("XFAIL", detail)
        pytest.xfail(detail)


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

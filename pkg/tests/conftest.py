import pytest

from mvcascade import meanfield

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    return record


def pytest_collection_modifyitems(items):
    # the fixed-point criterion reads the residual monitor filled by everything else
    last = [i for i in items if i.name == "test_criterion_03_fixed_point_identity"]
    items[:] = [i for i in items if i not in last] + last


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
    st = meanfield.RESIDUAL_MONITOR
    if st["count"]:
        terminalreporter.write_line(
            f"cascade fixed-point residual over the session: max {st['max']:.3e} "
            f"across {st['count']} converged cascades")

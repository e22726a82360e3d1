import pytest
import torch

torch.set_num_threads(1)

# acceptance criterion -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def record_ac():
    def record(number: int, passed: bool, detail: str = ""):
        prev = ACCEPTANCE.get(number)
        ok = bool(passed) and (prev is None or prev[0])
        details = f"{prev[1]}; {detail}" if prev and prev[1] else detail
        ACCEPTANCE[number] = (ok, details)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"AC{n:<2} {'PASS' if ok else 'FAIL'}  {detail}")

"""Collects one verdict line per acceptance criterion and prints them at the end."""
import pytest

CRITERIA = [f"A{i}" for i in range(1, 9)]
VERDICTS: dict[str, str] = {}


def record(criterion, ok, detail):
    line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
    VERDICTS[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    ran = any(r.nodeid.startswith("tests/test_acceptance.py") or "test_acceptance.py" in r.nodeid
              for outcome in ("passed", "failed", "error") for r in terminalreporter.stats.get(outcome, []))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for c in CRITERIA:
        terminalreporter.write_line(VERDICTS.get(c, f"{c} FAIL: no verdict (test deselected or errored first)"))

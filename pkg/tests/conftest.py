import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

_ACCEPTANCE = {}


def record(number, passed, detail):
    _ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

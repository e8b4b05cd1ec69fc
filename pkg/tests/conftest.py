import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_results = {}


def record(n, ok, detail):
    _results[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        ok, detail = _results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

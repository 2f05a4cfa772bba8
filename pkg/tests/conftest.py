from __future__ import annotations

VERDICTS: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> str:
    line = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS[criterion] = line
    print(line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[k])

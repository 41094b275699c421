"""Shared pytest plumbing for the acceptance gate.

Acceptance tests register one line each through ``record_criterion``; the
terminal-summary hook prints the collected lines, sorted by number, after
the regular test report so the verdict block survives output capture.
"""

_LINES: dict[int, tuple[bool, str]] = {}


def record_criterion(num: int, ok: bool, line: str) -> None:
    _LINES[num] = (ok, line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _LINES:
        return
    terminalreporter.write_sep("=", "acceptance summary")
    for num in sorted(_LINES):
        ok, line = _LINES[num]
        terminalreporter.write_line(line, green=ok, red=not ok)

"""Prints one PASS/FAIL line per acceptance criterion at the end of the session."""

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            match = _CRITERION.search(getattr(report, "nodeid", ""))
            if not match or report.when not in ("call", "setup") or (outcome == "passed" and report.when != "call"):
                continue
            props = dict(report.user_properties)
            status = props.get("status", "PASS" if outcome == "passed" else "FAIL")
            detail = props.get("detail", "")
            name = match.group(2).replace("_", " ")
            lines.append((int(match.group(1)), f"criterion {int(match.group(1)):2d} {status:<4} {name}: {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

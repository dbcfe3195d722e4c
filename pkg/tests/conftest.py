"""Print one PASS/FAIL line per acceptance criterion at the end of the run."""

from __future__ import annotations


def pytest_terminal_summary(terminalreporter):
    outcomes: dict[str, bool] = {}
    for key in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(key, []):
            props = dict(getattr(report, "user_properties", ()))
            label = props.get("criterion")
            if label is None:
                continue
            ok = report.passed and key == "passed"
            outcomes[label] = outcomes.get(label, True) and ok
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(outcomes, key=lambda s: int(s.split()[0])):
        terminalreporter.write_line(f"criterion {label}: {'PASS' if outcomes[label] else 'FAIL'}")

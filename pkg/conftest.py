"""Prints one summary line per acceptance criterion at the end of a run."""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")

# criterion number -> list of (part name, outcome)
_results: dict[int, list[tuple[str, str]]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None:
        return
    num, name = int(m.group(1)), m.group(2)
    if report.when == "call" or (report.when == "setup" and report.skipped):
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _results.setdefault(num, []).append((name, outcome))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_results):
        parts = _results[num]
        name = parts[0][0].replace("_", " ")
        outcomes = {outcome for _, outcome in parts}
        if "FAIL" in outcomes:
            verdict = "FAIL"
        elif outcomes == {"SKIP"}:
            verdict = "SKIP"
        elif "SKIP" in outcomes:
            skipped = ", ".join(n for n, o in parts if o == "SKIP")
            verdict = f"PASS (skipped part: {skipped})"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"criterion {num} ({name}): {verdict}")

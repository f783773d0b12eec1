import re

# Acceptance tests are named test_criterion_<n><part>_<what>; after the run we
# fold their outcomes into one PASS/FAIL line per criterion number.
_NAME = re.compile(r"::test_criterion_(\d+)([a-z]?)_(\w+)")
_results: dict[int, list[tuple[str, str, str]]] = {}


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.skipped:
            outcome = "SKIP"
        else:
            outcome = "PASS" if report.passed else "FAIL"
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        _results.setdefault(int(m.group(1)), []).append((m.group(2) or m.group(3), outcome,
                                                        detail))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        parts = _results[n]
        outcomes = {o for _, o, _ in parts}
        verdict = "FAIL" if "FAIL" in outcomes else "SKIP" if outcomes == {"SKIP"} else "PASS"
        if len(parts) == 1:
            info = parts[0][2]
        else:
            info = " | ".join(f"{name} {o}: {d}" if d else f"{name} {o}" for name, o, d in parts)
        terminalreporter.write_line(f"criterion {n}: {verdict}  {info}".rstrip())

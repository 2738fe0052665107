import re

CRITERIA = {
    "ac1": "linear-Gaussian exactness",
    "ac2": "derivative correctness",
    "ac3": "MGF moment identities",
    "ac4": "posterior vs grid quadrature",
    "ac5": "covariance contraction",
    "ac6": "bandit experiment bands",
    "ac7": "drift stress",
    "ac8": "CLI determinism",
    "ac9": "univariate fast path",
}

_outcomes: dict[str, dict[str, list]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    m = re.match(r"test_(ac\d+)_", report.nodeid.rsplit("::", 1)[-1])
    if not m:
        return
    # [passed, seconds]; setup time counts because shared fixtures run the simulations
    entry = _outcomes.setdefault(m.group(1), {}).setdefault(report.nodeid, [True, 0.0])
    entry[1] += report.duration
    if report.failed or (report.when == "call" and not report.passed):
        entry[0] = False


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key, label in CRITERIA.items():
        runs = _outcomes.get(key)
        if runs is None:
            terminalreporter.write_line(f"{key.upper()} NOT RUN  {label}")
            continue
        ok = all(p for p, _ in runs.values())
        secs = sum(d for _, d in runs.values())
        terminalreporter.write_line(f"{key.upper()} {'PASS' if ok else 'FAIL'}  {label} ({len(runs)} tests, {secs:.1f}s)")

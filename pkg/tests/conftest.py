from collections import defaultdict

import pytest

CRITERIA = {
    1: "KD loss decomposition, lambda=1 and self-distillation limits",
    2: "analytic gradient vs central finite differences",
    3: "patch count formula vs exhaustive enumeration",
    4: "mAP equals brute-force oracle",
    5: "SVCCA self-similarity and affine invariance",
    6: "attention-distance analytics",
    7: "augmentation contracts and shipped defaults",
    8: "scheduler, weight averaging and ensemble identities",
    9: "end-to-end desk-scale pipeline and bitwise rerun",
    10: "consistent vs conventional teaching without augmentation",
    11: "multi-teacher weighting and ensemble collapse",
    12: "5-fold x 3-repeat cross-validation dry run",
}

_outcomes = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes[marker.args[0]].append((item.name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        results = _outcomes.get(n)
        if not results:
            continue
        failed = [name for name, outcome in results if outcome != "passed"]
        status = "FAIL" if failed else "PASS"
        line = f"criterion {n:2d} {status}: {CRITERIA[n]} ({len(results) - len(failed)}/{len(results)} checks)"
        if failed:
            line += f" failing: {', '.join(failed)}"
        terminalreporter.write_line(line)

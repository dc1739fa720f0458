"""Shared pytest configuration.

Tests marked with @pytest.mark.criterion(ident, title) get one summary
line each on the terminal, so a full run ends with a visible PASS/FAIL
verdict per gating property.
"""

import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(ident, title): gating property reported as one PASS/FAIL line",
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        ident = marker.args[0]
        title = marker.args[1] if len(marker.args) > 1 else ""
        report.user_properties.append(("criterion", (ident, title)))


def pytest_runtest_logreport(report):
    tagged = dict(report.user_properties).get("criterion")
    if tagged is None:
        return
    ident, title = tagged
    # the call phase carries the verdict; a broken setup also counts as FAIL
    if report.when == "call" or (report.when == "setup" and not report.passed):
        verdict = "PASS" if report.passed else "FAIL"
        print(f"\nACCEPTANCE {ident} {verdict}: {title}", flush=True)

import os

import pytest
from hypothesis import HealthCheck, settings

from workflows import and_split_spec, deadlock_spec, seq_spec, xor_spec

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.register_profile("ci", parent=settings.get_profile("default"), max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def specs():
    return {"seq": seq_spec(), "xor": xor_spec(), "and": and_split_spec(), "deadlock": deadlock_spec()}


# -- acceptance summary ---------------------------------------------------------

_acceptance: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[number] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        verdict, title, detail = _acceptance[number]
        line = f"criterion {number:2d}: {verdict}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)

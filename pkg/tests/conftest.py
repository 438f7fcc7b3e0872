"""Collects the acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.fixture
def criterion(request):
    """Registers the test as an acceptance criterion; call the result to attach a measurement."""
    marker = request.node.get_closest_marker("acceptance")
    request.node.user_properties.append(("acceptance", marker.args))

    def note(text):
        request.node.user_properties.append(("detail", str(text)))
    return note


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "acceptance" not in props:
        return
    if report.when == "call" or report.failed:
        n, title = props["acceptance"]
        if n in _RESULTS and _RESULTS[n][0] == "FAIL":
            return
        _RESULTS[n] = ("PASS" if report.passed else "FAIL", title, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        outcome, title, detail = _RESULTS[n]
        line = f"criterion {n}: {outcome} - {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))

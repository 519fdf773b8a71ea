import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            crit = dict(getattr(rep, "user_properties", ())).get("criterion")
            if crit is not None and rep.when in ("call", "setup") and (
                    rep.when == "call" or outcome != "passed"):
                lines.append((crit[0], "PASS" if outcome == "passed" else "FAIL", crit[1]))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number, verdict, title in sorted(lines):
            terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {title}")


@pytest.fixture(autouse=True)
def _record_criterion(request):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        request.node.user_properties.append(("criterion", tuple(marker.args)))
    yield

import sys


def pytest_terminal_summary(terminalreporter):
    """Replay the acceptance-gate lines where capture cannot hide them."""
    module = next((m for name, m in sys.modules.items()
                   if name.rpartition(".")[2] == "test_acceptance"
                   and getattr(m, "RESULTS", None)), None)
    if module is None:
        return
    terminalreporter.section("acceptance gate")
    for line in module.RESULTS:
        terminalreporter.write_line(line)

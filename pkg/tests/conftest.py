import time

SESSION_START = time.perf_counter()
CRITERIA: list[str] = []


def pytest_collection_modifyitems(session, config, items):
    # acceptance runs last so its runtime check sees (almost) the whole suite
    items.sort(key=lambda it: it.module.__name__.endswith("test_acceptance"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in CRITERIA:
        terminalreporter.write_line(line)
    terminalreporter.write_line(
        f"total session wall time {time.perf_counter() - SESSION_START:.1f}s")

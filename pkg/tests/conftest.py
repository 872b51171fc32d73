import os

import pytest

from mixedav.imitation import WarmupCache

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def warm_cache(request):
    """Disk-backed warm-up cache shared by the long-running tests.

    Set MIXEDAV_WARMUP_CACHE to choose the directory; it defaults to a
    folder inside pytest's cache.
    """
    directory = os.environ.get("MIXEDAV_WARMUP_CACHE") or \
        str(request.config.cache.mkdir("mixedav_warmups"))
    return WarmupCache(directory)


@pytest.fixture(scope="session")
def acceptance_report():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES,
                           key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import pytest

from retina_bow.synthetic import generate_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """18 synthetic fundus images: 3 per (site, class), with ``manifest.csv``."""
    return generate_corpus(tmp_path_factory.mktemp("corpus"), per_class=3, seed=1)


@pytest.fixture(scope="session")
def feature_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("cache")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES

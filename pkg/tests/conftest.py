import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from boneshape.experiments.synthetic import SyntheticFemurParams, generate_femur, generate_synthetic_cohort  # noqa: E402


@pytest.fixture(scope="session")
def femur():
    return generate_femur(SyntheticFemurParams(), spacing=4.0, with_skin=True)


@pytest.fixture(scope="session")
def small_cohort():
    return generate_synthetic_cohort(14, seed=3, spacing=6.0)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(line):
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

import pytest

from caire.simsynth import SimConfig, simulate_cohort
from caire.train import TrainConfig


@pytest.fixture(scope="session")
def tiny_cohort():
    """32 small patients with a strong injection rate; fast enough for unit tests."""
    return simulate_cohort(SimConfig(n_patients=32, m_mature=60, b_preselect=60, eta=0.05, seed=1))


@pytest.fixture
def tiny_train_config():
    return TrainConfig(batch_patients=4, batch_seqs=16, total_steps=12, eval_period=4, propensity_period=3, seed=5)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Records one pass/fail line per acceptance criterion and fails the test on a miss."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

import numpy as np
import pytest

from fliscc.config import ExperimentConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    """A fast logistic experiment: 3 devices, 6 rounds, error-free channel."""
    return ExperimentConfig().replace(**{
        "num_devices": 3, "rounds": 6, "schedule.total_per_device": 30, "train.eta": 0.1,
        "train.tau": 2, "train.batch_size": 4, "model.dim": 4, "model.num_classes": 3,
        "data.test_size": 50, "channel.error_free": True, "figures": False,
    })


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Remember one acceptance verdict; all of them are printed in the terminal summary."""
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

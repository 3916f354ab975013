import time

import pytest

from qsegment.data import synthetic_index
from qsegment.train import TrainConfig, train

# desk-scale recipe shared by the acceptance suite and the CLI tests
DESK_STEPS = 600
DESK_LR = 0.1


@pytest.fixture(scope="session")
def desk_data():
    return synthetic_index(0, n_train=20, n_val=8, hw=(64, 64))


@pytest.fixture(scope="session")
def desk_run(desk_data):
    cfg = TrainConfig(lr0=DESK_LR, max_steps=DESK_STEPS, seed=0)
    t0 = time.perf_counter()
    result = train(cfg, desk_data)
    return result, time.perf_counter() - t0


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

import numpy as np
import pytest

from annealfe.mrf import BipartiteModel


def random_model(rng, nv=3, nh=3, scale=1.0, bias=0.5, temperature=1.0):
    return BipartiteModel(
        rng.uniform(-bias, bias, nv),
        rng.uniform(-bias, bias, nh),
        rng.normal(0.0, scale, (nv, nh)),
        temperature,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run whatever the capture mode
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

import os

# Single-threaded BLAS keeps matmul reductions bit-reproducible and fast at these sizes.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from disco.synth import SynthSpec, generate_dataset  # noqa: E402


@pytest.fixture(scope="session")
def desk_dataset():
    return generate_dataset(SynthSpec())


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(SynthSpec(videos=6, frames=2, patches=4, channels=16, vocab=6,
                                      concepts_min=2, concepts_max=3, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---- acceptance summary ---------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, passed, detail)``."""
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")

import numpy as np
import pytest

from neurofuse.data import generate_synthetic_dataset
from neurofuse.training import Example

MICRO = (2, 4, 8, 8)


def make_examples(n: int, seed: int, modality: str = "T1", extents=(96, 96, 96)) -> list[Example]:
    ds = generate_synthetic_dataset(n, seed=seed, extents=extents)
    out = []
    for pair in ds.pairs:
        vol = pair.t1 if modality == "T1" else pair.flair
        out.append(Example(pair.session_id, pair.patient_id, ds.labels[pair.session_id], vol.data))
    return out


@pytest.fixture(scope="session")
def eight_examples() -> list[Example]:
    return make_examples(8, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])

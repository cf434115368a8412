import numpy as np
import pytest

from bioindex.core import Split, SubjectRecord
from bioindex.data_io import SyntheticModel, generate_synthetic, split_records


def make_refs(n: int, dim: int = 16, seed: int = 0) -> list[SubjectRecord]:
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((n, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return [SubjectRecord(i, i, vecs[i]) for i in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synth64():
    """64 enrolled subjects with probes, non-enrolled probes and a train split."""
    records = generate_synthetic(SyntheticModel(64, dim=32, intra_class_sigma=0.05, seed=7))
    return split_records(records)


@pytest.fixture(scope="session")
def refs64(synth64):
    return synth64[Split.REFERENCE]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

import numpy as np
import pytest
from hypothesis import settings

from roda.feature_store import FeatureSet, Sample

settings.register_profile("roda", deadline=None, max_examples=60)
settings.load_profile("roda")


def make_set(rng, n=4, grid=(2, 2), dim=3, anomalous=(), tag="t", with_labels=True):
    """Random finite feature set; samples listed in ``anomalous`` get one anomalous patch."""
    h, w = grid
    samples = []
    for k in range(n):
        mask = np.zeros((h, w), dtype=np.uint8)
        if k in anomalous:
            mask[0, 0] = 1
        samples.append(Sample(f"x{k:03d}", rng.standard_normal((h, w, dim)).astype(np.float32),
                              int(k in anomalous), mask if with_labels else None))
    return FeatureSet(samples, dim, grid, tag)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and print it."""
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

import numpy as np
import pytest

from hbcmf.expfam import Family
from hbcmf.row_glm import ObservationBlock, RowContext


def random_context(rng, k, family=None, n_obs=None, n_blocks=None):
    """Random row context with a well-conditioned prior and admissible values."""
    n_blocks = rng.integers(1, 3) if n_blocks is None else n_blocks
    blocks = []
    for _ in range(n_blocks):
        fam = family or list(Family)[rng.integers(3)]
        m = int(rng.integers(1, 12)) if n_obs is None else n_obs
        v = rng.normal(size=(m, k)) / np.sqrt(k)
        if fam is Family.BERNOULLI:
            x = rng.integers(0, 2, size=m).astype(float)
        elif fam is Family.POISSON:
            x = rng.poisson(2.0, size=m).astype(float)
        else:
            x = rng.normal(size=m)
        blocks.append(ObservationBlock(v, x, fam))
    a = rng.normal(size=(k, k))
    precision = a @ a.T / k + np.eye(k)
    return RowContext(rng.normal(size=k) * 0.3, precision, blocks)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one pass/fail line per acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])

import numpy as np
import pytest

from rareps.tabular import BINARY, CONTINUOUS, CovariateSchema, Dataset, Variable, categorical


def table_dataset(a, b, c, d, covariates=None, schema=None):
    """Rows for a 2x2 table: a exposed events, b exposed non-events, c unexposed events, d unexposed non-events."""
    exposure = np.repeat([1, 1, 0, 0], [a, b, c, d])
    outcome = np.repeat([1, 0, 1, 0], [a, b, c, d])
    return Dataset(schema or CovariateSchema(()), exposure, outcome, covariates or {})


def random_dataset(rng, n=400, *, missing=False):
    """Mixed-kind covariates with exposure and outcome depending on some of them."""
    schema = CovariateSchema((
        Variable("x", CONTINUOUS), Variable("b", BINARY), categorical("c", 3), categorical("d", 4),
    ))
    x = rng.uniform(size=n)
    b = (rng.random(n) < 0.5).astype(float)
    c = rng.integers(0, 3, n)
    d = rng.integers(0, 4, n)
    a = (rng.random(n) < 1 / (1 + np.exp(-(0.5 - x + 0.8 * b)))).astype(int)
    y = (rng.random(n) < 1 / (1 + np.exp(-(-1.5 + 0.7 * a + x - 0.5 * (c == 2))))).astype(int)
    masks = {}
    if missing:
        masks = {"x": rng.random(n) < 0.05, "c": rng.random(n) < 0.05}
    return Dataset(schema, a, y, {"x": x, "b": b, "c": c, "d": d}, masks)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

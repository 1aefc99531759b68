import os
from pathlib import Path

import numpy as np
import pytest

from hssvm import dataset

DATA_DIR = Path(__file__).parent / "data"
HEART = DATA_DIR / "heart_scale"


def blobs(d, seed, n_features=2, centers=4, spread=0.6):
    """Labelled Gaussian blobs; label alternates between centres."""
    rng = np.random.default_rng(seed)
    mu = rng.uniform(-3, 3, size=(centers, n_features))
    which = rng.integers(0, centers, size=d)
    X = mu[which] + spread * rng.standard_normal((d, n_features))
    y = np.where(which % 2 == 0, 1, -1)
    if np.all(y == y[0]):
        y[0] = -y[0]
    return dataset.from_arrays(X, y)


@pytest.fixture(scope="session")
def heart():
    return dataset.load(HEART)


def data_dir() -> Path:
    return Path(os.environ.get("HSSVM_DATA_DIR", DATA_DIR))


_RESULTS: dict[str, tuple[str, str]] = {}


def pytest_runtest_makereport(item, call):
    if call.when != "call" or item.module.__name__.split(".")[-1] != "test_acceptance":
        return
    label = dict(item.user_properties).get("criterion")
    if label is None:
        return
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if call.excinfo is None else "FAIL"
    if call.excinfo is not None and not detail:
        detail = str(call.excinfo.value).splitlines()[0][:160]
    _RESULTS[label] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_RESULTS, key=lambda s: int(s.split()[0][1:])):
        status, detail = _RESULTS[label]
        terminalreporter.write_line(f"{status} {label}: {detail}")

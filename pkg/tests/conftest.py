import numpy as np
import pytest

from elsa.data import gaussian_blobs
from elsa.nn import Network, TrainConfig, train


@pytest.fixture(scope="session")
def blobs():
    return gaussian_blobs(n=600, seed=0)


@pytest.fixture(scope="session")
def blobs_test():
    return gaussian_blobs(n=400, seed=1)


@pytest.fixture(scope="session")
def small_net():
    return Network.mlp([2, 16, 16, 2], batchnorm="first")


@pytest.fixture(scope="session")
def trained_small(small_net, blobs):
    params = train(small_net, small_net.init_params(0), None, blobs, TrainConfig(epochs=5))
    return small_net, params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------- #
# acceptance criteria reporting
# --------------------------------------------------------------------------- #
_RESULTS = {}


class Criterion:
    """Collects the checks of one acceptance criterion and reports PASS/FAIL once."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.failures, self.notes = [], []

    def check(self, ok, message):
        if not ok:
            self.failures.append(message)
        return ok

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is not None and not isinstance(exc, AssertionError):
            self.failures.append(f"{kind.__name__}: {exc}")
        elif exc is not None:
            self.failures.append(str(exc))
        status = "FAIL" if self.failures else "PASS"
        detail = "; ".join(self.failures[:3] or self.notes)
        line = f"criterion {self.number:>2}: {status}  {self.title}" + (f"  ({detail})" if detail else "")
        _RESULTS[self.number] = line
        print(line)
        if exc is None and self.failures:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[number])

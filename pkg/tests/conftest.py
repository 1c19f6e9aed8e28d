import numpy as np
import pytest

from dynalm.corpus import Batch, make_batches
from dynalm.ewc import consolidate, estimate_fisher_diag
from dynalm.lm import HiddenState, LmConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_lm(rng):
    cfg = LmConfig(vocab_size=5, embed_dim=4, hidden_dim=6)
    params = init_params(cfg, seed=3)
    params.data += rng.normal(0.0, 0.3, params.size)
    return params


@pytest.fixture
def stream(rng):
    return rng.integers(0, 5, size=400)


@pytest.fixture
def batches(stream):
    return make_batches(stream, 4)


@pytest.fixture
def memory(small_lm, batches):
    return consolidate(small_lm, estimate_fisher_diag(small_lm, batches[:6]))


def random_batch(rng, V, M, index=0):
    return Batch(index, rng.integers(0, V, M), rng.integers(0, V, M))


def random_state(rng, H):
    return HiddenState(rng.normal(size=H), rng.normal(size=H))


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the summary prints them in order."""
    def record(number, ok, detail):
        _CRITERIA[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_CRITERIA[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])

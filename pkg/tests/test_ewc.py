import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynalm.checkpoint import Checkpoint
from dynalm.corpus import make_batches
from dynalm.ewc import StaticMemory, consolidate, estimate_fisher_diag, ewc_penalty
from dynalm.lm import HiddenState, LmConfig, init_params, loss_and_grad
from oracles import central_difference, rel_err


def test_single_batch_fisher_is_squared_gradient(small_lm, batches):
    _, g = loss_and_grad(small_lm, batches[0], HiddenState.zeros(6))
    assert np.array_equal(estimate_fisher_diag(small_lm, batches[:1]), g * g)


def test_two_batch_fisher_oracle(small_lm, batches):
    out1, g1 = loss_and_grad(small_lm, batches[0], HiddenState.zeros(6))
    _, g2 = loss_and_grad(small_lm, batches[1], out1.final_state)
    assert np.array_equal(estimate_fisher_diag(small_lm, batches[:2]), (g1**2 + g2**2) / 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_fisher_nonnegative(seed, n):
    rng = np.random.default_rng(seed)
    p = init_params(LmConfig(4, 3, 3), seed)
    p.data += rng.normal(0, 2.0, p.size)
    fisher = estimate_fisher_diag(p, make_batches(rng.integers(0, 4, 3 * n + 1), 3))
    assert fisher.min() >= 0


def test_fisher_order_is_fixed(small_lm, batches):
    a = estimate_fisher_diag(small_lm, batches[:5])
    b = estimate_fisher_diag(small_lm, batches[:5])
    assert a.tobytes() == b.tobytes()


def test_empty_batches_rejected(small_lm):
    with pytest.raises(ValueError):
        estimate_fisher_diag(small_lm, [])


def test_consolidate_snapshots(small_lm):
    mem = consolidate(small_lm, np.ones(small_lm.size))
    before = mem.theta0.copy()
    small_lm.data += 1.0
    assert np.array_equal(mem.theta0, before)
    with pytest.raises(ValueError):
        mem.theta0[0] = 3.0


def test_consolidate_length_mismatch(small_lm):
    with pytest.raises(ValueError):
        consolidate(small_lm, np.ones(3))
    with pytest.raises(ValueError):
        StaticMemory(np.zeros(2), np.array([1.0, -1.0]))


def test_memory_checkpoint_round_trip(memory, tmp_path):
    path = tmp_path / "mem.ckpt"
    Checkpoint({"theta0": memory.theta0, "fisher": memory.fisher}).save(path)
    loaded = Checkpoint.load(path)
    again = StaticMemory(loaded.arrays["theta0"], loaded.arrays["fisher"])
    assert again.theta0.tobytes() == memory.theta0.tobytes()
    assert again.fisher.tobytes() == memory.fisher.tobytes()


def test_penalty_hand_example():
    mem = StaticMemory(np.zeros(2), np.array([1.0, 4.0]))
    value, grad = ewc_penalty(np.array([1.0, 1.0]), mem, 2.0)
    assert value == 5.0
    assert np.array_equal(grad, [2.0, 8.0])


def test_penalty_at_mean_and_zero_lambda(memory, rng):
    value, grad = ewc_penalty(memory.theta0.copy(), memory, 3.0)
    assert value == 0.0 and not grad.any()
    value, grad = ewc_penalty(rng.normal(size=memory.size), memory, 0.0)
    assert value == 0.0 and not grad.any()


def test_penalty_errors(memory):
    with pytest.raises(ValueError):
        ewc_penalty(memory.theta0, memory, -1.0)
    with pytest.raises(ValueError):
        ewc_penalty(np.zeros(3), memory, 1.0)


def test_penalty_gradient_fd(rng):
    mem = StaticMemory(rng.normal(size=30), rng.uniform(0, 2, 30))
    x = rng.normal(size=30)
    _, grad = ewc_penalty(x, mem, 1.7)
    # central differences are exact on a quadratic, so a wide step only trims roundoff
    fd = central_difference(lambda v: ewc_penalty(v, mem, 1.7)[0], x, h=1e-2)
    assert rel_err(grad, fd).max() < 1e-8

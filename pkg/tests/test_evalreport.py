import csv
import json
import math

import numpy as np
import pytest

from dynalm.corpus import Batch, build_vocab
from dynalm.evalreport import (
    EvalTrace,
    ModelVariant,
    article_labels,
    compare_variants,
    moving_average,
    online_eval,
    perplexity,
    perplexity_gain,
    token_loss_diff,
    write_report,
)
from dynalm.lm import HiddenState, LmConfig, Parameters, init_params, loss_and_grad
from dynalm.metalearner import init_meta


def trace(losses, name="t", start=0, M=4):
    n = len(losses)
    return EvalTrace(np.arange(start, start + n), np.asarray(losses, float), np.full(n, M), name=name)


def sgd_loop(theta, batches, alpha):
    hidden, out_losses = HiddenState.zeros(theta.config.hidden_dim), []
    data = theta.data.copy()
    for b in batches:
        out, g = loss_and_grad(Parameters(theta.config, data), b, hidden)
        out_losses.append(out.mean_loss)
        hidden = out.final_state
        data = data - alpha * g
    return np.array(out_losses)


def test_static_is_repeatable(small_lm, batches):
    a = online_eval(ModelVariant.static(small_lm), batches)
    b = online_eval(ModelVariant.static(small_lm), batches)
    assert a.batch_loss.tobytes() == b.batch_loss.tobytes()


def test_copy_meta_equals_static(small_lm, batches, memory):
    theta = Parameters(small_lm.config, memory.theta0.copy())
    meta = init_meta(8, 4, 0)
    meta.W1[...] = 0
    meta.W2[...] = 0
    meta.b2 = np.array([40.0, 0.0, -40.0])
    meta.si[0] = 0.0
    s = online_eval(ModelVariant.static(theta), batches)
    for variant in (ModelVariant.meta_only(theta, meta), ModelVariant.meta_memory(theta, meta, memory)):
        assert online_eval(variant, batches).batch_loss.tobytes() == s.batch_loss.tobytes()


@pytest.mark.parametrize("alpha", [0.01, 0.1])
def test_dynamic_matches_hand_rolled_sgd(small_lm, batches, alpha):
    tr = online_eval(ModelVariant.dynamic_fixed(small_lm, 1.0, -alpha, 0.0), batches)
    assert np.max(np.abs(tr.batch_loss - sgd_loop(small_lm, batches, alpha))) <= 1e-12


def test_loss_recorded_before_update(small_lm, batches, memory):
    a = online_eval(ModelVariant.dynamic_fixed(small_lm, 1.0, -0.5, 0.0), batches[:6])
    b = online_eval(ModelVariant.dynamic_fixed(small_lm, 0.5, 0.3, 0.5, memory=memory), batches[:6])
    assert a.batch_loss[0] == b.batch_loss[0]
    assert a.batch_loss[1] != b.batch_loss[1]


def test_variant_validation(small_lm):
    with pytest.raises(ValueError):
        ModelVariant("bogus", small_lm)
    with pytest.raises(ValueError):
        ModelVariant("meta_with_memory", small_lm, meta=init_meta())


def test_non_contiguous_batches_rejected(small_lm, batches):
    with pytest.raises(ValueError):
        online_eval(ModelVariant.static(small_lm), [batches[0], batches[2]])


def test_perplexity_examples():
    assert perplexity(trace([math.log(2)] * 5)) == pytest.approx(2.0, rel=1e-15)
    assert perplexity(trace([math.log(7)])) == pytest.approx(7.0, rel=1e-15)
    with pytest.raises(ValueError):
        perplexity(trace([]))


def test_random_init_perplexity_near_v(rng):
    p = init_params(LmConfig(12, 6, 8), 0)
    stream = rng.integers(0, 12, 64 * 20 + 1)
    bs = [Batch(k, stream[64 * k: 64 * k + 64], stream[64 * k + 1: 64 * k + 65]) for k in range(20)]
    assert abs(perplexity(online_eval(ModelVariant.static(p), bs)) - 12) / 12 < 0.05


def test_gain_examples():
    a, b = trace([math.log(3)] * 6, "a"), trace([math.log(2)] * 6, "b")
    assert np.allclose(perplexity_gain(a, b).gain, 1.0, rtol=0, atol=1e-15)
    assert not perplexity_gain(a, a).gain.any()


def test_gain_antisymmetric(rng):
    a, b = trace(rng.uniform(1, 3, 30), "a"), trace(rng.uniform(1, 3, 30), "b")
    assert np.array_equal(perplexity_gain(a, b).gain, -perplexity_gain(b, a).gain)


def test_gain_overlap_only():
    g = perplexity_gain(trace([1.0] * 5, start=0), trace([1.0] * 5, start=3))
    assert g.batch_index.tolist() == [3, 4]
    with pytest.raises(ValueError):
        perplexity_gain(trace([1.0], start=0), trace([1.0], start=5))


def test_moving_average():
    out = moving_average(np.array([0, 3, 0, 3, 0, 3, 0], float), 3)
    assert np.allclose(out[1:-1], [1.0, 2.0, 1.0, 2.0, 1.0])
    out = moving_average(np.array([0, 3, 0, 3, 0, 3], float), 3)
    assert out[2] == 2.0 and out[4] == 2.0
    assert out[0] == 1.5
    x = np.arange(5.0)
    assert np.array_equal(moving_average(x, 1), x)
    with pytest.raises(ValueError):
        moving_average(x, 0)


def test_token_diff_hand_case():
    cfg = LmConfig(2, 1, 1)
    zero = Parameters(cfg)
    biased = Parameters(cfg)
    biased.view("out_b")[...] = [math.log(3.0), 0.0]
    batch = [Batch(0, np.array([0, 1]), np.array([0, 1]))]
    vocab = build_vocab("ab", "character", 10)
    diff = compare_variants(ModelVariant.static(zero, "z"), ModelVariant.static(biased, "b"), batch, 0, vocab)
    assert diff.tokens == ["a", "b"]
    assert np.allclose(diff.diff, [math.log(2) - math.log(4 / 3), math.log(2) - math.log(4)], atol=1e-15)


def test_token_diff_sums_to_batch_difference(small_lm, batches, memory):
    a = online_eval(ModelVariant.static(small_lm, "s"), batches[:5], record_tokens=True)
    b = online_eval(ModelVariant.dynamic_fixed(small_lm, 1, -0.1, 0, name="d"), batches[:5], record_tokens=True)
    d = token_loss_diff(a, b, batches[:5], 3)
    assert abs(d.diff.sum() - 4 * (a.batch_loss[3] - b.batch_loss[3])) < 1e-12
    same = token_loss_diff(a, a, batches[:5], 3)
    assert not same.diff.any()
    with pytest.raises(KeyError):
        token_loss_diff(online_eval(ModelVariant.static(small_lm), batches[:5]), b, batches[:5], 3)
    with pytest.raises(KeyError):
        token_loss_diff(a, b, batches[:5], 9)


def test_report_files_and_reload(tmp_path, rng):
    a, b = trace(rng.uniform(0.5, 3, 40), "a"), trace(rng.uniform(0.5, 3, 40), "b")
    g = perplexity_gain(a, b, 5)
    write_report([a, b], [g], [], tmp_path, config={"seed": 1})
    with open(tmp_path / "trace_a.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    reloaded = math.exp(sum(float(r["loss"]) for r in rows) / len(rows))
    assert abs(reloaded - perplexity(a)) < 1e-9
    manifest = json.loads((tmp_path / "report.json").read_text())
    assert "gain_a_vs_b.csv" in manifest["files"]
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    write_report([a, b], [g], [], tmp_path, config={"seed": 1})
    assert first == {p.name: p.read_bytes() for p in tmp_path.iterdir()}


def test_report_without_gains(tmp_path):
    write_report([trace([1.0, 2.0])], [], [], tmp_path)
    assert not list(tmp_path.glob("gain_*"))
    assert json.loads((tmp_path / "report.json").read_text())["gains"] == "none"


def test_report_quotes_tokens(tmp_path, small_lm, batches):
    a = online_eval(ModelVariant.static(small_lm, "s"), batches[:2], record_tokens=True)
    d = token_loss_diff(a, a, batches[:2], 1)
    d.tokens = ['"', ",", "\n", "x"]
    write_report([], [], [d], tmp_path)
    with open(tmp_path / "tokens_1.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["token"] for r in rows] == ['"', ",", "\n", "x"]


def test_article_labels():
    assert article_labels([0, 10, 20], [0, 9, 10, 25]) == {0: "A", 9: "A", 10: "B", 25: "C"}
    assert article_labels([10], [5, 10]) == {5: "A", 10: "B"}

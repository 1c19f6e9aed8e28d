import pytest

from dynalm.corpus import build_vocab, encode, make_batches
from dynalm.lm import LmConfig, NumericalError, init_params
from dynalm.synthetic import alternating_corpus, regime_corpus, uniform_corpus
from dynalm.training import pretrain


def test_zero_epochs_returns_copy():
    p = init_params(LmConfig(3, 2, 2), 0)
    res = pretrain(p, [], [], epochs=0)
    assert res.params.data.tobytes() == p.data.tobytes() and res.params is not p and res.log == []


def test_alternating_corpus_learned_quickly():
    text = alternating_corpus(1200)
    v = build_vocab(text)
    b = make_batches(encode(text, v), 32)
    res = pretrain(init_params(LmConfig(v.size, 4, 8), 0), b[:30], b[30:], epochs=4)
    assert res.best_valid < 0.01
    assert [r["epoch"] for r in res.log] == [1, 2, 3, 4]


def test_deterministic():
    text = uniform_corpus(3000, seed=2)
    v = build_vocab(text)
    b = make_batches(encode(text, v), 32)
    runs = [pretrain(init_params(LmConfig(v.size, 4, 6), 1), b[:60], b[60:], epochs=2) for _ in range(2)]
    assert runs[0].params.data.tobytes() == runs[1].params.data.tobytes()
    assert runs[0].log == runs[1].log


def test_divergence_aborts():
    text = uniform_corpus(2000, seed=0)
    v = build_vocab(text)
    b = make_batches(encode(text, v), 32)
    with pytest.raises(NumericalError):
        pretrain(init_params(LmConfig(v.size, 4, 6), 0), b[:40], b[40:], lr=1e300, clip=1e300, epochs=2)


def test_regime_corpus_structure():
    c = regime_corpus(5, 300, seed=4)
    assert len(c.text) == 1500
    assert c.article_offsets == [0, 300, 600, 900, 1200]
    assert c.boundary_batches(0, 64) == [0, 4, 9, 14, 18]
    assert c.boundary_batches(650, 64) == [3, 8]
    for k, words in enumerate(c.topic_words):
        article = c.text[300 * k: 300 * (k + 1)]
        assert any(w in article for w in words)
    assert regime_corpus(5, 300, seed=4).text == c.text
    assert regime_corpus(5, 300, seed=5).text != c.text

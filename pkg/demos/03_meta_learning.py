#!/usr/bin/env python3
# Learning the update rule itself.
#
# The gate network is trained by unrolling the (score, gradient, update)
# chain over 40 batches and backpropagating the summed loss. Two versions
# are compared: without the static memory (no FLUSH path) and with it.
# Reports are written as CSV files under demo_out/.

# %%
import numpy as np

from dynalm import LmConfig, init_params
from dynalm.corpus import build_vocab, encode, make_batches
from dynalm.evalreport import (ModelVariant, article_labels, online_eval, perplexity, perplexity_gain,
                               token_loss_diff, write_report)
from dynalm.ewc import consolidate, estimate_fisher_diag
from dynalm.metalearner import init_meta
from dynalm.metatrain import UnrollConfig, train_meta
from dynalm.synthetic import regime_corpus
from dynalm.training import pretrain

M = 64

# %%
train = regime_corpus(20, 30 * M, seed=1)
valid = regime_corpus(3, 30 * M, seed=2)
test = regime_corpus(4, 30 * M, seed=3)
vocab = build_vocab(train.text + valid.text + test.text)
tb, vb, teb = (make_batches(encode(c.text, vocab), M) for c in (train, valid, test))
theta = pretrain(init_params(LmConfig(vocab.size, 16, 32), seed=0), tb, vb, epochs=3).params
memory = consolidate(theta, estimate_fisher_diag(theta, tb))
print("largest Fisher entries", np.sort(memory.fisher)[-3:])

# %%
# A short meta-training run for each variant. The log holds one row per
# meta step; the memory variant adds an EWC penalty to keep weights near theta0.
cfg = dict(unroll_len=40, meta_lr=0.01, meta_steps=40, seed=0)
two = train_meta(init_meta(hidden=16), theta, None, tb, UnrollConfig(**cfg))
three = train_meta(init_meta(hidden=16), theta, memory, tb, UnrollConfig(ewc_lambda=30.0, **cfg))
for name, res in (("two-level", two), ("three-level", three)):
    losses = [r["mean_step_loss"] for r in res.log]
    print(f"{name}: mean step loss {np.mean(losses[:5]):.4f} -> {np.mean(losses[-5:]):.4f}")
    print("   output biases (f, i, z):", res.meta.b2, " update scale:", res.meta.si[0])

# %%
traces = [
    online_eval(ModelVariant.static(theta), teb, record_tokens=True),
    online_eval(ModelVariant.meta_only(theta, two.meta), teb, record_tokens=True),
    online_eval(ModelVariant.meta_memory(theta, three.meta, memory), teb, record_tokens=True),
]
for tr in traces:
    print(f"{tr.name:12s} test perplexity {perplexity(tr):.3f}")

# %%
# Gains against the static model and between the two adaptive models, with
# article letters attached, plus a token-level view of one batch.
gains = [perplexity_gain(traces[0], traces[1], 9), perplexity_gain(traces[1], traces[2], 9)]
labels = article_labels(test.boundary_batches(0, M), gains[0].batch_index)
diff = token_loss_diff(traces[0], traces[1], teb, 40, vocab)
print("batch 40 target text:", repr("".join(diff.tokens)))
print("tokens the meta model predicts better:", int((diff.diff > 0).sum()), "of", len(diff.tokens))
for path in write_report(traces, gains, [diff], "demo_out", annotations=labels):
    print("wrote", path)

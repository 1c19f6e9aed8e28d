#!/usr/bin/env python3
# Static versus dynamically evaluated LM on a corpus of "articles".
#
# Each synthetic article mixes a shared pool of common words with a handful
# of topic words of its own. A static model cannot know the topic in advance;
# a model that keeps adapting its weights while it reads can.

# %%

from dynalm import LmConfig, init_params
from dynalm.corpus import build_vocab, encode, make_batches
from dynalm.evalreport import ModelVariant, online_eval, perplexity, perplexity_gain
from dynalm.synthetic import regime_corpus
from dynalm.training import pretrain

M = 64

# %%
train = regime_corpus(20, 30 * M, seed=1)
valid = regime_corpus(3, 30 * M, seed=2)
test = regime_corpus(4, 30 * M, seed=3)
print("topic words of the first test article:", test.topic_words[0])
print(test.text[:160])

vocab = build_vocab(train.text + valid.text + test.text)
tb, vb, teb = (make_batches(encode(c.text, vocab), M) for c in (train, valid, test))
print(len(tb), "training batches,", len(teb), "test batches of", M, "characters")

# %%
# Pretrain with clipped SGD (a couple of epochs is enough for a demo).
result = pretrain(init_params(LmConfig(vocab.size, 16, 32), seed=0), tb, vb, epochs=3)
for row in result.log:
    print(f"epoch {row['epoch']}  lr {row['lr']:.3g}  train {row['train_loss']:.4f}  valid {row['valid_loss']:.4f}")
theta = result.params

# %%
# Online evaluation: each batch is scored first, then the variant updates.
static = online_eval(ModelVariant.static(theta), teb)
print("static perplexity", round(perplexity(static), 3))
for lr in (0.1, 0.3, 1.0):
    dyn = online_eval(ModelVariant.dynamic_fixed(theta, 1.0, -lr, 0.0, name=f"sgd{lr}"), teb)
    print(f"dynamic evaluation lr={lr}: perplexity {perplexity(dyn):.3f}")

# %%
# Instantaneous perplexity gain (static minus dynamic, so positive means the
# adapting model is ahead), averaged within each article.
gain = perplexity_gain(static, dyn, smooth_window=9)
edges = test.boundary_batches(0, M) + [len(teb)]
for k in range(len(edges) - 1):
    seg = gain.gain[edges[k]:edges[k + 1]]
    half = len(seg) // 2
    print(f"article {'ABCD'[k]}: mean gain first half {seg[:half].mean():+.3f}, second half {seg[half:].mean():+.3f}")

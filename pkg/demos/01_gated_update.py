#!/usr/bin/env python3
# A tour of the gated weight update on a tiny LSTM language model.
#
# The update for every weight coordinate is
#     theta_t = f * theta_{t-1} + i * grad_t + z * theta0
# with f = COPY, i = UPDATE and z = FLUSH. Constant gates give the usual
# baselines; a small shared network produces per-coordinate gates.

# %%
import numpy as np

from dynalm import HiddenState, LmConfig, init_params, loss_and_grad
from dynalm.corpus import build_vocab, encode, make_batches
from dynalm.ewc import consolidate, estimate_fisher_diag
from dynalm.metalearner import GateTriple, apply_update, build_features, gates, init_meta

np.set_printoptions(precision=4, suppress=True)

# %%
# A toy corpus and a randomly initialised model. All weights live in one
# flat float64 buffer; named segments are views into it.
text = "the cat sat on the mat. the dog sat on the log. " * 20
vocab = build_vocab(text)
batches = make_batches(encode(text, vocab), 32)
theta = init_params(LmConfig(vocab.size, 8, 12), seed=0)
print("vocabulary size", vocab.size, "| parameters", theta.size)
for seg in theta.layout:
    print(f"  {seg.name:8s} shape {seg.shape}  offset {seg.offset}")

# %%
# Loss and gradient on the first batch, plus the static memory
# (a snapshot of the weights and a diagonal Fisher estimate).
out, grad = loss_and_grad(theta, batches[0], HiddenState.zeros(12))
memory = consolidate(theta, estimate_fisher_diag(theta, batches[:5]))
print("batch 0 loss", round(out.mean_loss, 4), "nats; ln V =", round(np.log(vocab.size), 4))

# %%
# Constant gates. COPY keeps the weights, FLUSH resets them, and
# (1, -lr, 0) is one step of plain SGD.
P = theta.size
kept = apply_update(theta, grad, memory, GateTriple.constant(P, 1, 0, 0))
reset = apply_update(theta, grad, memory, GateTriple.constant(P, 0, 0, 1))
sgd = apply_update(theta, grad, memory, GateTriple.constant(P, 1, -0.5, 0))
print("copy unchanged:", np.array_equal(kept.data, theta.data))
print("flush equals theta0:", np.array_equal(reset.data, memory.theta0))
print("sgd step max |diff| vs theta - 0.5 grad:", np.abs(sgd.data - (theta.data - 0.5 * grad)).max())

# %%
# The learned rule. One small network is shared by every coordinate; its
# input is a per-coordinate feature row (log-magnitude and sign of the
# weight, the gradient, the drift from theta0 and the batch loss).
meta = init_meta(hidden=16, seed=0)
X, _ = build_features(theta.data, grad, out.mean_loss, memory.theta0)
g = gates(meta, X)
print("feature matrix", X.shape)
print("fresh gates  f in [%.4f, %.4f]  z in [%.4f, %.4f]  |i| <= %.2e"
      % (g.f.min(), g.f.max(), g.z.min(), g.z.max(), np.abs(g.i).max()))
# At initialisation the network is close to COPY, so one step barely moves theta.
step = apply_update(theta, grad, memory, g)
print("relative change after one step", np.linalg.norm(step.data - theta.data) / np.linalg.norm(theta.data))

"""Three-level dynamical language model.

A small LSTM language model (short-term memory in its hidden state), a
coordinate-shared meta-learner that rewrites the LM weights online through
COPY / UPDATE / FLUSH gates (medium-term memory), and a static memory of
consolidated pretrained weights with their Fisher diagonal (long-term memory).
"""

from .corpus import Batch, TokenSequence, Vocabulary, build_vocab, encode, make_batches, split_corpus
from .evalreport import (
    EvalTrace,
    GainSeries,
    ModelVariant,
    online_eval,
    perplexity,
    perplexity_gain,
    token_loss_diff,
    write_report,
)
from .ewc import StaticMemory, consolidate, estimate_fisher_diag, ewc_penalty
from .lm import HiddenState, LmConfig, NumericalError, Parameters, forward, init_params, loss, loss_and_grad
from .metalearner import GateTriple, MetaParams, apply_update, fixed_gate_update, gates, init_meta, preprocess
from .metatrain import UnrollConfig, train_meta, unroll_backward, unroll_forward

__version__ = "0.1.0"

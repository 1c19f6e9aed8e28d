"""Single-layer LSTM language model over a flat float64 parameter buffer.

Packed LSTM gate order is (input, forget, cell, output) and must not change:
checkpoints depend on it.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Iterator, List, NamedTuple, Tuple

import numpy as np

from .corpus import Batch


class NumericalError(FloatingPointError):
    """Raised when a computation produces a non-finite value."""


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 64
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("embed_dim and hidden_dim must be >= 1")
        if self.tie_embeddings and self.embed_dim != self.hidden_dim:
            raise ValueError("tie_embeddings requires embed_dim == hidden_dim")


class Segment(NamedTuple):
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return prod(self.shape)

    @property
    def stop(self) -> int:
        return self.offset + self.size


def make_layout(config: LmConfig) -> Tuple[Segment, ...]:
    V, E, H = config.vocab_size, config.embed_dim, config.hidden_dim
    shapes = [
        ("embed", (V, E)),
        ("lstm_Wx", (4 * H, E)),
        ("lstm_Wh", (4 * H, H)),
        ("lstm_b", (4 * H,)),
    ]
    if not config.tie_embeddings:
        shapes.append(("out_W", (V, H)))
    shapes.append(("out_b", (V,)))
    layout, offset = [], 0
    for name, shape in shapes:
        layout.append(Segment(name, offset, shape))
        offset += prod(shape)
    return tuple(layout)


class Parameters:
    """Flat array of all LM weights plus a named-segment layout.

    Gradients, gates, the Fisher diagonal and the static memory all share
    this coordinate indexing.
    """

    def __init__(self, config: LmConfig, data: np.ndarray | None = None):
        self.config = config
        self.layout = make_layout(config)
        self._index = {seg.name: seg for seg in self.layout}
        size = self.layout[-1].stop
        if data is None:
            data = np.zeros(size)
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (size,):
            raise ValueError(f"expected flat array of length {size}, got shape {data.shape}")
        self.data = data

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def __len__(self) -> int:
        return self.size

    def segment(self, name: str) -> Segment:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown segment {name!r}") from None

    def view(self, name: str) -> np.ndarray:
        seg = self.segment(name)
        return self.data[seg.offset : seg.stop].reshape(seg.shape)

    def segments(self) -> Iterator[Tuple[str, np.ndarray]]:
        for seg in self.layout:
            yield seg.name, self.view(seg.name)

    def segment_of(self, index: int) -> str:
        for seg in self.layout:
            if seg.offset <= index < seg.stop:
                return seg.name
        raise IndexError(index)

    def copy(self) -> "Parameters":
        return Parameters(self.config, self.data.copy())

    def like(self, data: np.ndarray) -> "Parameters":
        return Parameters(self.config, data)

    @property
    def out_weight(self) -> np.ndarray:
        return self.view("embed") if self.config.tie_embeddings else self.view("out_W")


def segment_view(params: Parameters, name: str) -> np.ndarray:
    return params.view(name)


@dataclass
class HiddenState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim: int) -> "HiddenState":
        return cls(np.zeros(hidden_dim), np.zeros(hidden_dim))

    def copy(self) -> "HiddenState":
        return HiddenState(self.h.copy(), self.c.copy())


@dataclass
class StepOutput:
    token_losses: np.ndarray
    mean_loss: float
    final_state: HiddenState | None = None


def init_params(config: LmConfig, seed: int = 0) -> Parameters:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) matrices, zero biases, forget bias 1."""
    rng = np.random.default_rng(seed)
    params = Parameters(config)
    s = 1.0 / np.sqrt(config.hidden_dim)
    for seg in params.layout:
        if len(seg.shape) == 2:
            params.view(seg.name)[...] = rng.uniform(-s, s, size=seg.shape)
    H = config.hidden_dim
    params.view("lstm_b")[H : 2 * H] = 1.0
    return params


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_inputs(params: Parameters, ids: np.ndarray, state: HiddenState):
    V, H = params.config.vocab_size, params.config.hidden_dim
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ValueError(f"token id out of range [0, {V})")
    if state.h.shape != (H,) or state.c.shape != (H,):
        raise ValueError(f"hidden state must have dimension {H}")


class _Cache(NamedTuple):
    inputs: np.ndarray
    X: np.ndarray
    gates: np.ndarray  # M x 4H activated (i, f, g, o)
    c_prev: np.ndarray  # M x H
    c: np.ndarray
    tanh_c: np.ndarray
    h_prev: np.ndarray
    h: np.ndarray


def _run(params: Parameters, inputs, state: HiddenState):
    ids = np.asarray(inputs, dtype=np.int64)
    _check_inputs(params, ids, state)
    H = params.config.hidden_dim
    Wx, Wh, b = params.view("lstm_Wx"), params.view("lstm_Wh"), params.view("lstm_b")
    X = params.view("embed")[ids]
    pre_x = X @ Wx.T + b
    M = ids.shape[0]
    gates = np.empty((M, 4 * H))
    hs = np.empty((M + 1, H))
    cs = np.empty((M + 1, H))
    tanh_c = np.empty((M, H))
    hs[0], cs[0] = state.h, state.c
    for t in range(M):
        a = pre_x[t] + Wh @ hs[t]
        g = gates[t]
        g[: 2 * H] = sigmoid(a[: 2 * H])
        g[2 * H : 3 * H] = np.tanh(a[2 * H : 3 * H])
        g[3 * H :] = sigmoid(a[3 * H :])
        cs[t + 1] = g[H : 2 * H] * cs[t] + g[:H] * g[2 * H : 3 * H]
        tanh_c[t] = np.tanh(cs[t + 1])
        hs[t + 1] = g[3 * H :] * tanh_c[t]
    logits = hs[1:] @ params.out_weight.T + params.view("out_b")
    cache = _Cache(ids, X, gates, cs[:-1], cs[1:], tanh_c, hs[:-1], hs[1:])
    return logits, HiddenState(hs[M].copy(), cs[M].copy()), cache


def forward(params: Parameters, inputs, state: HiddenState) -> Tuple[np.ndarray, HiddenState]:
    logits, final, _ = _run(params, inputs, state)
    return logits, final


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss(logits: np.ndarray, targets) -> StepOutput:
    targets = np.asarray(targets, dtype=np.int64)
    logp = _log_softmax(np.asarray(logits, dtype=np.float64))
    token_losses = -logp[np.arange(targets.shape[0]), targets]
    # -log p can come out as -0.0 or a hair below zero when p rounds to 1
    token_losses = np.maximum(token_losses, 0.0)
    return StepOutput(token_losses, float(token_losses.mean()))


def loss_and_grad(params: Parameters, batch: Batch, state: HiddenState) -> Tuple[StepOutput, np.ndarray]:
    """Mean token loss over the batch and its exact gradient w.r.t. every coordinate.

    The incoming hidden state is treated as a constant: gradients stop at the
    batch edge while activations carry over through ``final_state``.
    """
    logits, final, cache = _run(params, batch.inputs, state)
    targets = np.asarray(batch.targets, dtype=np.int64)
    M = targets.shape[0]
    H = params.config.hidden_dim
    logp = _log_softmax(logits)
    token_losses = np.maximum(-logp[np.arange(M), targets], 0.0)
    out = StepOutput(token_losses, float(token_losses.mean()), final)
    if not np.isfinite(out.mean_loss):
        raise NumericalError("numerical overflow in loss")

    grad = params.like(np.zeros(params.size))
    dlogits = np.exp(logp)
    dlogits[np.arange(M), targets] -= 1.0
    dlogits /= M
    grad.view("out_b")[...] = dlogits.sum(axis=0)
    W_out = params.out_weight
    d_out = dlogits.T @ cache.h
    if params.config.tie_embeddings:
        grad.view("embed")[...] += d_out
    else:
        grad.view("out_W")[...] = d_out
    dh_out = dlogits @ W_out

    Wh = params.view("lstm_Wh")
    g = cache.gates
    dA = np.empty((M, 4 * H))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in range(M - 1, -1, -1):
        gi, gf, gg, go = g[t, :H], g[t, H : 2 * H], g[t, 2 * H : 3 * H], g[t, 3 * H :]
        dh = dh_out[t] + dh_next
        dc = dh * go * (1.0 - cache.tanh_c[t] ** 2) + dc_next
        da = dA[t]
        da[:H] = dc * gg * gi * (1.0 - gi)
        da[H : 2 * H] = dc * cache.c_prev[t] * gf * (1.0 - gf)
        da[2 * H : 3 * H] = dc * gi * (1.0 - gg**2)
        da[3 * H :] = dh * cache.tanh_c[t] * go * (1.0 - go)
        dc_next = dc * gf
        dh_next = Wh.T @ da
    grad.view("lstm_Wx")[...] = dA.T @ cache.X
    grad.view("lstm_Wh")[...] = dA.T @ cache.h_prev
    grad.view("lstm_b")[...] = dA.sum(axis=0)
    np.add.at(grad.view("embed"), cache.inputs, dA @ params.view("lstm_Wx"))

    for name, view in grad.segments():
        if not np.all(np.isfinite(view)):
            raise NumericalError(f"numerical overflow in gradient segment {name!r}")
    return out, grad.data


def evaluate(params: Parameters, batches: List[Batch], state: HiddenState | None = None) -> float:
    """Token-weighted mean loss over batches with the hidden state threaded through."""
    state = state or HiddenState.zeros(params.config.hidden_dim)
    total, count = 0.0, 0
    for batch in batches:
        logits, state = forward(params, batch.inputs, state)
        total += float(loss(logits, batch.targets).token_losses.sum())
        count += batch.size
    return total / count

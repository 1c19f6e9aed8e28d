"""Coordinate-shared gate network and the gated weight update.

Every LM coordinate j gets its own feature vector, and one small
feed-forward net (shared by all coordinates) maps it to three gates:

    theta_t = f * theta_{t-1} + i * grad_t + z * theta0

f (COPY) and z (FLUSH) are sigmoids; i (UPDATE) is a sign-free linear
output times a learned global scale ``si``, so descent needs no hard-coded
sign. Gradient-valued inputs are treated as constants when differentiating
(first-order meta-gradients).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Tuple

import numpy as np

from .ewc import StaticMemory
from .lm import NumericalError, Parameters, sigmoid

PREPROCESS_P = 10.0
BASE_FEATURE_DIM = 8
FISHER_FEATURE_DIM = 2

F_BIAS = 4.0
Z_BIAS = -4.0
SI_INIT = 0.01


def preprocess(x, p: float = PREPROCESS_P) -> np.ndarray:
    """Log-magnitude / sign encoding, shape ``x.shape + (2,)``.

    ``(log|x|/p, sign x)`` when ``|x| >= e^-p``, else ``(-1, e^p x)``.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape + (2,))
    big = np.abs(x) >= np.exp(-p)
    with np.errstate(divide="ignore"):
        out[..., 0] = np.where(big, np.log(np.abs(x)) / p, -1.0)
    out[..., 1] = np.where(big, np.sign(x), np.exp(p) * x)
    return out


def preprocess_derivative(x, p: float = PREPROCESS_P) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(x.shape + (2,))
    big = np.abs(x) >= np.exp(-p)
    with np.errstate(divide="ignore"):
        out[..., 0] = np.where(big, 1.0 / (p * np.where(big, x, 1.0)), 0.0)
    out[..., 1] = np.where(big, 0.0, np.exp(p))
    return out


@dataclass
class MetaParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    si: np.ndarray  # shape (1,)

    CHECKPOINT_NAMES = ("meta_W1", "meta_b1", "meta_W2", "meta_b2", "meta_si")

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "MetaParams":
        parts, offset = [], 0
        for a in self.arrays():
            parts.append(np.array(vec[offset : offset + a.size]).reshape(a.shape))
            offset += a.size
        if offset != vec.shape[0]:
            raise ValueError("flat meta vector has the wrong length")
        return MetaParams(*parts)

    def zeros_like(self) -> "MetaParams":
        return MetaParams(*(np.zeros_like(a) for a in self.arrays()))

    def copy(self) -> "MetaParams":
        return MetaParams(*(a.copy() for a in self.arrays()))

    def to_dict(self, prefix: str = "meta_") -> Dict[str, np.ndarray]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, arrays: Dict[str, np.ndarray], prefix: str = "meta_") -> "MetaParams":
        return cls(*(np.asarray(arrays[prefix + f.name], dtype=np.float64) for f in fields(cls)))


def init_meta(feature_dim: int = BASE_FEATURE_DIM, hidden: int = 16, seed: int = 0) -> MetaParams:
    """Near-COPY initialization: f ~ sigmoid(4), z ~ sigmoid(-4), i ~ 0."""
    if feature_dim < 1 or hidden < 1:
        raise ValueError("feature_dim and hidden must be >= 1")
    rng = np.random.default_rng(seed)
    scale = 0.01 / np.sqrt(hidden)
    return MetaParams(
        W1=rng.uniform(-scale, scale, size=(hidden, feature_dim)),
        b1=np.zeros(hidden),
        W2=rng.uniform(-scale, scale, size=(3, hidden)),
        b2=np.array([F_BIAS, 0.0, Z_BIAS]),
        si=np.array([SI_INIT]),
    )


@dataclass
class GateTriple:
    f: np.ndarray
    i: np.ndarray
    z: np.ndarray

    @classmethod
    def constant(cls, size: int, f: float, i: float, z: float) -> "GateTriple":
        return cls(np.full(size, float(f)), np.full(size, float(i)), np.full(size, float(z)))


def build_features(theta, grad, loss: float, theta_ref, fisher=None, p: float = PREPROCESS_P):
    """Per-coordinate features and their partial derivatives w.r.t. theta.

    Columns: pre(theta), pre(grad), pre(theta - theta_ref), pre(loss), and
    pre(fisher) when given. Returns ``(X, dX_dtheta)``, both P x D.
    """
    theta = np.asarray(theta)
    P = theta.shape[0]
    drift = theta - theta_ref
    cols = [preprocess(theta, p), preprocess(grad, p), preprocess(drift, p),
            np.broadcast_to(preprocess(loss, p), (P, 2))]
    if fisher is not None:
        cols.append(preprocess(fisher, p))
    X = np.concatenate(cols, axis=1)
    dX = np.zeros_like(X)
    dX[:, 0:2] = preprocess_derivative(theta, p)
    dX[:, 4:6] = preprocess_derivative(drift, p)
    return X, dX


def _gate_forward(meta: MetaParams, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != meta.feature_dim:
        raise ValueError(f"features must be P x {meta.feature_dim}, got shape {X.shape}")
    hidden = np.tanh(X @ meta.W1.T + meta.b1)
    raw = hidden @ meta.W2.T + meta.b2
    g = GateTriple(sigmoid(raw[:, 0]), meta.si[0] * raw[:, 1], sigmoid(raw[:, 2]))
    return g, hidden, raw


def gates(meta: MetaParams, features: np.ndarray) -> GateTriple:
    return _gate_forward(meta, features)[0]


def apply_update(theta_prev: Parameters, grad: np.ndarray, memory: StaticMemory | None, g: GateTriple) -> Parameters:
    """Elementwise gated update; without a memory the FLUSH term is dropped."""
    new = g.f * theta_prev.data + g.i * grad
    if memory is not None:
        new = new + g.z * memory.theta0
    bad = ~np.isfinite(new)
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        raise NumericalError(f"non-finite weight at coordinate {j} (segment {theta_prev.segment_of(j)!r})")
    return theta_prev.like(new)


def fixed_gate_update(theta_prev: Parameters, grad: np.ndarray, memory: StaticMemory | None, constants) -> Parameters:
    """Constant gates everywhere.

    ``(1, -lr, 0)`` is SGD dynamic evaluation, ``(1-d, 0-or-lr, d)`` decays
    toward theta0, and ``(1, 0, 0)`` is the static model.
    """
    f, i, z = constants
    if z != 0 and memory is None:
        raise ValueError("a nonzero flush constant needs a static memory")
    return apply_update(theta_prev, grad, memory, GateTriple.constant(theta_prev.size, f, i, z))


@dataclass
class StepContext:
    """Everything the backward pass needs from one gated update."""

    theta_prev: np.ndarray
    grad: np.ndarray
    loss: float
    features: np.ndarray
    dfeatures: np.ndarray
    hidden: np.ndarray
    raw: np.ndarray
    gates: GateTriple
    theta0: np.ndarray | None


def meta_forward(meta: MetaParams, theta_prev: Parameters, grad: np.ndarray, loss: float,
                 memory: StaticMemory | None, theta_ref: np.ndarray | None = None,
                 fisher_feature: bool = False) -> Tuple[Parameters, StepContext]:
    """One meta-learner step: features -> gates -> gated update."""
    if theta_ref is None:
        if memory is None:
            raise ValueError("theta_ref is required when no static memory is given")
        theta_ref = memory.theta0
    fisher = None
    if fisher_feature:
        if memory is None:
            raise ValueError("the Fisher feature needs a static memory")
        fisher = memory.fisher
    X, dX = build_features(theta_prev.data, grad, loss, theta_ref, fisher)
    g, hidden, raw = _gate_forward(meta, X)
    theta_new = apply_update(theta_prev, grad, memory, g)
    ctx = StepContext(theta_prev.data, grad, loss, X, dX, hidden, raw, g,
                      None if memory is None else memory.theta0)
    return theta_new, ctx


def meta_backward(meta: MetaParams, ctx: StepContext | None, upstream: np.ndarray,
                  feature_path: bool = True) -> Tuple[MetaParams, np.ndarray]:
    """Reverse-mode through the gated update and the gate net.

    Returns ``(d meta, d theta_prev)``. ``grad`` and the loss feature are
    constants; theta_prev reaches the output directly through ``f`` and
    through its two feature columns.
    """
    if ctx is None:
        raise ValueError("missing forward context")
    g = ctx.gates
    d_raw = np.empty_like(ctx.raw)
    d_raw[:, 0] = upstream * ctx.theta_prev * g.f * (1.0 - g.f)
    d_i = upstream * ctx.grad
    d_raw[:, 1] = d_i * meta.si[0]
    if ctx.theta0 is None:
        d_raw[:, 2] = 0.0
    else:
        d_raw[:, 2] = upstream * ctx.theta0 * g.z * (1.0 - g.z)
    d_pre = (d_raw @ meta.W2) * (1.0 - ctx.hidden**2)
    d_meta = MetaParams(
        W1=d_pre.T @ ctx.features,
        b1=d_pre.sum(axis=0),
        W2=d_raw.T @ ctx.hidden,
        b2=d_raw.sum(axis=0),
        si=np.array([d_i @ ctx.raw[:, 1]]),
    )
    d_theta = g.f * upstream
    if feature_path:
        d_X = d_pre @ meta.W1
        d_theta = d_theta + (d_X * ctx.dfeatures).sum(axis=1)
    return d_meta, d_theta

"""Online meta-training of the gate network by truncated BPTT.

Each unroll scores batch i with the pre-update weights theta_{i-1}, then
applies the gated update. The meta-loss is the sum of those batch losses.
The backward sweep keeps (theta, hidden) snapshots every K steps and
recomputes each K-step segment from its snapshot before reversing it.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .corpus import Batch
from .ewc import StaticMemory, ewc_penalty
from .lm import HiddenState, NumericalError, Parameters, loss_and_grad
from .metalearner import MetaParams, StepContext, meta_backward, meta_forward

log = logging.getLogger(__name__)

LOG_COLUMNS = ("meta_step", "meta_loss", "mean_step_loss", "meta_grad_norm", "theta_drift", "wall_ms")


class CheckpointCorruption(RuntimeError):
    pass


class MetaDivergence(RuntimeError):
    def __init__(self, message: str, log_rows: List[dict]):
        super().__init__(message)
        self.log_rows = log_rows


@dataclass
class UnrollConfig:
    unroll_len: int = 40
    checkpoint_interval: int | None = None  # None -> round(sqrt(unroll_len))
    meta_lr: float = 1e-2
    meta_steps: int = 100
    grad_clip: float = 1.0
    seed: int = 0
    carry_theta: bool = False
    fisher_feature: bool = False
    ewc_lambda: float = 0.0

    def __post_init__(self):
        if self.unroll_len < 1:
            raise ValueError("unroll_len must be >= 1")
        if self.checkpoint_interval is None:
            self.checkpoint_interval = max(1, round(math.sqrt(self.unroll_len)))
        if not 1 <= self.checkpoint_interval <= self.unroll_len:
            raise ValueError("checkpoint_interval must be in [1, unroll_len]")
        if self.meta_lr <= 0 or self.grad_clip <= 0:
            raise ValueError("meta_lr and grad_clip must be positive")
        if self.meta_steps < 0:
            raise ValueError("meta_steps must be >= 0")
        if self.ewc_lambda < 0:
            raise ValueError("ewc_lambda must be >= 0")


@dataclass
class MetaLossReport:
    meta_loss: float
    per_step_losses: np.ndarray
    meta_grad_norm: float = float("nan")
    theta_drift: float = 0.0
    penalty: float = 0.0

    @property
    def objective(self) -> float:
        return self.meta_loss + self.penalty


def _state_hash(theta: np.ndarray, hidden: HiddenState) -> str:
    h = hashlib.sha256()
    for arr in (theta, hidden.h, hidden.c):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class Snapshot:
    theta: np.ndarray
    hidden: HiddenState
    digest: str


@dataclass
class UnrollState:
    """Result of a forward unroll plus what the backward sweep needs."""

    theta: Parameters
    hidden: HiddenState
    batch_cursor: int
    checkpoints: Dict[int, Snapshot]
    meta: MetaParams
    theta_ref: np.ndarray
    memory: StaticMemory | None
    batches: Sequence[Batch]
    cfg: UnrollConfig
    contexts: List[StepContext] | None = None
    live_peak: int = 0


def _step(meta, theta, batch, hidden, memory, theta_ref, cfg):
    out, grad = loss_and_grad(theta, batch, hidden)
    theta_new, ctx = meta_forward(meta, theta, grad, out.mean_loss, memory, theta_ref, cfg.fisher_feature)
    return out, theta_new, ctx


def unroll_forward(meta: MetaParams, theta_start: Parameters, memory: StaticMemory | None,
                   batches: Sequence[Batch], hidden_start: HiddenState | None, cfg: UnrollConfig,
                   store_all: bool = False, theta_ref: np.ndarray | None = None) -> Tuple[MetaLossReport, UnrollState]:
    """Run T_u (score, gradient, gated update) steps from ``theta_start``.

    Without a memory the FLUSH term is off and the drift feature is taken
    relative to ``theta_ref`` (default: ``theta_start``).
    """
    T = cfg.unroll_len
    if len(batches) != T:
        raise ValueError(f"expected {T} batches, got {len(batches)}")
    for a, b in zip(batches, batches[1:]):
        if b.index != a.index + 1:
            raise ValueError("unroll batches must be consecutive")
    K = cfg.checkpoint_interval
    if theta_ref is None:
        theta_ref = memory.theta0 if memory is not None else theta_start.data.copy()
    hidden = hidden_start.copy() if hidden_start is not None else HiddenState.zeros(theta_start.config.hidden_dim)
    theta = theta_start
    losses = np.empty(T)
    penalty = 0.0
    checkpoints: Dict[int, Snapshot] = {}
    contexts = [] if store_all else None
    for step in range(T):
        if step % K == 0:
            checkpoints[step] = Snapshot(theta.data.copy(), hidden.copy(), _state_hash(theta.data, hidden))
        out, theta, ctx = _step(meta, theta, batches[step], hidden, memory, theta_ref, cfg)
        if not np.isfinite(out.mean_loss):
            raise NumericalError(f"non-finite loss at unroll step {step}")
        losses[step] = out.mean_loss
        hidden = out.final_state
        if contexts is not None:
            contexts.append(ctx)
        if cfg.ewc_lambda > 0:
            penalty += ewc_penalty(theta, memory, cfg.ewc_lambda)[0]
    drift = float(np.linalg.norm(theta.data - theta_start.data) / max(np.linalg.norm(theta_start.data), 1e-300))
    report = MetaLossReport(float(losses.sum()), losses, theta_drift=drift, penalty=penalty)
    state = UnrollState(theta, hidden, T, checkpoints, meta, theta_ref, memory, batches, cfg, contexts)
    return report, state


def _recompute_segment(state: UnrollState, start: int, stop: int) -> List[StepContext]:
    snap = state.checkpoints.get(start)
    if snap is None or _state_hash(snap.theta, snap.hidden) != snap.digest:
        raise CheckpointCorruption(f"checkpoint corruption at step {start}")
    theta = Parameters(state.theta.config, snap.theta.copy())
    hidden = snap.hidden.copy()
    contexts = []
    for step in range(start, stop):
        out, theta, ctx = _step(state.meta, theta, state.batches[step], hidden, state.memory, state.theta_ref, state.cfg)
        hidden = out.final_state
        contexts.append(ctx)
    nxt = state.checkpoints.get(stop)
    if nxt is not None and _state_hash(theta.data, hidden) != nxt.digest:
        raise CheckpointCorruption(f"checkpoint corruption: recomputed state at step {stop} does not match its snapshot")
    return contexts


def unroll_backward(state: UnrollState) -> MetaParams:
    """Gradient of the meta-loss w.r.t. the meta parameters (first-order rule)."""
    cfg = state.cfg
    T, K = cfg.unroll_len, cfg.checkpoint_interval
    meta = state.meta
    d_meta = meta.zeros_like().flat()
    upstream = np.zeros(state.theta.size)
    starts = list(range(0, T, K))
    state.live_peak = 0
    for start in reversed(starts):
        stop = min(start + K, T)
        if state.contexts is not None:
            contexts = state.contexts[start:stop]
        else:
            contexts = _recompute_segment(state, start, stop)
        live = len(state.checkpoints) + len(contexts)
        state.live_peak = max(state.live_peak, live)
        for ctx in reversed(contexts):
            if cfg.ewc_lambda > 0:
                theta_t = ctx.gates.f * ctx.theta_prev + ctx.gates.i * ctx.grad
                if ctx.theta0 is not None:
                    theta_t = theta_t + ctx.gates.z * ctx.theta0
                upstream = upstream + ewc_penalty(theta_t, state.memory, cfg.ewc_lambda)[1]
            step_meta, d_theta = meta_backward(meta, ctx, upstream)
            d_meta += step_meta.flat()
            # the step's own loss was scored at theta_prev
            upstream = d_theta + ctx.grad
    return meta.with_flat(d_meta)


def meta_loss_and_grad(meta, theta_start, memory, batches, hidden_start, cfg, store_all=False):
    report, state = unroll_forward(meta, theta_start, memory, batches, hidden_start, cfg, store_all=store_all)
    grad = unroll_backward(state)
    report.meta_grad_norm = float(np.linalg.norm(grad.flat()))
    return report, grad, state


def clip_by_global_norm(vec: np.ndarray, max_norm: float) -> Tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(vec))
    if norm > max_norm:
        vec = vec * (max_norm / norm)
    return vec, norm


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def window_starts(n_batches: int, unroll_len: int) -> List[int]:
    return list(range(0, n_batches - unroll_len + 1, unroll_len))


@dataclass
class TrainResult:
    meta: MetaParams
    log: List[dict] = field(default_factory=list)


def train_meta(meta: MetaParams, theta0_source: Parameters, memory: StaticMemory | None,
               batches: Sequence[Batch], cfg: UnrollConfig) -> TrainResult:
    """Adam on the meta-loss over non-overlapping windows of ``unroll_len`` batches.

    Window order is reshuffled each epoch with ``cfg.seed``. Unless
    ``carry_theta`` is set, every window restarts from ``theta0_source`` and
    a zero hidden state.
    """
    starts = window_starts(len(batches), cfg.unroll_len)
    if not starts:
        raise ValueError(f"need at least {cfg.unroll_len} batches for one unroll window")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.meta_lr)
    vec = meta.flat()
    rows: List[dict] = []
    order: List[int] = []
    theta_ref = memory.theta0 if memory is not None else theta0_source.data.copy()
    theta_carry = theta0_source
    initial = None
    for step in range(cfg.meta_steps):
        if not order:
            order = [starts[k] for k in rng.permutation(len(starts))]
        s = order.pop(0)
        window = batches[s : s + cfg.unroll_len]
        tic = time.perf_counter()
        current = meta.with_flat(vec)
        theta_start = theta_carry if cfg.carry_theta else theta0_source
        report, state = unroll_forward(current, theta_start, memory, window, None, cfg, theta_ref=theta_ref)
        grad = unroll_backward(state).flat()
        grad, norm = clip_by_global_norm(grad, cfg.grad_clip)
        vec = opt.step(vec, grad)
        if cfg.carry_theta:
            theta_carry = state.theta
        row = {
            "meta_step": step,
            "meta_loss": report.meta_loss,
            "mean_step_loss": report.meta_loss / cfg.unroll_len,
            "meta_grad_norm": norm,
            "theta_drift": report.theta_drift,
            "wall_ms": (time.perf_counter() - tic) * 1e3,
        }
        rows.append(row)
        log.debug("meta step %d: loss %.6f grad norm %.3g drift %.3g", step, report.meta_loss, norm, report.theta_drift)
        if initial is None:
            initial = report.meta_loss
        elif report.meta_loss > 10 * initial:
            raise MetaDivergence(f"meta-loss diverged at step {step}: {report.meta_loss:.4g} > 10 x {initial:.4g}", rows)
    return TrainResult(meta.with_flat(vec), rows)

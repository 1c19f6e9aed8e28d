"""Static long-term memory: Laplace approximation around pretrained weights.

The memory is the pair (theta0, fisher), where fisher is the empirical
Fisher diagonal (mean squared per-batch loss gradient).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .corpus import Batch
from .lm import HiddenState, Parameters, loss_and_grad


@dataclass(frozen=True)
class StaticMemory:
    theta0: np.ndarray
    fisher: np.ndarray

    def __post_init__(self):
        if self.theta0.shape != self.fisher.shape:
            raise ValueError("theta0 and fisher lengths differ")
        if np.any(self.fisher < 0):
            raise ValueError("fisher diagonal must be non-negative")
        for arr in (self.theta0, self.fisher):
            arr.setflags(write=False)

    @property
    def size(self) -> int:
        return self.theta0.shape[0]


def estimate_fisher_diag(params: Parameters, batches: Sequence[Batch], state_init: HiddenState | None = None) -> np.ndarray:
    """Mean over batches of the squared gradient, hidden state threaded in corpus order."""
    if len(batches) == 0:
        raise ValueError("need at least one batch to estimate the Fisher diagonal")
    state = state_init if state_init is not None else HiddenState.zeros(params.config.hidden_dim)
    acc = np.zeros(params.size)
    for batch in batches:
        out, grad = loss_and_grad(params, batch, state)
        acc += grad * grad
        state = out.final_state
    return acc / len(batches)


def consolidate(params: Parameters, fisher: np.ndarray) -> StaticMemory:
    fisher = np.asarray(fisher, dtype=np.float64)
    if fisher.shape != (params.size,):
        raise ValueError(f"fisher has length {fisher.shape[0]}, parameters have {params.size}")
    return StaticMemory(params.data.copy(), fisher.copy())


def ewc_penalty(params: Parameters | np.ndarray, memory: StaticMemory, lam: float) -> Tuple[float, np.ndarray]:
    """Quadratic penalty ``lam/2 * sum F (theta - theta0)^2`` and its gradient."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    theta = params.data if isinstance(params, Parameters) else np.asarray(params)
    if theta.shape != memory.theta0.shape:
        raise ValueError("parameter and memory lengths differ")
    diff = theta - memory.theta0
    weighted = memory.fisher * diff
    return 0.5 * lam * float(weighted @ diff), lam * weighted

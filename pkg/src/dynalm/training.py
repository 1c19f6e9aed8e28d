"""Static pretraining of the LM: truncated BPTT, clipped SGD, lr halving on plateau."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .corpus import Batch
from .lm import HiddenState, NumericalError, Parameters, evaluate, loss_and_grad

log = logging.getLogger(__name__)


@dataclass
class PretrainResult:
    params: Parameters
    log: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid: float = float("inf")


def pretrain(params: Parameters, train: Sequence[Batch], valid: Sequence[Batch], lr: float = 1.0,
             epochs: int = 10, clip: float = 0.25, min_lr: float = 1e-3) -> PretrainResult:
    """Returns the best-validation parameters; ``epochs=0`` returns a copy of the input.

    Aborts with NumericalError when an epoch's training loss exceeds ten times
    the loss of the initial weights (the same rule the meta trainer uses).
    """
    params = params.copy()
    best = params.copy()
    result = PretrainResult(best)
    if epochs <= 0:
        return result
    result.best_valid = evaluate(params, valid) if valid else float("inf")
    initial = evaluate(params, train)
    for epoch in range(1, epochs + 1):
        hidden = HiddenState.zeros(params.config.hidden_dim)
        total = 0.0
        for batch in train:
            out, grad = loss_and_grad(params, batch, hidden)
            norm = float(np.linalg.norm(grad))
            if norm > clip:
                grad = grad * (clip / norm)
            params.data -= lr * grad
            if not np.all(np.isfinite(params.data)):
                raise NumericalError(f"parameters diverged during pretraining epoch {epoch}")
            hidden = out.final_state
            total += out.mean_loss
        train_loss = total / max(len(train), 1)
        if not train_loss <= 10 * initial:
            raise NumericalError(f"pretraining diverged in epoch {epoch}: train loss {train_loss:.4g} > 10 x {initial:.4g}")
        valid_loss = evaluate(params, valid) if valid else train_loss
        result.log.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "valid_loss": valid_loss})
        log.info("epoch %d lr %.4g train %.4f valid %.4f", epoch, lr, train_loss, valid_loss)
        if valid_loss < result.best_valid:
            result.best_valid = valid_loss
            result.best_epoch = epoch
            result.params = params.copy()
        else:
            lr = max(lr * 0.5, min_lr)
    return result

"""Online evaluation of model variants and perplexity-gain analyses.

Each batch is scored with the current weights *before* the variant's update
rule runs, so recorded losses always come from theta_{i-1}.

Gain convention: ``gain_i = PPL_A(i) - PPL_B(i)``. Positive means the first
model (A) is locally worse than the second (B).
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .corpus import Batch, Vocabulary
from .ewc import StaticMemory
from .lm import HiddenState, NumericalError, Parameters, forward, loss, loss_and_grad
from .metalearner import MetaParams, fixed_gate_update, meta_forward

KINDS = ("static", "dynamic_fixed", "meta", "meta_with_memory")


@dataclass
class ModelVariant:
    kind: str
    theta: Parameters
    memory: StaticMemory | None = None
    meta: MetaParams | None = None
    constants: Tuple[float, float, float] | None = None
    name: str = ""
    fisher_feature: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown variant kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "meta_with_memory" and self.memory is None:
            raise ValueError("meta_with_memory requires a StaticMemory")
        if self.kind in ("meta", "meta_with_memory") and self.meta is None:
            raise ValueError(f"{self.kind} requires MetaParams")
        if self.kind == "dynamic_fixed" and self.constants is None:
            raise ValueError("dynamic_fixed requires gate constants")
        if not self.name:
            self.name = self.kind

    @classmethod
    def static(cls, theta, name="static"):
        return cls("static", theta, name=name)

    @classmethod
    def dynamic_fixed(cls, theta, f, i, z, memory=None, name="dynamic"):
        return cls("dynamic_fixed", theta, memory=memory, constants=(f, i, z), name=name)

    @classmethod
    def meta_only(cls, theta, meta, name="meta"):
        return cls("meta", theta, meta=meta, name=name)

    @classmethod
    def meta_memory(cls, theta, meta, memory, name="meta_memory", fisher_feature=False):
        return cls("meta_with_memory", theta, memory=memory, meta=meta, name=name, fisher_feature=fisher_feature)


@dataclass
class EvalTrace:
    batch_index: np.ndarray
    batch_loss: np.ndarray
    batch_tokens: np.ndarray
    token_loss: Dict[int, np.ndarray] = field(default_factory=dict)
    name: str = ""

    @property
    def per_batch_loss(self) -> List[Tuple[int, float]]:
        return list(zip(self.batch_index.tolist(), self.batch_loss.tolist()))

    def __len__(self) -> int:
        return len(self.batch_index)


def online_eval(variant: ModelVariant, batches: Sequence[Batch], record_tokens: bool = False,
                hidden: HiddenState | None = None) -> EvalTrace:
    for a, b in zip(batches, batches[1:]):
        if b.index != a.index + 1:
            raise ValueError("evaluation batches must be contiguous and in corpus order")
    theta = variant.theta
    hidden = hidden.copy() if hidden is not None else HiddenState.zeros(theta.config.hidden_dim)
    theta_ref = variant.memory.theta0 if variant.memory is not None else variant.theta.data.copy()
    losses = np.empty(len(batches))
    tokens: Dict[int, np.ndarray] = {}
    for k, batch in enumerate(batches):
        if variant.kind == "static":
            logits, hidden = forward(theta, batch.inputs, hidden)
            out = loss(logits, batch.targets)
        else:
            out, grad = loss_and_grad(theta, batch, hidden)
            hidden = out.final_state
        if not np.isfinite(out.mean_loss):
            raise NumericalError(f"non-finite loss at batch {batch.index}")
        losses[k] = out.mean_loss
        if record_tokens:
            tokens[batch.index] = out.token_losses.copy()
        if variant.kind == "dynamic_fixed":
            theta = fixed_gate_update(theta, grad, variant.memory, variant.constants)
        elif variant.kind == "meta":
            theta, _ = meta_forward(variant.meta, theta, grad, out.mean_loss, None, theta_ref)
        elif variant.kind == "meta_with_memory":
            theta, _ = meta_forward(variant.meta, theta, grad, out.mean_loss, variant.memory,
                                    fisher_feature=variant.fisher_feature)
    return EvalTrace(
        np.array([b.index for b in batches], dtype=np.int64),
        losses,
        np.array([b.size for b in batches], dtype=np.int64),
        tokens,
        variant.name,
    )


def perplexity(trace: EvalTrace) -> float:
    if len(trace) == 0:
        raise ValueError("empty trace")
    return float(np.exp((trace.batch_tokens * trace.batch_loss).sum() / trace.batch_tokens.sum()))


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; the window is truncated at the ends."""
    if window < 1:
        raise ValueError("smooth_window must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    csum = np.concatenate([[0.0], np.cumsum(x)])
    lo = np.clip(np.arange(n) - (window - 1) // 2, 0, n)
    hi = np.clip(np.arange(n) + window // 2 + 1, 0, n)
    if window == 1:
        return x.copy()
    return (csum[hi] - csum[lo]) / (hi - lo)


@dataclass
class GainSeries:
    batch_index: np.ndarray
    gain: np.ndarray
    smoothed: np.ndarray
    name_a: str = "a"
    name_b: str = "b"


def perplexity_gain(trace_a: EvalTrace, trace_b: EvalTrace, smooth_window: int = 1) -> GainSeries:
    common, ia, ib = np.intersect1d(trace_a.batch_index, trace_b.batch_index, return_indices=True)
    if common.size == 0:
        raise ValueError("traces do not overlap")
    gain = np.exp(trace_a.batch_loss[ia]) - np.exp(trace_b.batch_loss[ib])
    return GainSeries(common, gain, moving_average(gain, smooth_window), trace_a.name, trace_b.name)


@dataclass
class TokenDiff:
    batch: int
    tokens: List[str]
    loss_a: np.ndarray
    loss_b: np.ndarray

    @property
    def diff(self) -> np.ndarray:
        return self.loss_a - self.loss_b


def token_loss_diff(trace_a: EvalTrace, trace_b: EvalTrace, batches: Sequence[Batch], target_batch: int,
                    vocab: Vocabulary | None = None) -> TokenDiff:
    """Per-token ``loss_A - loss_B`` on one batch, aligned with the decoded targets."""
    for tr in (trace_a, trace_b):
        if target_batch not in tr.token_loss:
            raise KeyError(f"trace {tr.name!r} has no per-token record for batch {target_batch}")
    batch = next((b for b in batches if b.index == target_batch), None)
    if batch is None:
        raise IndexError(f"batch {target_batch} out of range")
    if vocab is not None:
        tokens = [vocab.id_to_token[int(t)] for t in batch.targets]
    else:
        tokens = [str(int(t)) for t in batch.targets]
    return TokenDiff(target_batch, tokens, trace_a.token_loss[target_batch], trace_b.token_loss[target_batch])


def compare_variants(variant_a: ModelVariant, variant_b: ModelVariant, batches: Sequence[Batch], target_batch: int,
                     vocab: Vocabulary | None = None) -> TokenDiff:
    ta = online_eval(variant_a, batches, record_tokens=True)
    tb = online_eval(variant_b, batches, record_tokens=True)
    return token_loss_diff(ta, tb, batches, target_batch, vocab)


def fmt(x: float) -> str:
    return repr(float(x)) if not np.isfinite(x) else format(float(x), ".17g")


def _atomic_write(path: Path, text: str) -> None:
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def trace_csv(trace: EvalTrace) -> str:
    return _csv(("batch", "loss", "ppl"),
                ((int(i), fmt(l), fmt(np.exp(l))) for i, l in zip(trace.batch_index, trace.batch_loss)))


def gain_csv(gain: GainSeries, annotations: Mapping[int, str] | None = None) -> str:
    header = ["batch", "gain", "smoothed"]
    if annotations is not None:
        header.append("article")
    rows = []
    for i, g, s in zip(gain.batch_index, gain.gain, gain.smoothed):
        row = [int(i), fmt(g), fmt(s)]
        if annotations is not None:
            row.append(annotations.get(int(i), ""))
        rows.append(row)
    return _csv(header, rows)


def tokens_csv(diff: TokenDiff) -> str:
    return _csv(("pos", "token", "loss_a", "loss_b", "diff"),
                ((k, tok, fmt(a), fmt(b), fmt(a - b))
                 for k, (tok, a, b) in enumerate(zip(diff.tokens, diff.loss_a, diff.loss_b))))


def article_labels(boundaries: Sequence[int], batch_index: Sequence[int]) -> Dict[int, str]:
    """Label batches A, B, C, ... by the article they fall in (boundaries are start batches)."""
    bounds = sorted(set(int(b) for b in boundaries))
    labels = {}
    shift = 1 if bounds and bounds[0] <= min(int(i) for i in batch_index) else 0
    for i in batch_index:
        k = int(np.searchsorted(bounds, int(i), side="right")) - shift
        labels[int(i)] = _letters(max(k, 0))
    return labels


def _letters(k: int) -> str:
    s = ""
    k += 1
    while k:
        k, r = divmod(k - 1, 26)
        s = chr(ord("A") + r) + s
    return s


def read_boundaries(path) -> List[int]:
    lines = Path(path).read_text(encoding="utf-8").split()
    return [int(x) for x in lines]


def write_report(traces: Sequence[EvalTrace], gains: Sequence[GainSeries], diffs: Sequence[TokenDiff], out_dir,
                 config: Mapping[str, object] | None = None, annotations: Mapping[int, str] | None = None) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    def emit(name: str, text: str):
        path = out / name
        _atomic_write(path, text)
        written.append(path)

    for tr in traces:
        emit(f"trace_{tr.name}.csv", trace_csv(tr))
    for g in gains:
        emit(f"gain_{g.name_a}_vs_{g.name_b}.csv", gain_csv(g, annotations))
    for d in diffs:
        emit(f"tokens_{d.batch}.csv", tokens_csv(d))
    manifest = {
        "files": [p.name for p in written],
        "traces": {tr.name: {"batches": len(tr), "perplexity": fmt(perplexity(tr))} for tr in traces if len(tr)},
        "gains": [f"gain_{g.name_a}_vs_{g.name_b}.csv" for g in gains] or "none",
        "token_diffs": [d.batch for d in diffs],
        "config": {k: str(v) for k, v in sorted((config or {}).items())},
    }
    emit("report.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return written

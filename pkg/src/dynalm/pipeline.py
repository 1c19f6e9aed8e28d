"""End-to-end commands: gen-corpus, pretrain, consolidate, metatrain, eval, compare.

Each command reads and writes files under ``config.out_dir``:

    vocab.txt, pretrained.ckpt, pretrain_log.csv
    consolidated.ckpt
    meta.ckpt, meta_train.csv, meta_train_nomem.csv
    eval_<variant>/...
    compare_<a>_vs_<b>/...
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from . import evalreport as er
from .checkpoint import Checkpoint, CheckpointError, atomic_write_bytes
from .config import ConfigError, RunConfig
from .corpus import Batch, Vocabulary, build_vocab, encode, make_batches, read_text, split_corpus
from .ewc import StaticMemory, consolidate, estimate_fisher_diag
from .lm import LmConfig, Parameters, init_params
from .metalearner import BASE_FEATURE_DIM, FISHER_FEATURE_DIM, MetaParams, init_meta
from .metatrain import LOG_COLUMNS, UnrollConfig, train_meta
from .synthetic import alternating_corpus, regime_corpus, uniform_corpus
from .training import pretrain

log = logging.getLogger(__name__)

VARIANTS = ("static", "dynamic", "decay", "meta", "meta_memory")
NOMEM_PREFIX = "meta_nomem_"
# paths are left out of the embedded config so relocated runs stay byte-identical
_PATH_KEYS = {"corpus_path", "out_dir", "checkpoint", "boundaries_path"}


@dataclass
class CorpusData:
    vocab: Vocabulary
    train: List[Batch]
    valid: List[Batch]
    test: List[Batch]


def out_path(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out_dir) / name


def load_corpus(cfg: RunConfig) -> CorpusData:
    if not cfg.corpus_path:
        raise ConfigError("corpus_path is not set")
    text = read_text(cfg.corpus_path)
    vocab_file = out_path(cfg, "vocab.txt")
    vocab = Vocabulary.load(vocab_file) if vocab_file.exists() else build_vocab(text, cfg.vocab_mode, cfg.vocab_max_size)
    train, valid, test = split_corpus(encode(text, vocab), cfg.split)
    M = cfg.batch_tokens
    return CorpusData(vocab, make_batches(train, M), make_batches(valid, M), make_batches(test, M))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _snapshot(cfg: RunConfig) -> Dict[str, str]:
    return {f"run.{k}": v for k, v in cfg.to_strings().items() if k not in _PATH_KEYS}


def params_from_checkpoint(ckpt: Checkpoint) -> Parameters:
    try:
        lm_cfg = LmConfig(
            vocab_size=int(ckpt.config["lm.vocab_size"]),
            embed_dim=int(ckpt.config["lm.embed_dim"]),
            hidden_dim=int(ckpt.config["lm.hidden_dim"]),
            tie_embeddings=ckpt.config["lm.tie_embeddings"] == "true",
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint config lacks {exc.args[0]}") from None
    params = Parameters(lm_cfg)
    ckpt.require(*(seg.name for seg in params.layout))
    for seg in params.layout:
        params.view(seg.name)[...] = ckpt[seg.name].reshape(seg.shape)
    return params


def params_to_checkpoint(params: Parameters, ckpt: Checkpoint) -> None:
    c = params.config
    ckpt.config.update({
        "lm.vocab_size": str(c.vocab_size),
        "lm.embed_dim": str(c.embed_dim),
        "lm.hidden_dim": str(c.hidden_dim),
        "lm.tie_embeddings": "true" if c.tie_embeddings else "false",
    })
    for name, view in params.segments():
        ckpt[name] = view


def memory_from_checkpoint(ckpt: Checkpoint) -> StaticMemory:
    ckpt.require("theta0", "fisher")
    return StaticMemory(ckpt["theta0"].copy(), ckpt["fisher"].copy())


def meta_from_checkpoint(ckpt: Checkpoint, prefix: str = "meta_") -> MetaParams:
    ckpt.require(*(prefix + n[len("meta_"):] for n in MetaParams.CHECKPOINT_NAMES))
    return MetaParams.from_dict(ckpt.arrays, prefix)


def _feature_dim(cfg: RunConfig, with_memory: bool) -> int:
    return BASE_FEATURE_DIM + (FISHER_FEATURE_DIM if cfg.fisher_feature and with_memory else 0)


def cmd_gen_corpus(cfg: RunConfig) -> List[Path]:
    if not cfg.corpus_path:
        raise ConfigError("corpus_path is not set")
    path = Path(cfg.corpus_path)
    written = [path]
    if cfg.gen_kind == "alternating":
        text = alternating_corpus(cfg.gen_chars)
    elif cfg.gen_kind == "uniform":
        text = uniform_corpus(cfg.gen_chars, seed=cfg.seed)
    else:
        corpus = regime_corpus(cfg.gen_articles, cfg.gen_article_chars, seed=cfg.seed)
        text = corpus.text
        n = len(text)
        test_start = int(np.floor(cfg.split[0] * n + 1e-9)) + int(np.floor(cfg.split[1] * n + 1e-9))
        bpath = Path(cfg.boundaries_path) if cfg.boundaries_path else out_path(cfg, "boundaries.txt")
        bounds = corpus.boundary_batches(test_start, cfg.batch_tokens)
        atomic_write_bytes(bpath, "".join(f"{b}\n" for b in bounds).encode())
        written.append(bpath)
    atomic_write_bytes(path, text.encode("utf-8"))
    return written


def cmd_pretrain(cfg: RunConfig) -> Path:
    data = load_corpus(cfg)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    data.vocab.save(out_path(cfg, "vocab.txt"))
    lm_cfg = LmConfig(data.vocab.size, cfg.embed_dim, cfg.hidden_dim, cfg.tie_embeddings)
    result = pretrain(init_params(lm_cfg, cfg.seed), data.train, data.valid, lr=cfg.pretrain_lr,
                      epochs=cfg.pretrain_epochs, clip=cfg.pretrain_clip)
    rows = [(r["epoch"], er.fmt(r["lr"]), er.fmt(r["train_loss"]), er.fmt(r["valid_loss"])) for r in result.log]
    atomic_write_bytes(out_path(cfg, "pretrain_log.csv"),
                       _csv_text(("epoch", "lr", "train_loss", "valid_loss"), rows).encode())
    ckpt = Checkpoint(config=_snapshot(cfg))
    params_to_checkpoint(result.params, ckpt)
    return ckpt.save(out_path(cfg, "pretrained.ckpt"))


def _input_checkpoint(cfg: RunConfig, default: str) -> Checkpoint:
    path = Path(cfg.checkpoint) if cfg.checkpoint else out_path(cfg, default)
    return Checkpoint.load(path)


def cmd_consolidate(cfg: RunConfig) -> Path:
    ckpt = _input_checkpoint(cfg, "pretrained.ckpt")
    params = params_from_checkpoint(ckpt)
    data = load_corpus(cfg)
    batches = data.train[: cfg.fisher_batches] if cfg.fisher_batches else data.train
    memory = consolidate(params, estimate_fisher_diag(params, batches))
    ckpt["theta0"] = memory.theta0
    ckpt["fisher"] = memory.fisher
    ckpt.config.update(_snapshot(cfg))
    return ckpt.save(out_path(cfg, "consolidated.ckpt"))


def unroll_config(cfg: RunConfig, with_memory: bool) -> UnrollConfig:
    return UnrollConfig(
        unroll_len=cfg.unroll_len,
        checkpoint_interval=cfg.checkpoint_interval or None,
        meta_lr=cfg.meta_lr,
        meta_steps=cfg.meta_steps,
        grad_clip=cfg.grad_clip,
        seed=cfg.seed,
        carry_theta=cfg.carry_theta,
        fisher_feature=cfg.fisher_feature and with_memory,
        ewc_lambda=cfg.ewc_lambda if with_memory else 0.0,
    )


def _log_csv(rows) -> bytes:
    return _csv_text(LOG_COLUMNS, ([r["meta_step"]] + [er.fmt(r[c]) for c in LOG_COLUMNS[1:]] for r in rows)).encode()


def cmd_metatrain(cfg: RunConfig) -> Path:
    ckpt = _input_checkpoint(cfg, "consolidated.ckpt")
    params = params_from_checkpoint(ckpt)
    memory = memory_from_checkpoint(ckpt)
    data = load_corpus(cfg)
    runs = [("meta_", memory, "meta_train.csv")]
    if cfg.train_two_level:
        runs.append((NOMEM_PREFIX, None, "meta_train_nomem.csv"))
    for prefix, mem, log_name in runs:
        meta = init_meta(_feature_dim(cfg, mem is not None), cfg.meta_hidden, cfg.seed)
        result = train_meta(meta, params, mem, data.train, unroll_config(cfg, mem is not None))
        for name, arr in result.meta.to_dict(prefix).items():
            ckpt[name] = arr
        atomic_write_bytes(out_path(cfg, log_name), _log_csv(result.log))
    ckpt.config.update(_snapshot(cfg))
    return ckpt.save(out_path(cfg, "meta.ckpt"))


def _latest_checkpoint(cfg: RunConfig) -> Checkpoint:
    if cfg.checkpoint:
        return Checkpoint.load(cfg.checkpoint)
    for name in ("meta.ckpt", "consolidated.ckpt", "pretrained.ckpt"):
        if out_path(cfg, name).exists():
            return Checkpoint.load(out_path(cfg, name))
    raise FileNotFoundError(f"no checkpoint found in {cfg.out_dir}")


def build_variant(name: str, ckpt: Checkpoint, cfg: RunConfig) -> er.ModelVariant:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    params = params_from_checkpoint(ckpt)
    if name == "static":
        return er.ModelVariant.static(params, name=name)
    if name == "dynamic":
        return er.ModelVariant.dynamic_fixed(params, 1.0, -cfg.dyn_lr, 0.0, name=name)
    if name == "decay":
        memory = memory_from_checkpoint(ckpt)
        return er.ModelVariant.dynamic_fixed(params, 1.0 - cfg.dyn_decay, -cfg.dyn_lr, cfg.dyn_decay,
                                             memory=memory, name=name)
    if name == "meta":
        return er.ModelVariant.meta_only(params, meta_from_checkpoint(ckpt, NOMEM_PREFIX), name=name)
    memory = memory_from_checkpoint(ckpt)
    meta = meta_from_checkpoint(ckpt)
    return er.ModelVariant.meta_memory(params, meta, memory, name=name,
                                       fisher_feature=meta.feature_dim == BASE_FEATURE_DIM + FISHER_FEATURE_DIM)


def cmd_eval(cfg: RunConfig, variant: str | None = None) -> List[Path]:
    name = variant or cfg.variant
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    ckpt = _latest_checkpoint(cfg)
    var = build_variant(name, ckpt, cfg)
    data = load_corpus(cfg)
    trace = er.online_eval(var, data.test)
    return er.write_report([trace], [], [], out_path(cfg, f"eval_{name}"), config=_eval_manifest(cfg, name))


def _eval_manifest(cfg: RunConfig, *names: str) -> Dict[str, str]:
    out = {k: v for k, v in cfg.to_strings().items() if k not in _PATH_KEYS}
    out["variants"] = ",".join(names)
    return out


def cmd_compare(cfg: RunConfig, variant_a: str | None = None, variant_b: str | None = None) -> List[Path]:
    a, b = variant_a or cfg.variant_a, variant_b or cfg.variant_b
    ckpt = _latest_checkpoint(cfg)
    va, vb = build_variant(a, ckpt, cfg), build_variant(b, ckpt, cfg)
    if a == b:
        vb.name = f"{b}_2"
    data = load_corpus(cfg)
    bad = [i for i in cfg.token_batches if not 0 <= i < len(data.test)]
    if bad:
        raise ConfigError(f"token_batches out of range (test split has {len(data.test)} batches): {bad}")
    ta = er.online_eval(va, data.test, record_tokens=True)
    tb = er.online_eval(vb, data.test, record_tokens=True)
    gain = er.perplexity_gain(ta, tb, cfg.smooth_window)
    diffs = [er.token_loss_diff(ta, tb, data.test, i, data.vocab) for i in cfg.token_batches]
    annotations = None
    if cfg.boundaries_path:
        annotations = er.article_labels(er.read_boundaries(cfg.boundaries_path), gain.batch_index)
    return er.write_report([ta, tb], [gain], diffs, out_path(cfg, f"compare_{va.name}_vs_{vb.name}"),
                           config=_eval_manifest(cfg, va.name, vb.name), annotations=annotations)

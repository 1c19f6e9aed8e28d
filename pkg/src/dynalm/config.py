"""Flat ``key = value`` run configuration with command-line overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

SEED_ENV = "DYNALM_SEED"


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


@dataclass
class RunConfig:
    corpus_path: str = ""
    vocab_mode: str = "character"
    vocab_max_size: int = 10_000
    batch_tokens: int = 64
    split: Tuple[float, ...] = (0.8, 0.1, 0.1)
    embed_dim: int = 16
    hidden_dim: int = 32
    tie_embeddings: bool = False
    pretrain_lr: float = 1.0
    pretrain_epochs: int = 8
    pretrain_clip: float = 0.25
    fisher_batches: int = 0  # 0 = the whole training split
    unroll_len: int = 40
    checkpoint_interval: int = 0  # 0 = round(sqrt(unroll_len))
    meta_lr: float = 0.01
    meta_steps: int = 100
    grad_clip: float = 1.0
    meta_hidden: int = 16
    carry_theta: bool = False
    fisher_feature: bool = False
    ewc_lambda: float = 0.0
    train_two_level: bool = True
    dyn_lr: float = 0.1
    dyn_decay: float = 0.02
    variant: str = "meta_memory"
    variant_a: str = "static"
    variant_b: str = "meta"
    token_batches: Tuple[int, ...] = ()
    smooth_window: int = 25
    boundaries_path: str = ""
    checkpoint: str = ""
    gen_kind: str = "regime"
    gen_articles: int = 80
    gen_article_chars: int = 1920
    gen_chars: int = 20_000
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems: List[str] = []
        if self.vocab_mode not in ("character", "word"):
            problems.append(f"vocab_mode must be 'character' or 'word', got {self.vocab_mode!r}")
        for name in ("vocab_max_size", "batch_tokens", "embed_dim", "hidden_dim", "unroll_len", "meta_hidden",
                     "smooth_window", "gen_articles", "gen_article_chars", "gen_chars"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("pretrain_epochs", "fisher_batches", "checkpoint_interval", "meta_steps"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("pretrain_lr", "pretrain_clip", "meta_lr", "grad_clip"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be > 0")
        if self.ewc_lambda < 0:
            problems.append("ewc_lambda must be >= 0")
        if self.checkpoint_interval > self.unroll_len:
            problems.append("checkpoint_interval must not exceed unroll_len")
        if len(self.split) != 3 or any(f <= 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            problems.append(f"split must be three positive fractions summing to 1, got {self.split}")
        if self.tie_embeddings and self.embed_dim != self.hidden_dim:
            problems.append("tie_embeddings requires embed_dim == hidden_dim")
        if self.gen_kind not in ("regime", "uniform", "alternating"):
            problems.append(f"gen_kind must be regime, uniform or alternating, got {self.gen_kind!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_strings(cls, values: Mapping[str, str]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            default = getattr(cls, key, None)
            try:
                kwargs[key] = _parse_like(default, raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        return cls(**kwargs)

    def to_strings(self) -> Dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                out[f.name] = "true" if value else "false"
            elif isinstance(value, tuple):
                out[f.name] = ",".join(repr(v) for v in value)
            else:
                out[f.name] = str(value)
        return out


def _parse_like(default, raw: str):
    raw = raw.strip()
    if isinstance(default, bool):
        return _bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return _floats(raw) if default and isinstance(default[0], float) else _ints(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def load_config(path: str | None = None, overrides: Mapping[str, str] | None = None,
                environ: Mapping[str, str] | None = None) -> RunConfig:
    """Config file, then ``--key value`` overrides, then ``DYNALM_SEED``."""
    values: Dict[str, str] = {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text, str(path)))
    values.update(overrides or {})
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV):
        values["seed"] = environ[SEED_ENV]
    return RunConfig.from_strings(values)


def write_config(config: RunConfig, path) -> None:
    lines = [f"{k} = {v}" for k, v in config.to_strings().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

"""Text ingestion, vocabularies, tokenization and sequential mini-batching."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

UNK = "<unk>"
VOCAB_MAGIC = "dynalm-vocab"
VOCAB_VERSION = "v1"

_ESCAPES = {"\\": "\\\\", "\n": "\\n", "\r": "\\r", "\t": "\\t"}
_UNESCAPES = {"\\": "\\", "n": "\n", "r": "\r", "t": "\t"}


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: Tuple[str, ...]
    mode: str = "character"
    unk_id: int | None = None
    token_to_id: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in ("character", "word"):
            raise ValueError(f"unknown vocabulary mode {self.mode!r}")
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def decode(self, ids: Sequence[int]) -> str:
        sep = "" if self.mode == "character" else " "
        return sep.join(self.id_to_token[int(i)] for i in ids)

    def save(self, path) -> None:
        lines = [f"{VOCAB_MAGIC} {VOCAB_VERSION} {self.mode} {self.size}"]
        lines += [_escape(tok) for tok in self.id_to_token]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        header = lines[0].split(" ")
        if len(header) != 4 or header[0] != VOCAB_MAGIC or header[1] != VOCAB_VERSION:
            raise ValueError(f"{path}: not a {VOCAB_MAGIC} {VOCAB_VERSION} file")
        mode, size = header[2], int(header[3])
        tokens = tuple(_unescape(line) for line in lines[1 : 1 + size])
        if len(tokens) != size:
            raise ValueError(f"{path}: expected {size} tokens, found {len(tokens)}")
        unk_id = tokens.index(UNK) if mode == "word" else None
        return cls(tokens, mode=mode, unk_id=unk_id)


def _escape(tok: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in tok)


def _unescape(line: str) -> str:
    out = []
    it = iter(line)
    for ch in it:
        if ch == "\\":
            nxt = next(it, "")
            out.append(_UNESCAPES.get(nxt, nxt))
        else:
            out.append(ch)
    return "".join(out)


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])

    def __len__(self) -> int:
        return self.length


@dataclass(frozen=True)
class Batch:
    index: int
    inputs: np.ndarray
    targets: np.ndarray

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])


def _split(text: str, mode: str) -> List[str]:
    return list(text) if mode == "character" else text.split()


def build_vocab(text: str, mode: str = "character", max_size: int = 10_000) -> Vocabulary:
    """Build a vocabulary with ids assigned by descending frequency.

    Ties are broken lexicographically so the result only depends on the text.
    In word mode the UNK token always takes id 0 and counts toward ``max_size``.
    """
    if not text:
        raise ValueError("empty corpus")
    if mode not in ("character", "word"):
        raise ValueError(f"unknown vocabulary mode {mode!r}")
    counts = Counter(_split(text, mode))
    if not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if mode == "word":
        words = [w for w, _ in ranked if w != UNK][: max(max_size - 1, 0)]
        return Vocabulary((UNK, *words), mode="word", unk_id=0)
    return Vocabulary(tuple(ch for ch, _ in ranked[:max_size]), mode="character")


def encode(text: str, vocab: Vocabulary) -> TokenSequence:
    table = vocab.token_to_id
    if vocab.mode == "word":
        return TokenSequence([table.get(w, vocab.unk_id) for w in text.split()])
    ids = []
    for offset, ch in enumerate(text):
        try:
            ids.append(table[ch])
        except KeyError:
            raise ValueError(f"character {ch!r} at offset {offset} is not in the vocabulary") from None
    return TokenSequence(ids)


def make_batches(tokens: TokenSequence | Sequence[int], M: int) -> List[Batch]:
    """Tile a stream into consecutive windows of ``M`` inputs and shifted targets.

    The trailing remainder that cannot fill a full window is dropped.
    """
    ids = tokens.ids if isinstance(tokens, TokenSequence) else np.asarray(tokens, dtype=np.int64)
    if M < 1:
        raise ValueError("M must be >= 1")
    if len(ids) < M + 1:
        raise ValueError("sequence too short")
    n = (len(ids) - 1) // M
    return [Batch(i, ids[i * M : i * M + M], ids[i * M + 1 : i * M + M + 1]) for i in range(n)]


def split_corpus(tokens: TokenSequence, fractions=(0.8, 0.1, 0.1)) -> Tuple[TokenSequence, TokenSequence, TokenSequence]:
    """Contiguous train/valid/test split; the rounding remainder goes to the last part."""
    if len(fractions) != 3:
        raise ValueError("expected three fractions")
    if any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be positive, got {tuple(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)!r}")
    T = tokens.length
    n_train = int(math.floor(fractions[0] * T + 1e-9))
    n_valid = int(math.floor(fractions[1] * T + 1e-9))
    ids = tokens.ids
    return (
        TokenSequence(ids[:n_train]),
        TokenSequence(ids[n_train : n_train + n_valid]),
        TokenSequence(ids[n_train + n_valid :]),
    )


def read_text(path) -> str:
    return Path(path).read_text(encoding="utf-8")

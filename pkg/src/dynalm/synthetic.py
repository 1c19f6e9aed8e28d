"""Synthetic desk corpora.

``regime_corpus`` concatenates "articles". All articles share a pool of
common words; each article also has its own small set of topic words that
recur throughout it and never appear elsewhere. A static model cannot know
the topic words in advance, while a model that adapts online can pick them
up as the article goes on.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import List

import numpy as np

LETTERS = string.ascii_lowercase


def alternating_corpus(length: int, symbols: str = "ab") -> str:
    reps = length // len(symbols) + 1
    return (symbols * reps)[:length]


def uniform_corpus(length: int, alphabet: str = LETTERS[:8], seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    return "".join(rng.choice(list(alphabet), size=length))


def _word(rng, lo: int, hi: int, alphabet: str = LETTERS) -> str:
    return "".join(rng.choice(list(alphabet), size=int(rng.integers(lo, hi + 1))))


@dataclass
class RegimeCorpus:
    text: str
    article_offsets: List[int]  # character offset where each article starts
    topic_words: List[List[str]]

    def boundary_batches(self, start_char: int, M: int) -> List[int]:
        """Batch indices (relative to a stream starting at ``start_char``) where articles begin."""
        out = []
        for off in self.article_offsets:
            rel = off - start_char
            if rel >= 0:
                out.append(rel // M)
        return sorted(set(out))


def regime_corpus(n_articles: int, article_chars: int, seed: int = 0, n_common: int = 24,
                  n_topic: int = 6, topic_prob: float = 0.45, common_seed: int = 12345) -> RegimeCorpus:
    """Concatenated articles of ``article_chars`` characters each.

    The common-word pool depends only on ``common_seed`` so that corpora
    generated with different ``seed`` values (train vs test) share it.
    """
    pool_rng = np.random.default_rng(common_seed)
    common = sorted({_word(pool_rng, 2, 5) for _ in range(n_common)})
    zipf = 1.0 / np.arange(1, len(common) + 1)
    zipf /= zipf.sum()
    rng = np.random.default_rng(seed)
    parts, offsets, topics = [], [], []
    pos = 0
    for _ in range(n_articles):
        topic = [_word(rng, 5, 9) for _ in range(n_topic)]
        chunk = []
        size = 0
        since_stop = 0
        while size < article_chars:
            if rng.random() < topic_prob:
                w = topic[int(rng.integers(len(topic)))]
            else:
                w = common[int(rng.choice(len(common), p=zipf))]
            since_stop += 1
            if since_stop >= 6 and rng.random() < 0.25:
                w += "."
                since_stop = 0
            chunk.append(w)
            size += len(w) + 1
        text = (" ".join(chunk) + " ")[:article_chars]
        offsets.append(pos)
        topics.append(topic)
        parts.append(text)
        pos += len(text)
    return RegimeCorpus("".join(parts), offsets, topics)

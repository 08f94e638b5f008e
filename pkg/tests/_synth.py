"""Deterministic toy-corpus generator with planted synonym pairs.

Sentences follow a first-order topic chain over a Zipf-weighted
vocabulary, so a small LSTM can beat a unigram model within a few
epochs.  A handful of mid-frequency words get a twin that substitutes
for them at random; twins share successor and predecessor contexts by
construction, which makes them geometric near-neighbours once an
embedding is trained.  Same arguments and seed, same corpus.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NUM_CLUSTERS = 10
NEXT_CLUSTER_WEIGHT = 0.75
TWIN_SUBSTITUTION_RATE = 0.45
FIRST_TWIN_RANK = 15


@dataclass(frozen=True)
class ToyCorpus:
    lines: list[str]
    synonym_pairs: list[tuple[str, str]]


def make_corpus(num_tokens: int = 50_000, vocab_size: int = 300,
                seed: int = 0, num_synonym_pairs: int = 6,
                zipf_exponent: float = 1.1,
                mean_sentence_len: float = 9.0) -> ToyCorpus:
    """Generate at least ``num_tokens`` tokens of clustered Zipf text."""
    num_base = vocab_size - num_synonym_pairs
    if num_base <= FIRST_TWIN_RANK + num_synonym_pairs:
        raise ValueError(f"vocab_size {vocab_size} too small for "
                         f"{num_synonym_pairs} synonym pairs")
    rng = np.random.default_rng(seed)

    words = [f"w{i:03d}" for i in range(num_base)]
    twin_of = {}
    pairs = []
    for j in range(num_synonym_pairs):
        base = FIRST_TWIN_RANK + j
        twin_of[base] = f"v{base:03d}"
        pairs.append((words[base], twin_of[base]))

    ranks = np.arange(num_base)
    zipf = (ranks + 2.0) ** -zipf_exponent
    zipf /= zipf.sum()
    clusters = ranks % NUM_CLUSTERS

    # per-cluster successor distributions, mixed with the global weights
    cluster_dists = []
    for c in range(NUM_CLUSTERS):
        members = clusters == (c + 1) % NUM_CLUSTERS
        local = np.where(members, zipf, 0.0)
        local /= local.sum()
        mix = NEXT_CLUSTER_WEIGHT * local + (1 - NEXT_CLUSTER_WEIGHT) * zipf
        cluster_dists.append(mix / mix.sum())

    lines = []
    total = 0
    while total < num_tokens:
        length = 3 + rng.poisson(mean_sentence_len)
        word_id = rng.choice(num_base, p=zipf)
        sentence = []
        for _ in range(length):
            token = words[word_id]
            if word_id in twin_of and \
                    rng.random() < TWIN_SUBSTITUTION_RATE:
                token = twin_of[word_id]
            sentence.append(token)
            word_id = rng.choice(num_base, p=cluster_dists[clusters[word_id]])
        lines.append(" ".join(sentence))
        total += length
    return ToyCorpus(lines=lines, synonym_pairs=pairs)


def split_corpus(corpus: ToyCorpus,
                 valid_fraction: float = 0.1) -> tuple[list[str], list[str]]:
    """Deterministic head/tail split into train and validation lines."""
    if not 0.0 < valid_fraction < 1.0:
        raise ValueError(f"valid_fraction must be in (0, 1), "
                         f"got {valid_fraction}")
    cut = max(1, int(len(corpus.lines) * (1.0 - valid_fraction)))
    return corpus.lines[:cut], corpus.lines[cut:]

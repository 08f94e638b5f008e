"""Corpus ingestion, vocabulary construction, and BPTT batching.

Text is whitespace-tokenized, one sentence per line, with a ``<sb>``
boundary token appended to every line.  Word ids equal frequency ranks:
id 0 is the most frequent word, ties broken lexicographically, and the
special tokens are ranked by their own counts like ordinary words.  That
makes count-based and rank-based vector-norm scalings a pure function of
the id.
"""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNK = "<unk>"
SENTENCE_BOUNDARY = "<sb>"


def read_lines(path) -> list[str]:
    """Read a UTF-8 corpus file into lines, rejecting bad bytes by offset."""
    data = Path(path).read_bytes()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ValueError(
            f"{path}: invalid UTF-8 at byte offset {exc.start}"
        ) from None
    return text.splitlines()


def _tokenize(line: str, lowercase: bool) -> list[str]:
    if lowercase:
        line = line.lower()
    return line.split()


@dataclass(eq=False)
class Vocabulary:
    """Immutable word table sorted by descending count.

    ``counts[0]`` is maximal and ``counts`` is non-increasing, so a word's
    id is its frequency rank.  ``<unk>`` carries the exact number of folded
    out-of-vocabulary occurrences, which may be zero.
    """

    words: list[str]
    counts: np.ndarray
    unk_id: int
    sb_id: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self._stoi = {w: i for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        return self._stoi.get(word, self.unk_id)

    def __contains__(self, word: str) -> bool:
        return word in self._stoi

    def sha256(self) -> str:
        """Content hash used to pair checkpoints with their vocabulary."""
        h = hashlib.sha256()
        for w, c in zip(self.words, self.counts):
            h.update(f"{w}\t{int(c)}\n".encode("utf-8"))
        return h.hexdigest()

    def save_tsv(self, path) -> None:
        """Write ``word<TAB>count`` lines in id order."""
        with open(path, "w", encoding="utf-8") as f:
            for w, c in zip(self.words, self.counts):
                f.write(f"{w}\t{int(c)}\n")

    @staticmethod
    def load_tsv(path) -> "Vocabulary":
        words: list[str] = []
        counts: list[int] = []
        for i, line in enumerate(read_lines(path)):
            if not line:
                continue
            try:
                word, count = line.split("\t")
                counts.append(int(count))
            except ValueError:
                raise ValueError(
                    f"{path}: line {i + 1} is not 'word<TAB>count'"
                ) from None
            words.append(word)
        return _assemble(words, counts)


def _assemble(words: list[str], counts: list[int]) -> Vocabulary:
    arr = np.asarray(counts, dtype=np.int64)
    if np.any(arr[:-1] < arr[1:]):
        raise ValueError("vocabulary counts are not non-increasing")
    for special in (UNK, SENTENCE_BOUNDARY):
        if special not in words:
            raise ValueError(f"vocabulary is missing the {special} token")
    return Vocabulary(words, arr, words.index(UNK),
                      words.index(SENTENCE_BOUNDARY))


def build_vocab(lines: Iterable[str], min_count: int = 1,
                max_size: int | None = None,
                lowercase: bool = False) -> Vocabulary:
    """Count tokens and assign ids by descending count.

    Words with fewer than ``min_count`` occurrences, and any beyond
    ``max_size`` after sorting, fold their counts into ``<unk>``.  The
    boundary token is counted once per line.  ``max_size`` bounds the
    ordinary words; the two specials always remain.
    """
    raw = Counter()
    total = 0
    num_lines = 0
    for line in lines:
        toks = _tokenize(line, lowercase)
        raw.update(toks)
        total += len(toks)
        num_lines += 1
    if total == 0:
        raise ValueError("empty corpus: no tokens found")
    raw.pop(UNK, None)
    raw.pop(SENTENCE_BOUNDARY, None)

    ranked = sorted(raw.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [(w, c) for w, c in ranked if c >= min_count]
    if max_size is not None:
        kept = kept[:max_size]
    unk_count = total - sum(c for _, c in kept)
    entries = kept + [(UNK, unk_count), (SENTENCE_BOUNDARY, num_lines)]
    entries.sort(key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in entries]
    counts = [c for _, c in entries]
    return Vocabulary(words, np.asarray(counts, dtype=np.int64),
                      words.index(UNK), words.index(SENTENCE_BOUNDARY))


def encode(vocab: Vocabulary, lines: Iterable[str],
           lowercase: bool = False) -> np.ndarray:
    """Map lines to a flat id sequence, OOV to unk, ``<sb>`` per line."""
    out: list[int] = []
    for line in lines:
        out.extend(vocab.id_of(t) for t in _tokenize(line, lowercase))
        out.append(vocab.sb_id)
    return np.asarray(out, dtype=np.int64)


def decode(vocab: Vocabulary, ids: Sequence[int]) -> list[str]:
    return [vocab.words[int(i)] for i in ids]


@dataclass(frozen=True)
class Batch:
    """One BPTT window: ``targets`` is ``inputs`` shifted by one token
    within each stream.  ``carry_state`` marks continuation of the
    previous window."""

    inputs: np.ndarray
    targets: np.ndarray
    carry_state: bool


def batches(ids: np.ndarray, num_streams: int,
            bptt_len: int) -> list[Batch]:
    """Split an id sequence into parallel streams and cut BPTT windows.

    The sequence is divided into ``num_streams`` equal contiguous chunks
    (trailing remainder dropped), stacked as rows, and sliced into full
    windows of ``bptt_len``; a trailing partial window is dropped.
    """
    ids = np.asarray(ids, dtype=np.int64)
    need = num_streams * (bptt_len + 1)
    if ids.size < need:
        raise ValueError(
            f"need at least {need} ids for {num_streams} streams of "
            f"bptt {bptt_len}, got {ids.size}"
        )
    stream_len = ids.size // num_streams
    streams = ids[: num_streams * stream_len].reshape(num_streams, stream_len)
    out = []
    for k in range((stream_len - 1) // bptt_len):
        lo = k * bptt_len
        out.append(Batch(streams[:, lo:lo + bptt_len],
                         streams[:, lo + 1:lo + bptt_len + 1],
                         carry_state=k > 0))
    return out

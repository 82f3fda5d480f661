"""Byte-level tokenization and corpus preparation.

The vocabulary is the 256 byte values plus one reserved separator id.
Documents are joined with the separator and the resulting token stream is
chunked into fixed-length, non-overlapping windows; a seeded permutation
splits the windows into disjoint train and eval sets.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

SEPARATOR_BYTE = 0x1E
SEPARATOR_ID = 256
VOCAB_SIZE = 257


def tokenize(data: bytes) -> np.ndarray:
    """Bytes to token ids; the separator byte maps to the reserved id."""
    ids = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    ids[ids == SEPARATOR_BYTE] = SEPARATOR_ID
    return ids


def detokenize(ids) -> bytes:
    """Token ids back to bytes; inverse of tokenize on any byte string."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise IndexError(
            f"token id out of range [0, {VOCAB_SIZE}): min={ids.min()}, max={ids.max()}"
        )
    out = ids.copy()
    out[out == SEPARATOR_ID] = SEPARATOR_BYTE
    return out.astype(np.uint8).tobytes()


@dataclass
class Corpus:
    tokens: np.ndarray
    seq_len: int
    train_windows: np.ndarray
    eval_windows: np.ndarray
    train_indices: np.ndarray
    eval_indices: np.ndarray

    @property
    def n_windows(self) -> int:
        return self.train_windows.shape[0] + self.eval_windows.shape[0]


def split_windows(
    tokens: np.ndarray, seq_len: int, eval_fraction: float, seed: int
) -> Corpus:
    """Chunk a token stream into windows and split train/eval disjointly."""
    if seq_len < 2:
        raise ConfigError(f"seq_len must be >= 2, got {seq_len}")
    n_windows = tokens.shape[0] // seq_len
    if n_windows < 1:
        raise DataError(
            f"corpus holds {tokens.shape[0]} tokens, fewer than one {seq_len}-token window"
        )
    windows = tokens[: n_windows * seq_len].reshape(n_windows, seq_len)
    perm = np.random.default_rng([seed, 1]).permutation(n_windows)
    n_eval = int(round(eval_fraction * n_windows)) if eval_fraction > 0 else 0
    if eval_fraction > 0:
        n_eval = max(1, min(n_eval, n_windows - 1))
    eval_idx = np.sort(perm[:n_eval])
    train_idx = np.sort(perm[n_eval:])
    return Corpus(
        tokens=tokens,
        seq_len=seq_len,
        train_windows=windows[train_idx],
        eval_windows=windows[eval_idx],
        train_indices=train_idx,
        eval_indices=eval_idx,
    )


def load_corpus(
    paths: Sequence[str | Path] | str | Path,
    seq_len: int,
    eval_fraction: float = 0.05,
    seed: int = 0,
) -> Corpus:
    """Read one or more text files and prepare train/eval windows."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    pieces: list[np.ndarray] = []
    for path in paths:
        path = Path(path)
        if not path.is_file():
            raise DataError(f"corpus file not found: {path}")
        pieces.append(tokenize(path.read_bytes()))
    if not pieces:
        raise DataError("no corpus files given")
    stream: list[np.ndarray] = []
    for i, piece in enumerate(pieces):
        if i:
            stream.append(np.array([SEPARATOR_ID], dtype=np.int64))
        stream.append(piece)
    return split_windows(np.concatenate(stream), seq_len, eval_fraction, seed)


# Word stock for the synthetic corpus: enough structure for a byte model
# to learn from, zero external data dependencies.
_NOUNS = (
    "river valley machine garden signal window harbor meadow lantern circuit "
    "forest engine market bridge compass mountain library anchor bottle craft "
    "cloud mirror stone keeper road thread needle barrel furnace island"
).split()
_VERBS = (
    "carries turns holds follows crosses gathers measures builds guards opens "
    "closes lifts traces joins splits repairs powers signals feeds shelters"
).split()
_ADJS = (
    "quiet bright heavy narrow ancient steady broken silver distant careful "
    "rapid hollow gentle crooked patient warm pale rough simple deep"
).split()
_ADVS = "slowly often rarely twice again almost nearly always never everywhere".split()


def synthetic_text(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic pseudo-prose of roughly ``n_bytes`` bytes.

    Sentences are drawn from a small template grammar with rank-weighted
    word choice, giving the moderate byte-level redundancy of plain text.
    """
    rng = np.random.default_rng([seed, 2])

    def ranked(words):
        weights = 1.0 / np.arange(1, len(words) + 1) ** 0.8
        weights /= weights.sum()
        return lambda: words[rng.choice(len(words), p=weights)]

    noun, verb, adj, adv = ranked(_NOUNS), ranked(_VERBS), ranked(_ADJS), ranked(_ADVS)
    templates = (
        lambda: f"the {adj()} {noun()} {verb()} the {noun()}",
        lambda: f"a {noun()} {adv()} {verb()} beside the {adj()} {noun()}",
        lambda: f"every {noun()} {verb()} when the {noun()} {verb()}",
        lambda: f"the {noun()} of the {noun()} {verb()} {adv()}",
        lambda: f"{adv()} the {adj()} {noun()} {verb()}",
    )
    parts: list[str] = []
    total = 0
    sentence_in_par = 0
    while total < n_bytes:
        sentence = templates[rng.integers(len(templates))]()
        sentence = sentence[0].upper() + sentence[1:] + "."
        sep = "\n\n" if sentence_in_par >= rng.integers(3, 7) else " "
        if sep == "\n\n":
            sentence_in_par = 0
        sentence_in_par += 1
        piece = (sep if parts else "") + sentence
        parts.append(piece)
        total += len(piece)
    return "".join(parts).encode("utf-8")[:n_bytes]

"""Desk-scale tokenization (byte or char level), corpus loading and splitting."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Vocab",
    "CorpusSplit",
    "UnknownSymbolError",
    "build_vocab",
    "load_corpus_text",
    "corpus_sequences",
    "split_corpus",
]

DEFAULT_MAX_SEQ_LEN = 256


class UnknownSymbolError(ValueError):
    """A symbol in the input text is not part of the vocabulary."""


@dataclass(frozen=True)
class Vocab:
    """Fixed vocabulary mapping atomic symbols to ids 0..V-1.

    ``mode`` is "byte" (symbols are byte values 0..255) or "char"
    (symbols are single unicode characters). Symbols are kept sorted so
    id assignment is stable across runs for identical input.
    """

    mode: str
    symbols: tuple

    def __post_init__(self):
        if self.mode not in ("byte", "char"):
            raise ValueError(f"unknown token mode {self.mode!r}")
        if len(self.symbols) < 2:
            raise ValueError("vocabulary needs at least 2 symbols")
        if self.mode == "byte" and len(self.symbols) > 256:
            raise ValueError("byte vocabulary cannot exceed 256 symbols")

    @property
    def size(self) -> int:
        return len(self.symbols)

    def _byte_lut(self) -> np.ndarray:
        lut = np.full(256, -1, dtype=np.int64)
        for i, s in enumerate(self.symbols):
            lut[s] = i
        return lut

    def encode(self, text: str) -> np.ndarray:
        """Encode text to an int64 id array; unknown symbols raise."""
        if self.mode == "byte":
            raw = np.frombuffer(text.encode("utf-8"), dtype=np.uint8)
            lut = self._byte_lut()
            ids = lut[raw]
            if ids.size and ids.min() < 0:
                bad = int(raw[np.argmin(ids)])
                raise UnknownSymbolError(f"byte 0x{bad:02x} not in vocabulary")
            return ids
        table = {s: i for i, s in enumerate(self.symbols)}
        ids = np.empty(len(text), dtype=np.int64)
        for j, ch in enumerate(text):
            try:
                ids[j] = table[ch]
            except KeyError:
                raise UnknownSymbolError(f"character {ch!r} not in vocabulary") from None
        return ids

    def decode(self, ids, errors: str = "strict") -> str:
        """Map ids back to text. ``errors`` follows bytes.decode semantics."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.size):
            raise ValueError(f"token id out of range for V={self.size}")
        if self.mode == "byte":
            vals = np.asarray(self.symbols, dtype=np.uint8)[ids]
            return vals.tobytes().decode("utf-8", errors=errors)
        return "".join(self.symbols[i] for i in ids)


def build_vocab(corpus_text: str, mode: str) -> Vocab:
    """Build a deterministic vocabulary from the distinct symbols of a corpus.

    Line separators are sequence boundaries, not symbols, and are excluded.
    """
    if not corpus_text:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if mode == "byte":
        raw = np.frombuffer(corpus_text.encode("utf-8"), dtype=np.uint8)
        symbols = tuple(int(b) for b in np.unique(raw) if b not in (0x0A, 0x0D))
    elif mode == "char":
        symbols = tuple(sorted(set(corpus_text) - {"\n", "\r"}))
    else:
        raise ValueError(f"unknown token mode {mode!r}")
    return Vocab(mode=mode, symbols=symbols)


def load_corpus_text(path: str | Path) -> str:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    return path.read_text(encoding="utf-8")


def corpus_sequences(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_SEQ_LEN) -> list[np.ndarray]:
    """Split a corpus on newlines and encode each line, truncated to max_len.

    Lines shorter than 2 tokens are dropped; they carry no prediction targets.
    """
    seqs = []
    for line in text.splitlines():
        ids = vocab.encode(line)[:max_len]
        if ids.size >= 2:
            seqs.append(ids)
    return seqs


@dataclass
class CorpusSplit:
    """Disjoint train/validation partition of a sequence list."""

    train: list = field(repr=False)
    validation: list = field(repr=False)
    split_fraction: float

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split fraction must lie in (0, 1)")

    @property
    def n_sequences(self) -> int:
        return len(self.train) + len(self.validation)


def split_corpus(sequences, fraction: float, seed: int) -> CorpusSplit:
    """Shuffle sequences with a seeded RNG and keep ``fraction`` for training."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    if len(sequences) < 2:
        raise ValueError("need at least 2 sequences to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(sequences))
    n_train = int(round(fraction * len(sequences)))
    train = [sequences[i] for i in perm[:n_train]]
    validation = [sequences[i] for i in perm[n_train:]]
    return CorpusSplit(train=train, validation=validation, split_fraction=fraction)

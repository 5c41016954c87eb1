"""Adjacent n-gram statistics and the co-occurrence ratio mask.

The mask stores, for every observed n-gram, the ratio between its smoothed
empirical probability and the product of the smoothed unigram probabilities
of its components. Unseen n-grams fall back to a single scalar default so
novel combinations stay reachable during decoding.
"""

from __future__ import annotations

import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vocab import CorpusSplit

__all__ = [
    "NgramCounts",
    "CooccurrenceMask",
    "MaskFormatError",
    "count_ngrams",
    "build_mask",
    "apply_transparency",
    "save_mask",
    "load_mask",
    "MASK_MAGIC",
]

log = logging.getLogger(__name__)

MASK_MAGIC = b"DYNM"
MASK_VERSION = 1
RATIO_CLIP_LO = 1e-4
RATIO_CLIP_HI = 1e4
THREADS_ENV = "DYNAMO_THREADS"

# magic, version u16, order u8, vocab u32, entry count u64,
# smoothing floor f64, default ratio f64; all little-endian.
_HEADER = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u2"),
        ("order", "u1"),
        ("vocab", "<u4"),
        ("count", "<u8"),
        ("floor", "<f8"),
        ("default", "<f8"),
    ]
)


class MaskFormatError(ValueError):
    """Raised when a mask file is corrupt; the message names the byte offset."""


@dataclass
class NgramCounts:
    """Sparse counts of adjacent n-grams over a token corpus."""

    order: int
    vocab_size: int
    total_positions: int
    counts: dict = field(repr=False)

    def __post_init__(self):
        if not 1 <= self.order <= 4:
            raise ValueError("n-gram order must be in 1..4")

    @property
    def n_distinct(self) -> int:
        return len(self.counts)


def _tuple_codes(ids: np.ndarray, order: int, vocab_size: int) -> np.ndarray:
    """Linear codes of all adjacent windows of ``order`` tokens."""
    n_windows = ids.size - order + 1
    if n_windows <= 0:
        return np.empty(0, dtype=np.int64)
    codes = np.zeros(n_windows, dtype=np.int64)
    for i in range(order):
        codes = codes * vocab_size + ids[i : i + n_windows]
    return codes


def _decode_codes(codes: np.ndarray, order: int, vocab_size: int) -> np.ndarray:
    out = np.empty((codes.size, order), dtype=np.int64)
    rem = codes.copy()
    for i in range(order - 1, -1, -1):
        out[:, i] = rem % vocab_size
        rem //= vocab_size
    return out


def _encode_tuples(tuples: np.ndarray, order: int, vocab_size: int) -> np.ndarray:
    tuples = np.asarray(tuples, dtype=np.int64).reshape(-1, order)
    codes = np.zeros(tuples.shape[0], dtype=np.int64)
    for i in range(order):
        codes = codes * vocab_size + tuples[:, i]
    return codes


def _count_chunk(seqs, order, vocab_size):
    parts = [_tuple_codes(np.asarray(s, dtype=np.int64), order, vocab_size) for s in seqs]
    codes = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    uniq, cnt = np.unique(codes, return_counts=True)
    return uniq, cnt, codes.size


def count_ngrams(
    split: CorpusSplit | list,
    order: int,
    vocab_size: int,
    subsample: float = 1.0,
    seed: int = 0,
) -> NgramCounts:
    """Count adjacent n-grams over the training split.

    ``subsample`` keeps a seeded random fraction of the sequences before
    counting, for expensive high-order tables. Counting is sharded across
    DYNAMO_THREADS workers; the merge is associative and exact.
    """
    if not 1 <= order <= 4:
        raise ValueError("n-gram order must be in 1..4")
    if vocab_size**order >= 2**62:
        raise ValueError("vocab_size**order too large for linear coding")
    seqs = split.train if isinstance(split, CorpusSplit) else list(split)
    if not 0.0 < subsample <= 1.0:
        raise ValueError("subsample fraction must lie in (0, 1]")
    if subsample < 1.0:
        rng = np.random.default_rng(seed)
        keep = rng.random(len(seqs)) < subsample
        seqs = [s for s, k in zip(seqs, keep) if k]

    n_threads = max(1, int(os.environ.get(THREADS_ENV, "1")))
    if n_threads == 1 or len(seqs) < 2 * n_threads:
        chunks = [_count_chunk(seqs, order, vocab_size)]
    else:
        shards = [seqs[i::n_threads] for i in range(n_threads)]
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            chunks = list(pool.map(lambda sh: _count_chunk(sh, order, vocab_size), shards))

    merged: dict[int, int] = {}
    total = 0
    for uniq, cnt, n_pos in chunks:
        total += n_pos
        for c, k in zip(uniq.tolist(), cnt.tolist()):
            merged[c] = merged.get(c, 0) + k
    counts = {
        tuple(t): merged[c]
        for c, t in zip(
            sorted(merged), _decode_codes(np.array(sorted(merged), dtype=np.int64), order, vocab_size).tolist()
        )
    }
    return NgramCounts(order=order, vocab_size=vocab_size, total_positions=total, counts=counts)


@dataclass
class CooccurrenceMask:
    """Sparse map from n-grams to joint/unigram-product probability ratios.

    Stored as parallel (sorted linear code, ratio) arrays so batched lookups
    stay vectorized. ``default_value`` applies to any absent n-gram.
    """

    order: int
    vocab_size: int
    codes: np.ndarray = field(repr=False)
    ratios: np.ndarray = field(repr=False)
    smoothing_floor: float
    default_value: float

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        if self.codes.shape != self.ratios.shape:
            raise ValueError("codes and ratios must be parallel arrays")
        if self.ratios.size and not (np.isfinite(self.ratios).all() and (self.ratios > 0).all()):
            raise ValueError("stored ratios must be finite and positive")
        if self.default_value < 0:
            raise ValueError("default ratio must be nonnegative")

    @property
    def n_entries(self) -> int:
        return int(self.codes.size)

    @property
    def memory_footprint(self) -> int:
        return int(self.codes.nbytes + self.ratios.nbytes)

    def encode_tuples(self, tuples: np.ndarray) -> np.ndarray:
        """Linear codes for an (m, order) array of token-id tuples."""
        return _encode_tuples(tuples, self.order, self.vocab_size)

    def lookup_codes(self, codes: np.ndarray) -> np.ndarray:
        """Vectorized ratio lookup; absent codes map to the default."""
        idx = np.searchsorted(self.codes, codes)
        idx_c = np.minimum(idx, max(self.codes.size - 1, 0))
        if self.codes.size:
            found = self.codes[idx_c] == codes
            out = np.where(found, self.ratios[idx_c], self.default_value)
        else:
            out = np.full(codes.shape, self.default_value)
        return out

    def get(self, ngram) -> float:
        return float(self.lookup_codes(self.encode_tuples(np.array([ngram])))[0])

    def ratio_map(self) -> dict:
        tuples = _decode_codes(self.codes, self.order, self.vocab_size)
        return {tuple(t): float(r) for t, r in zip(tuples.tolist(), self.ratios)}

    def __eq__(self, other) -> bool:
        if not isinstance(other, CooccurrenceMask):
            return NotImplemented
        return (
            self.order == other.order
            and self.vocab_size == other.vocab_size
            and self.smoothing_floor == other.smoothing_floor
            and self.default_value == other.default_value
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.ratios, other.ratios)
        )


def _smoothed(count, positions, floor, n_cells):
    return (count + floor) / (positions + floor * n_cells)


def build_mask(unigrams: NgramCounts, joint: NgramCounts, floor: float = 0.5) -> CooccurrenceMask:
    """Build the co-occurrence ratio mask from unigram and joint counts.

    Probabilities use additive smoothing with the given floor; ratios are
    clipped to [1e-4, 1e4]. The default for unseen n-grams is the smoothed
    zero-count joint probability measured against uniform unigrams.
    """
    if unigrams.order != 1:
        raise ValueError("unigram counts must have order 1")
    if joint.order < 2:
        raise ValueError("joint counts must have order >= 2")
    if unigrams.vocab_size != joint.vocab_size:
        raise ValueError(
            f"vocab size mismatch: unigrams V={unigrams.vocab_size}, joint V={joint.vocab_size}"
        )
    if floor < 0:
        raise ValueError("smoothing floor must be nonnegative")
    V = unigrams.vocab_size
    n = joint.order

    uni = np.zeros(V, dtype=np.float64)
    for (a,), c in unigrams.counts.items():
        uni[a] = c
    p_uni = _smoothed(uni, unigrams.total_positions, floor, V)

    items = sorted(joint.counts.items())
    tuples = np.array([t for t, _ in items], dtype=np.int64).reshape(len(items), n)
    cnts = np.array([c for _, c in items], dtype=np.float64)
    n_cells = float(V) ** n
    p_joint = _smoothed(cnts, joint.total_positions, floor, n_cells)
    denom = np.ones(len(items), dtype=np.float64)
    for i in range(n):
        denom *= p_uni[tuples[:, i]]
    ratios = np.clip(p_joint / denom, RATIO_CLIP_LO, RATIO_CLIP_HI)

    default = _smoothed(0.0, joint.total_positions, floor, n_cells) * n_cells
    if default > 0:
        default = float(np.clip(default, RATIO_CLIP_LO, RATIO_CLIP_HI))

    return CooccurrenceMask(
        order=n,
        vocab_size=V,
        codes=_encode_tuples(tuples, n, V),
        ratios=ratios,
        smoothing_floor=floor,
        default_value=float(default),
    )


def apply_transparency(mask_value, alpha_c: float):
    """Raise a mask ratio to the transparency exponent alpha_c in [0, 1].

    alpha_c = 0 disables masking (result 1), alpha_c = 1 applies it fully.
    """
    if not 0.0 <= alpha_c <= 1.0:
        raise ValueError("alpha_c must lie in [0, 1]")
    value = np.asarray(mask_value, dtype=np.float64)
    if np.any(value <= 0):
        raise ValueError("mask value must be positive")
    if alpha_c == 0.0:
        out = np.ones_like(value)
    elif alpha_c == 1.0:
        out = value.copy()
    else:
        out = value**alpha_c
    return float(out) if np.isscalar(mask_value) else out


def _record_dtype(order: int) -> np.dtype:
    return np.dtype([("ids", "<u4", (order,)), ("ratio", "<f8")])


def save_mask(mask: CooccurrenceMask, path: str | Path) -> dict:
    """Serialize a mask to its binary coordinate format; returns a size report."""
    path = Path(path)
    header = np.zeros(1, dtype=_HEADER)
    header["magic"] = MASK_MAGIC
    header["version"] = MASK_VERSION
    header["order"] = mask.order
    header["vocab"] = mask.vocab_size
    header["count"] = mask.n_entries
    header["floor"] = mask.smoothing_floor
    header["default"] = mask.default_value

    records = np.zeros(mask.n_entries, dtype=_record_dtype(mask.order))
    records["ids"] = _decode_codes(mask.codes, mask.order, mask.vocab_size)
    records["ratio"] = mask.ratios

    body = header.tobytes() + records.tobytes()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    payload = body + np.uint32(crc).astype("<u4").tobytes()
    path.write_bytes(payload)
    report = {
        "path": str(path),
        "file_bytes": len(payload),
        "entries": mask.n_entries,
        "in_memory_bytes": mask.memory_footprint,
    }
    log.info(
        "mask saved: %d entries, %d bytes on disk, %d bytes in memory",
        mask.n_entries,
        len(payload),
        mask.memory_footprint,
    )
    return report


def load_mask(path: str | Path) -> CooccurrenceMask:
    """Read a mask written by save_mask, verifying structure and checksum."""
    raw = Path(path).read_bytes()
    hsize = _HEADER.itemsize
    if len(raw) < hsize + 4:
        raise MaskFormatError(f"truncated mask file: only {len(raw)} bytes, header ends at offset {hsize}")
    header = np.frombuffer(raw[:hsize], dtype=_HEADER)[0]
    if bytes(header["magic"]) != MASK_MAGIC:
        raise MaskFormatError("bad magic at offset 0")
    if int(header["version"]) != MASK_VERSION:
        raise MaskFormatError(f"unsupported version {int(header['version'])} at offset 4")
    order = int(header["order"])
    vocab = int(header["vocab"])
    count = int(header["count"])
    rec_dtype = _record_dtype(order)
    expected = hsize + count * rec_dtype.itemsize + 4
    if len(raw) != expected:
        raise MaskFormatError(
            f"truncated or oversized mask file: expected {expected} bytes, got {len(raw)}"
            f" (records end at offset {expected - 4})"
        )
    stored_crc = int(np.frombuffer(raw[-4:], dtype="<u4")[0])
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise MaskFormatError(f"CRC mismatch at offset {len(raw) - 4}")
    records = np.frombuffer(raw[hsize:-4], dtype=rec_dtype)
    ids = records["ids"].astype(np.int64).reshape(count, order)
    if count and ids.max(initial=0) >= vocab:
        raise MaskFormatError(f"token id out of range in records starting at offset {hsize}")
    mask = CooccurrenceMask(
        order=order,
        vocab_size=vocab,
        codes=_encode_tuples(ids, order, vocab),
        ratios=records["ratio"].astype(np.float64).copy(),
        smoothing_floor=float(header["floor"]),
        default_value=float(header["default"]),
    )
    log.info("mask loaded: %d entries, %d bytes in memory", count, mask.memory_footprint)
    return mask

"""Overhead-free storage: freeze levels live in the low mantissa bits.

Every prunable float32 word that belongs to the level-``t`` sparse network
carries ``t`` in its ``tau = ceil(log2(T + 1))`` least significant bits;
weights outside every sparse network carry 0 there. Extraction of level
``t`` keeps exactly the words with ``0 < lsb <= t``.

File layout (all integers little-endian)::

    magic        4 bytes   b"ELSA"
    version      u16       1
    T            u16       number of embedded levels (0: plain dense model)
    tau          u8
    n_entries    u32
    per entry:   name_len u16, name (UTF-8), prunable u8, rank u8, dims u32 * rank
    payload      per entry, row-major float32 words
    bn section   n_levels u16, n_bn u16, dims u32 * n_bn,
                 per level: tag u16, then per bn layer mean f32 * dim, var f32 * dim
    checksum     8 bytes, BLAKE2b (digest_size=8) of everything before it

BN tags are level indices ``1..T``; tag 0 holds the dense model's statistics.
"""

from __future__ import annotations

import hashlib
import io
import logging
import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ContractError,
    CorruptionError,
    FormatError,
    NumericError,
    UnsupportedVersionError,
)
from .nn import BatchNormStats, Entry, ParamSet

log = logging.getLogger(__name__)

MAGIC = b"ELSA"
VERSION = 1
MAX_T = 255
DENSE_TAG = 0
CHECKSUM_BYTES = 8
CHUNK_WORDS = 1 << 16
_TINY = 2.0 ** -100


def tau_for(T: int) -> int:
    """Bits needed for counter values ``0..T``: ``ceil(log2(T + 1))``."""
    if not 1 <= T <= MAX_T:
        raise ValueError(f"T must lie in 1..{MAX_T}, got {T}")
    return int(T).bit_length()


def _low(tau):
    return (1 << tau) - 1


def stamp(word, t: int, tau: int):
    """Replace the low ``tau`` bits of ``word`` (int or uint32 array) with ``t``."""
    if not 0 <= t < (1 << tau):
        raise ValueError(f"level {t} does not fit in {tau} bits")
    if isinstance(word, np.ndarray):
        word = word.astype(np.uint32, copy=False)
        return (word & np.uint32(~_low(tau) & 0xFFFFFFFF)) | np.uint32(t)
    return (int(word) & ~_low(tau) & 0xFFFFFFFF) | t


def read_lsb(word, tau: int):
    if isinstance(word, np.ndarray):
        return word.astype(np.uint32, copy=False) & np.uint32(_low(tau))
    return int(word) & _low(tau)


def bits(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).view(np.uint32)


def stamp_level(params: ParamSet, newly_frozen, t: int, tau: int,
                ledger: Optional[np.ndarray] = None) -> ParamSet:
    """Stamp ``t`` into the words at ``newly_frozen``; all other words are copied.

    ``ledger`` (bool vector over ``[0, D)``) records already-stamped indices and
    is updated in place.
    """
    idx = np.asarray(newly_frozen, dtype=np.int64)
    out = params.copy()
    if idx.size == 0:
        return out
    words = out.flat.view(np.uint32)
    target = words[idx]
    if ledger is not None:
        if np.any(ledger[idx]):
            raise ContractError(f"level {t}: some weights were already stamped at an earlier level")
    if np.any((target & 0x7FFFFFFF) == 0):
        raise ContractError(f"level {t}: cannot stamp a zero-valued weight")
    if np.any((target & 0x7F800000) == 0x7F800000):
        raise NumericError(f"level {t}: refusing to stamp NaN/Inf weights")
    if np.any(np.abs(out.flat[idx]) < _TINY):
        log.warning("level %d: stamping weights below 2^-100; relative perturbation unbounded", t)
    words[idx] = stamp(target, t, tau)
    if ledger is not None:
        ledger[idx] = True
    return out


def finalize(params: ParamSet, counter: np.ndarray, tau: int, T: int) -> ParamSet:
    """Clear the low bits of never-frozen weights after checking every stamp."""
    counter = np.asarray(counter)
    out = params.copy()
    words = out.flat.view(np.uint32)
    stamped = counter <= T
    lsb = read_lsb(words, tau)
    bad = stamped & (lsb != counter)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise CorruptionError(
            f"weight {i}: low bits say level {int(lsb[i])}, counter says {int(counter[i])}"
        )
    free = ~stamped
    words[free] = stamp(words[free], 0, tau)
    return out


class LsbStamper:
    """Stamping hook for :func:`elsa.core.multi_level`."""

    def __init__(self, T: int):
        self.T = T
        self.tau = tau_for(T)
        self.ledger = None

    def stamp(self, params: ParamSet, newly_frozen, t: int) -> ParamSet:
        if self.ledger is None:
            self.ledger = np.zeros(params.D, dtype=bool)
        return stamp_level(params, newly_frozen, t, self.tau, self.ledger)

    def finalize(self, params: ParamSet, counter: np.ndarray) -> ParamSet:
        return finalize(params, counter, self.tau, self.T)


# --------------------------------------------------------------------------- #
# Serialization
# --------------------------------------------------------------------------- #
@dataclass
class PackedCheckpoint:
    T: int
    tau: int
    params: ParamSet
    bn_dims: list
    stats: dict  # tag -> BatchNormStats
    version: int = VERSION

    def stats_for(self, level):
        """Statistics for ``level`` (int) or for the full model (``None``).

        An extracted file has no dense tag; its full model is its top level.
        """
        if level is None:
            if DENSE_TAG in self.stats:
                return self.stats[DENSE_TAG]
            level = self.T
        if level not in self.stats:
            raise KeyError(f"no batchnorm statistics stored for level {level}")
        return self.stats[level]


def _encode_header(T, tau, entries) -> bytes:
    out = [MAGIC, struct.pack("<HHBI", VERSION, T, tau, len(entries))]
    for e in entries:
        name = e.name.encode("utf-8")
        out.append(struct.pack("<H", len(name)))
        out.append(name)
        out.append(struct.pack("<BB", 1 if e.prunable else 0, len(e.shape)))
        out.append(struct.pack(f"<{len(e.shape)}I", *e.shape))
    return b"".join(out)


def _encode_bn(bn_dims, stats: dict) -> bytes:
    out = [struct.pack("<HH", len(stats), len(bn_dims))]
    out.append(struct.pack(f"<{len(bn_dims)}I", *bn_dims))
    for tag in sorted(stats):
        s = stats[tag]
        if [m.size for m in s.means] != list(bn_dims):
            raise ValueError(f"statistics for tag {tag} do not match the batchnorm layout")
        out.append(struct.pack("<H", tag))
        for m, v in zip(s.means, s.variances):
            out.append(np.asarray(m, dtype="<f4").tobytes())
            out.append(np.asarray(v, dtype="<f4").tobytes())
    return b"".join(out)


def encode(params: ParamSet, T: int, tau: int, bn_dims, stats: dict) -> bytes:
    """The complete file image."""
    if not 0 <= T <= MAX_T:
        raise ValueError(f"T must lie in 0..{MAX_T}")
    body = [_encode_header(T, tau, params.entries)]
    for _, array, _ in params.items():
        body.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    body.append(_encode_bn(bn_dims, stats))
    data = b"".join(body)
    return data + hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


def write(path, params: ParamSet, T: int, tau: int, bn_dims, stats: dict) -> int:
    data = encode(params, T, tau, bn_dims, stats)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


class _Reader:
    """Sequential reader that hashes and counts every byte it hands out."""

    def __init__(self, stream: BinaryIO):
        self.stream = stream
        self.offset = 0
        self.hash = hashlib.blake2b(digest_size=CHECKSUM_BYTES)

    def raw(self, n: int) -> bytes:
        data = self.stream.read(n)
        if len(data) != n:
            raise ChecksumError("unexpected end of data", self.offset + len(data))
        self.offset += n
        return data

    def take(self, n: int) -> bytes:
        data = self.raw(n)
        self.hash.update(data)
        return data

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def verify_checksum(self):
        at = self.offset
        stored = self.raw(CHECKSUM_BYTES)
        if stored != self.hash.digest():
            raise ChecksumError("checksum mismatch", at)
        if self.stream.read(1):
            raise FormatError("trailing bytes after checksum", self.offset)


def _read_header(r: _Reader):
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}", 0)
    version, T, tau, n = r.unpack("HHBI")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}", 4)
    if T > MAX_T or (T == 0 and tau != 0) or (T > 0 and not tau_for(T) <= tau <= 8):
        raise FormatError(f"inconsistent T={T}, tau={tau}", 6)
    entries = []
    for _ in range(n):
        at = r.offset
        (name_len,) = r.unpack("H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("layer name is not UTF-8", at) from exc
        prunable, rank = r.unpack("BB")
        dims = r.unpack(f"{rank}I")
        if rank == 0 or any(d == 0 for d in dims):
            raise FormatError(f"layer {name!r} has invalid dims {dims}", at)
        entries.append(Entry(name, tuple(dims), bool(prunable)))
    return T, tau, entries


def _read_bn(r: _Reader):
    n_levels, n_bn = r.unpack("HH")
    dims = list(r.unpack(f"{n_bn}I"))
    stats = {}
    for _ in range(n_levels):
        (tag,) = r.unpack("H")
        means, variances = [], []
        for d in dims:
            means.append(np.frombuffer(r.take(4 * d), dtype="<f4").astype(np.float32))
            variances.append(np.frombuffer(r.take(4 * d), dtype="<f4").astype(np.float32))
        stats[tag] = BatchNormStats(means, variances, tag)
    return dims, stats


def read_stream(stream: BinaryIO) -> PackedCheckpoint:
    r = _Reader(stream)
    T, tau, entries = _read_header(r)
    arrays = []
    for e in entries:
        words = np.frombuffer(r.take(4 * e.size), dtype="<f4")
        arrays.append((e.name, words.astype(np.float32).reshape(e.shape), e.prunable))
    bn_dims, stats = _read_bn(r)
    r.verify_checksum()
    return PackedCheckpoint(T, tau, ParamSet(arrays), bn_dims, stats)


def read(path) -> PackedCheckpoint:
    """Parse a checkpoint; the whole file is checksummed before anything is returned."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < CHECKSUM_BYTES or hashlib.blake2b(
        data[:-CHECKSUM_BYTES], digest_size=CHECKSUM_BYTES
    ).digest() != data[-CHECKSUM_BYTES:]:
        if data[:4] != MAGIC and len(data) >= 4:
            raise BadMagicError(f"bad magic {data[:4]!r}", 0)
        raise ChecksumError("checksum mismatch", max(len(data) - CHECKSUM_BYTES, 0))
    return read_stream(io.BytesIO(data))


@dataclass(frozen=True)
class Layout:
    header: int
    payload: int
    bn: int
    checksum: int = CHECKSUM_BYTES

    @property
    def total(self) -> int:
        return self.header + self.payload + self.bn + self.checksum


def layout(ckpt: PackedCheckpoint) -> Layout:
    header = len(_encode_header(ckpt.T, ckpt.tau, ckpt.params.entries))
    payload = 4 * sum(e.size for e in ckpt.params.entries)
    bn = len(_encode_bn(ckpt.bn_dims, ckpt.stats))
    return Layout(header, payload, bn)


# --------------------------------------------------------------------------- #
# Extraction
# --------------------------------------------------------------------------- #
def _keep_words(words: np.ndarray, tau: int, t: int) -> np.ndarray:
    lsb = read_lsb(words, tau)
    return np.where((lsb > 0) & (lsb <= t), words, np.uint32(0))


def _check_level(t, T):
    if not 1 <= t <= T:
        raise IndexError(f"level {t} outside 1..{T}")


def extract_level_packed(ckpt: PackedCheckpoint, t: int):
    """Level-``t`` sparse parameters from the stamps alone, plus its statistics (or None)."""
    _check_level(t, ckpt.T)
    out = ckpt.params.copy()
    words = out.flat.view(np.uint32)
    words[...] = _keep_words(words, ckpt.tau, t)
    return out, ckpt.stats.get(t)


def extracted_checkpoint(ckpt: PackedCheckpoint, t: int) -> PackedCheckpoint:
    """The level-``t`` model as a file of its own (``T' = t``, same ``tau``)."""
    params, stats = extract_level_packed(ckpt, t)
    return PackedCheckpoint(t, ckpt.tau, params, list(ckpt.bn_dims), {t: stats} if stats else {})


def encode_checkpoint(ckpt: PackedCheckpoint) -> bytes:
    return encode(ckpt.params, ckpt.T, ckpt.tau, ckpt.bn_dims, ckpt.stats)


def extract_streaming(reader: BinaryIO, t: int, writer: BinaryIO, chunk_words: int = CHUNK_WORDS) -> int:
    """Single-pass extraction of level ``t`` from ``reader`` into ``writer``.

    Memory is bounded by the header, one chunk of ``chunk_words`` words and the
    batchnorm section, whatever the model size. The input checksum can only be
    confirmed at the end, so on error the caller must discard what was written.
    Returns the number of bytes written.
    """
    r = _Reader(reader)
    T, tau, entries = _read_header(r)
    _check_level(t, T)
    out_hash = hashlib.blake2b(digest_size=CHECKSUM_BYTES)
    written = 0

    def emit(data: bytes):
        nonlocal written
        out_hash.update(data)
        writer.write(data)
        written += len(data)

    emit(_encode_header(t, tau, entries))
    for e in entries:
        remaining = e.size
        while remaining:
            n = min(remaining, chunk_words)
            chunk = r.take(4 * n)
            if e.prunable:
                chunk = _keep_words(np.frombuffer(chunk, dtype="<u4"), tau, t).astype("<u4").tobytes()
            emit(chunk)
            remaining -= n
    bn_dims, stats = _read_bn(r)
    r.verify_checksum()
    emit(_encode_bn(bn_dims, {t: stats[t]} if t in stats else {}))
    checksum = out_hash.digest()
    writer.write(checksum)
    return written + len(checksum)

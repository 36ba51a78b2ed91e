"""Desk-scale datasets: Gaussian blobs, two spirals, and IDX files."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .nn import Dataset
from .rng import make_rng

# IDX element type code -> (numpy big-endian dtype, size)
_IDX_TYPES = {
    0x08: (">u1", 1),
    0x09: (">i1", 1),
    0x0B: (">i2", 2),
    0x0C: (">i4", 4),
    0x0D: (">f4", 4),
    0x0E: (">f8", 8),
}


def _balanced_labels(n, classes):
    return np.arange(n) % classes


def gaussian_blobs(classes=2, dim=2, separation=4.0, n=2000, seed=0) -> Dataset:
    """Isotropic unit-variance blobs, class centres ``separation`` sigmas apart.

    Centres sit on a circle in the first two coordinates (on a line when
    ``dim == 1``), spaced so that neighbouring centres are exactly
    ``separation`` apart.
    """
    if classes < 2 or dim < 1 or n < 1:
        raise DataError("blobs need classes >= 2, dim >= 1, n >= 1")
    rng = make_rng(seed, "blobs")
    y = _balanced_labels(n, classes)
    centres = np.zeros((classes, dim))
    if dim == 1 or classes == 2:
        centres[:, 0] = (np.arange(classes) - (classes - 1) / 2) * separation
    else:
        angle = 2 * np.pi * np.arange(classes) / classes
        radius = separation / (2 * np.sin(np.pi / classes))
        centres[:, 0] = radius * np.cos(angle)
        centres[:, 1] = radius * np.sin(angle)
    x = centres[y] + rng.standard_normal((n, dim))
    order = rng.permutation(n)
    return Dataset(x[order].astype(np.float32), y[order])


def two_spirals(n=2000, noise=0.1, seed=0) -> Dataset:
    """Two interleaved spirals of 1.5 turns in the plane."""
    if n < 2:
        raise DataError("two spirals need n >= 2")
    rng = make_rng(seed, "spirals")
    y = _balanced_labels(n, 2)
    t = rng.uniform(0.0, 1.0, n)
    r = 0.25 + 2.75 * t
    theta = 3 * np.pi * t + np.pi * y
    x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    x += noise * rng.standard_normal(x.shape)
    return Dataset(x.astype(np.float32), y)


def read_idx(path) -> np.ndarray:
    """Read an IDX tensor file (optionally gzip-compressed)."""
    path = Path(path)
    try:
        raw = gzip.decompress(path.read_bytes()) if path.suffix == ".gz" else path.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"dataset file not found: {path}") from exc
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header at offset {len(raw)}")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise DataError(f"{path}: bad IDX magic at offset 0")
    if code not in _IDX_TYPES:
        raise DataError(f"{path}: unknown IDX element type 0x{code:02x} at offset 2")
    if ndim == 0:
        raise DataError(f"{path}: IDX file with zero dimensions at offset 3")
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise DataError(f"{path}: truncated IDX dimensions at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    dtype, size = _IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * size
    if len(raw) - end != expected:
        raise DataError(
            f"{path}: payload has {len(raw) - end} bytes, header implies {expected} (offset {end})"
        )
    return np.frombuffer(raw, dtype=dtype, offset=end).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    codes = {np.dtype(v[0]).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    array = np.asarray(array)
    code = codes[array.dtype.newbyteorder("=")]
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_TYPES[code][0]).tobytes())


def idx_dataset(images, labels=None) -> Dataset:
    """Flatten an IDX image tensor to rows; unsigned-byte images are scaled to [0, 1]."""
    x = read_idx(images)
    scale = 255.0 if x.dtype == np.dtype(">u1") else 1.0
    x = x.reshape(x.shape[0], -1).astype(np.float32) / np.float32(scale)
    y = None
    if labels is not None:
        y = read_idx(labels).astype(np.int64)
        if y.shape != (x.shape[0],):
            raise DataError(f"{labels}: expected {x.shape[0]} labels, found shape {y.shape}")
    return Dataset(x, y)


def gen_dataset(spec: dict) -> Dataset:
    """Build a dataset from ``{"generator": name, ...params}``.

    Generators: ``blobs`` (classes, dim, separation, n, seed), ``spirals``
    (n, noise, seed), ``idx`` (images, labels).
    """
    spec = dict(spec)
    kind = spec.pop("generator", "blobs")
    if kind == "blobs":
        return gaussian_blobs(**spec)
    if kind == "spirals":
        return two_spirals(**spec)
    if kind == "idx":
        return idx_dataset(spec["images"], spec.get("labels"))
    raise DataError(f"unknown dataset generator {kind!r}")

"""Sample assembly, train/val/test splitting and the SARD binary container.

SARD layout (little-endian)::

    offset  size  field
    0       4     magic b"SARD"
    4       2     version (u16, currently 1)
    6       4     sample_count (u32)
    10      4     H (u32)
    14      4     W (u32)
    18      ...   sample_count records, each:
                    f64 offset_x, f64 offset_y, u8 field_tag (0=3T, 1=7T),
                    u64 phantom_seed, f64 norm_factor, f64 peak_to_global
                    (NaN when undefined)          -> 41 bytes
                    f32[H*W] input, row-major
                    f32[H*W] target, row-major
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .phantom import rasterize_mask

MAGIC = b"SARD"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")
_META = struct.Struct("<ddBQdd")
FIELD_TAGS = ("3T", "7T")

TRAIN_FRACTION = Fraction(5, 7)
VAL_FRACTION = Fraction(4080, 22848)


class DatasetFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class SampleRejected(ValueError):
    """Raised by :func:`build_sample` for samples that carry no SAR."""

    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


class InvalidSplitError(ValueError):
    pass


@dataclass
class SampleMeta:
    offset_x: float
    offset_y: float
    field_tag: str
    phantom_seed: int
    norm_factor: float
    peak_to_global: float = math.nan


@dataclass
class Sample:
    input: np.ndarray
    target: np.ndarray
    meta: SampleMeta

    def physical_target(self):
        """Target rescaled back to W/kg (in the solver's drive units)."""
        return self.target.astype(np.float64) * self.meta.norm_factor


@dataclass(frozen=True)
class SplitIndex:
    train: tuple
    val: tuple
    test: tuple


def build_sample(grid, placement, solution, sar, field_tag, phantom_seed, peak_to_global=math.nan):
    """Pair the B1-weighted mask with the max-normalized 1g SAR map."""
    if solution.b1_unloaded.shape != grid.shape or sar.averaged_1g.shape != grid.shape:
        raise ValueError("grid, field and SAR shapes differ")
    weighted = rasterize_mask(grid).astype(np.float64) * solution.b1_unloaded
    in_peak = weighted.max()
    if not in_peak > 0:
        raise SampleRejected("empty input: phantom outside the illuminated region")
    norm = float(sar.averaged_1g.max())
    if not norm > 0:
        raise SampleRejected("no SAR deposited")
    meta = SampleMeta(
        placement.offset_x, placement.offset_y, field_tag, int(phantom_seed), norm,
        math.nan if peak_to_global is None else float(peak_to_global),
    )
    return Sample(
        (weighted / in_peak).astype(np.float32),
        (sar.averaged_1g / norm).astype(np.float32),
        meta,
    )


def split(n, train=TRAIN_FRACTION, val=VAL_FRACTION, seed=0):
    """Seeded random split with floor(n*train) / floor(n*val) / remainder sizes."""
    if n < 3:
        raise InvalidSplitError(f"need at least 3 samples to split, got {n}")
    n_train = math.floor(n * Fraction(train))
    n_val = math.floor(n * Fraction(val))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise InvalidSplitError(f"split of {n} gives sizes {(n_train, n_val, n_test)}")
    order = np.random.default_rng(seed).permutation(n)
    return SplitIndex(
        tuple(int(i) for i in order[:n_train]),
        tuple(int(i) for i in order[n_train : n_train + n_val]),
        tuple(int(i) for i in order[n_train + n_val :]),
    )


def stack(samples, indices=None):
    """(inputs, targets) as float32 arrays of shape (n, H, W)."""
    chosen = samples if indices is None else [samples[i] for i in indices]
    return (
        np.stack([s.input for s in chosen]).astype(np.float32),
        np.stack([s.target for s in chosen]).astype(np.float32),
    )


def write_dataset(samples, path):
    samples = list(samples)
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    h, w = samples[0].input.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(samples), h, w))
        for s in samples:
            if s.input.shape != (h, w) or s.target.shape != (h, w):
                raise ValueError(f"sample rasters must all be {h}x{w}")
            m = s.meta
            fh.write(_META.pack(
                m.offset_x, m.offset_y, FIELD_TAGS.index(m.field_tag),
                m.phantom_seed & 0xFFFFFFFFFFFFFFFF, m.norm_factor, m.peak_to_global,
            ))
            fh.write(np.ascontiguousarray(s.input, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.target, dtype="<f4").tobytes())
    return Path(path)


def read_dataset(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DatasetFormatError("truncated header", len(data))
    magic, version, count, h, w = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    raster = 4 * h * w
    record = _META.size + 2 * raster
    pos = _HEADER.size
    samples = []
    for k in range(count):
        if pos + record > len(data):
            raise DatasetFormatError(f"truncated payload in sample {k} of {count}", pos)
        ox, oy, tag, seed, norm, ratio = _META.unpack_from(data, pos)
        if tag >= len(FIELD_TAGS):
            raise DatasetFormatError(f"invalid field tag {tag}", pos + 16)
        pos += _META.size
        inp = np.frombuffer(data, "<f4", h * w, pos).reshape(h, w).astype(np.float32)
        pos += raster
        tgt = np.frombuffer(data, "<f4", h * w, pos).reshape(h, w).astype(np.float32)
        pos += raster
        samples.append(Sample(inp, tgt, SampleMeta(ox, oy, FIELD_TAGS[tag], seed, norm, ratio)))
    if pos != len(data):
        raise DatasetFormatError(f"{len(data) - pos} bytes beyond sample_count={count}", pos)
    return samples

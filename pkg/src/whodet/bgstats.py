"""Stationary background statistics: mean feature cell and spatial autocorrelation.

The autocorrelation at offset (u, v) is the average outer product of centered
feature cells that sit (u, v) cells apart, pooled over every level of every
pyramid in the corpus.  Only one representative of each (u, v) / (-u, -v)
pair is stored; the mirrored offset is the transpose.

Accumulation is exact under merging: each pyramid contributes one raw-moment
partial, accumulators keep the multiset of partials, and finalization reduces
them in a canonical order.  Merging therefore commutes and associates
bit-exactly with single-pass accumulation.  Centering uses the exact
algebraic correction around the corpus mean, which for features bounded in
[-1, 1] is numerically safe.  ``StatsAccumulator.compact()`` trades the
bit-exactness guarantee for bounded memory on very large corpora.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ._io import atomic_write_bytes
from .errors import FormatError, ValidationError
from .featmap import FeatureMap, FeaturePyramid


def stored_offsets(radius: int) -> list[tuple[int, int]]:
    """Canonical offset list: u in 0..R; v in -R..R, minus mirrored duplicates."""
    offsets = []
    for u in range(radius + 1):
        start = 0 if u == 0 else -radius
        for v in range(start, radius + 1):
            offsets.append((u, v))
    return offsets


@dataclass(frozen=True)
class BackgroundStats:
    """Mean feature cell and autocorrelation up to an offset radius in cells."""

    radius: int
    mean: np.ndarray
    autocorr: np.ndarray  # (n_offsets, channels, channels), stored_offsets order
    cell_count: int
    pair_counts: np.ndarray | None = None  # per stored offset; learn-time metadata

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        corr = np.asarray(self.autocorr, dtype=np.float64)
        if self.radius < 0:
            raise ValidationError("radius must not be negative")
        n_off = len(stored_offsets(self.radius))
        channels = mean.size
        if corr.shape != (n_off, channels, channels):
            raise ValidationError(
                f"autocorrelation shape {corr.shape} does not match radius "
                f"{self.radius} and {channels} channels")
        if not (np.isfinite(mean).all() and np.isfinite(corr).all()):
            raise ValidationError("statistics must be finite")
        zero = corr[0]
        if not np.allclose(zero, zero.T, atol=1e-8):
            raise ValidationError("autocorrelation at offset (0, 0) must be symmetric")
        eigmin = np.linalg.eigvalsh(0.5 * (zero + zero.T)).min()
        floor = 1e-8 * max(1.0, float(np.abs(zero).max()))
        if eigmin < -floor:
            raise ValidationError(
                f"autocorrelation at (0, 0) is not positive semidefinite "
                f"(min eigenvalue {eigmin:.3e})")
        index = {off: i for i, off in enumerate(stored_offsets(self.radius))}
        mean = mean.copy()
        corr = corr.copy()
        mean.setflags(write=False)
        corr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "autocorr", corr)
        object.__setattr__(self, "_index", index)

    @property
    def channels(self) -> int:
        return self.mean.size

    def gamma(self, u: int, v: int) -> np.ndarray:
        """Autocorrelation matrix at cell offset (u, v); mirrors transpose."""
        if max(abs(u), abs(v)) > self.radius:
            raise ValidationError(
                f"offset ({u}, {v}) outside radius {self.radius}")
        idx = self._index.get((u, v))
        if idx is not None:
            return self.autocorr[idx]
        return self.autocorr[self._index[(-u, -v)]].T


class _Partial:
    """Raw moments of one pyramid: cross sums per offset plus cell sums."""

    __slots__ = ("cross", "left", "right", "pairs", "cell_sum", "cells", "tag")

    def __init__(self, n_offsets: int, channels: int):
        self.cross = np.zeros((n_offsets, channels, channels))
        self.left = np.zeros((n_offsets, channels))
        self.right = np.zeros((n_offsets, channels))
        self.pairs = np.zeros(n_offsets, dtype=np.int64)
        self.cell_sum = np.zeros(channels)
        self.cells = 0
        self.tag = b""

    def seal(self) -> None:
        digest = hashlib.sha256()
        for arr in (self.cross, self.left, self.right, self.pairs, self.cell_sum):
            digest.update(np.ascontiguousarray(arr).tobytes())
        digest.update(struct.pack("<q", self.cells))
        self.tag = digest.digest()


class StatsAccumulator:
    """Mergeable accumulator over pyramids for background statistics."""

    def __init__(self, radius: int, channels: int):
        if radius < 0:
            raise ValidationError("radius must not be negative")
        self.radius = radius
        self.channels = channels
        self.offsets = stored_offsets(radius)
        self._partials: list[_Partial] = []

    def add_map(self, fmap: FeatureMap) -> None:
        self.add_pyramid([fmap])

    def add_pyramid(self, pyramid: FeaturePyramid | Iterable[FeatureMap]) -> None:
        levels = pyramid.levels if isinstance(pyramid, FeaturePyramid) else tuple(pyramid)
        part = _Partial(len(self.offsets), self.channels)
        for level in levels:
            data = np.asarray(level.data, dtype=np.float64)
            if data.shape[2] != self.channels:
                raise ValidationError(
                    f"map has {data.shape[2]} channels, expected {self.channels}")
            h, w = data.shape[:2]
            if h < 1 or w < 1:
                raise ValidationError("maps must contain at least one cell")
            part.cell_sum += data.sum(axis=(0, 1))
            part.cells += h * w
            for k, (u, v) in enumerate(self.offsets):
                span_x = w - u
                span_y = h - abs(v)
                if span_x <= 0 or span_y <= 0:
                    continue
                y0 = max(0, -v)
                a = data[y0:y0 + span_y, 0:span_x].reshape(-1, self.channels)
                b = data[y0 + v:y0 + v + span_y, u:u + span_x].reshape(-1, self.channels)
                part.cross[k] += a.T @ b
                part.left[k] += a.sum(axis=0)
                part.right[k] += b.sum(axis=0)
                part.pairs[k] += a.shape[0]
        part.seal()
        self._partials.append(part)

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        if (other.radius, other.channels) != (self.radius, self.channels):
            raise ValidationError(
                f"cannot merge stats with radius/channels "
                f"({other.radius}, {other.channels}) into "
                f"({self.radius}, {self.channels})")
        merged = StatsAccumulator(self.radius, self.channels)
        merged._partials = self._partials + other._partials
        return merged

    def compact(self) -> None:
        """Collapse retained partials into one; bounds memory, keeps values
        within floating-point tolerance but drops the bit-exact merge
        guarantee across different compaction schedules."""
        if len(self._partials) <= 1:
            return
        ordered = self._ordered()
        merged = _Partial(len(self.offsets), self.channels)
        merged.cross = np.sum([p.cross for p in ordered], axis=0)
        merged.left = np.sum([p.left for p in ordered], axis=0)
        merged.right = np.sum([p.right for p in ordered], axis=0)
        merged.pairs = np.sum([p.pairs for p in ordered], axis=0)
        merged.cell_sum = np.sum([p.cell_sum for p in ordered], axis=0)
        merged.cells = sum(p.cells for p in ordered)
        merged.seal()
        self._partials = [merged]

    def _ordered(self) -> list[_Partial]:
        return sorted(self._partials, key=lambda p: p.tag)

    def result(self) -> BackgroundStats:
        if not self._partials:
            raise ValidationError("no pyramids were accumulated")
        ordered = self._ordered()
        cross = np.sum(np.stack([p.cross for p in ordered]), axis=0)
        left = np.sum(np.stack([p.left for p in ordered]), axis=0)
        right = np.sum(np.stack([p.right for p in ordered]), axis=0)
        pairs = np.sum(np.stack([p.pairs for p in ordered]), axis=0)
        cell_sum = np.sum(np.stack([p.cell_sum for p in ordered]), axis=0)
        cells = sum(p.cells for p in ordered)

        mean = cell_sum / cells
        corr = np.zeros_like(cross)
        for k in range(len(self.offsets)):
            n = pairs[k]
            if n == 0:
                continue
            # E[(a - mean)(b - mean)^T] from raw sums around the corpus mean.
            corr[k] = (cross[k]
                       - np.outer(left[k], mean)
                       - np.outer(mean, right[k])
                       + n * np.outer(mean, mean)) / n
        return BackgroundStats(radius=self.radius, mean=mean, autocorr=corr,
                               cell_count=cells, pair_counts=pairs)


def learn_stats(pyramids: Iterable[FeaturePyramid],
                radius: int,
                compact_every: int | None = None) -> BackgroundStats:
    """Learn mean and autocorrelation from a corpus of feature pyramids.

    Every pyramid level contributes, pooling statistics over scales.  The
    recommended corpus size is several thousand images (6000 as a floor,
    around 32000 for production-quality statistics).  ``compact_every``
    collapses the accumulator after that many pyramids to bound memory.
    """
    acc = None
    since_compact = 0
    for pyramid in pyramids:
        if acc is None:
            channels = (pyramid.channels if isinstance(pyramid, FeaturePyramid)
                        else tuple(pyramid)[0].channels)
            acc = StatsAccumulator(radius, channels)
        acc.add_pyramid(pyramid)
        since_compact += 1
        if compact_every and since_compact >= compact_every:
            acc.compact()
            since_compact = 0
    if acc is None:
        raise ValidationError("corpus is empty")
    return acc.result()


def merge_stats(a: StatsAccumulator, b: StatsAccumulator) -> StatsAccumulator:
    """Combine two accumulators; equals single-pass accumulation over the union."""
    return a.merge(b)


_WBG_MAGIC = b"WBG1"


def save_stats(stats: BackgroundStats, path: str | os.PathLike) -> None:
    """Write statistics as WBG1: header, mean, then one matrix per offset."""
    parts = [_WBG_MAGIC,
             struct.pack("<IIQ", stats.channels, stats.radius, stats.cell_count)]
    parts.append(np.ascontiguousarray(stats.mean, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(stats.autocorr, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_stats(path: str | os.PathLike) -> BackgroundStats:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _WBG_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {_WBG_MAGIC!r}")
    header = struct.Struct("<IIQ")
    if len(blob) < 4 + header.size:
        raise FormatError(f"{path}: truncated header")
    channels, radius, cell_count = header.unpack_from(blob, 4)
    n_off = len(stored_offsets(radius))
    expected = channels * 8 + n_off * channels * channels * 8
    payload = blob[4 + header.size:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    mean = np.frombuffer(payload[:channels * 8], dtype="<f8")
    corr = np.frombuffer(payload[channels * 8:], dtype="<f8").reshape(
        n_off, channels, channels)
    if not (np.isfinite(mean).all() and np.isfinite(corr).all()):
        raise FormatError(f"{path}: payload contains non-finite values")
    return BackgroundStats(radius=radius, mean=mean, autocorr=corr,
                           cell_count=cell_count)

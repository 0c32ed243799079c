"""Feature-space post-processing: per-channel scaling, PCA, multi-layer fusion.

Channel maxima and PCA are learned from streams of feature maps with
mergeable accumulators, so corpora that do not fit in memory can be processed
in parallel chunks.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_text
from .errors import FormatError, ValidationError
from .featmap import FeatureMap


@dataclass(frozen=True)
class ChannelScaler:
    """Per-channel maximum absolute values used to scale features to [-1, 1]."""

    max_abs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.max_abs, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValidationError("max_abs must be a non-empty vector")
        if not np.isfinite(arr).all() or (arr <= 0).any():
            raise ValidationError("max_abs entries must be positive and finite")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "max_abs", arr)

    @property
    def channels(self) -> int:
        return self.max_abs.size


class ChannelMaxAccumulator:
    """Streaming accumulator for per-channel maximum absolute feature values."""

    def __init__(self):
        self._max: np.ndarray | None = None

    def update(self, fmap: FeatureMap) -> None:
        values = np.abs(np.asarray(fmap.data, dtype=np.float64))
        peak = values.max(axis=(0, 1)) if values.size else np.zeros(fmap.channels)
        if self._max is None:
            self._max = peak
        elif peak.size != self._max.size:
            raise ValidationError(
                f"channel count changed from {self._max.size} to {peak.size}")
        else:
            self._max = np.maximum(self._max, peak)

    def merge(self, other: "ChannelMaxAccumulator") -> "ChannelMaxAccumulator":
        merged = ChannelMaxAccumulator()
        if self._max is None:
            merged._max = None if other._max is None else other._max.copy()
        elif other._max is None:
            merged._max = self._max.copy()
        elif self._max.size != other._max.size:
            raise ValidationError("cannot merge accumulators with different channel counts")
        else:
            merged._max = np.maximum(self._max, other._max)
        return merged

    def result(self) -> ChannelScaler:
        if self._max is None:
            raise ValidationError("no feature maps were accumulated")
        # Channels that never exceed zero scale by 1 (no-op).
        return ChannelScaler(max_abs=np.where(self._max > 0, self._max, 1.0))


def learn_channel_maxima(maps: Iterable[FeatureMap]) -> ChannelScaler:
    """Scan feature maps and record the largest |value| per channel."""
    acc = ChannelMaxAccumulator()
    for fmap in maps:
        acc.update(fmap)
    return acc.result()


def apply_scaler(fmap: FeatureMap, scaler: ChannelScaler) -> FeatureMap:
    """Divide each channel by its recorded maximum; geometry is unchanged.

    Maps outside the learning corpus may exceed [-1, 1]; the scaling is only
    approximate by design.
    """
    if fmap.channels != scaler.channels:
        raise ValidationError(
            f"map has {fmap.channels} channels, scaler expects {scaler.channels}")
    scaled = np.asarray(fmap.data, dtype=np.float64) / scaler.max_abs
    return FeatureMap(data=scaled, geometry=fmap.geometry, scale=fmap.scale)


def save_scaler(scaler: ChannelScaler, path: str | os.PathLike) -> None:
    """Plain text, one decimal number per line, one line per channel."""
    atomic_write_text(path, "".join(f"{float(v)!r}\n" for v in scaler.max_abs))


def load_scaler(path: str | os.PathLike) -> ChannelScaler:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines:
        raise FormatError(f"{path}: empty scaler file")
    try:
        values = np.array([float(line) for line in lines])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric line: {exc}") from exc
    return ChannelScaler(max_abs=values)


@dataclass(frozen=True)
class PcaTransform:
    """Projection x -> basis @ (x - mean) onto the top principal directions.

    ``basis`` has orthonormal rows (k x channels); validation tolerance
    adapts to the storage precision of the basis.
    """

    mean: np.ndarray
    basis: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        raw = np.asarray(self.basis)
        tol = 1e-5 if raw.dtype == np.float32 else 1e-8
        basis = raw.astype(np.float64)
        if mean.ndim != 1 or basis.ndim != 2:
            raise ValidationError("mean must be a vector and basis a matrix")
        k, channels = basis.shape
        if not 1 <= k <= channels:
            raise ValidationError(f"output dimension {k} not in [1, {channels}]")
        if mean.size != channels:
            raise ValidationError("mean length must match basis columns")
        if not (np.isfinite(mean).all() and np.isfinite(basis).all()):
            raise ValidationError("PCA parameters must be finite")
        gram = basis @ basis.T
        if not np.allclose(gram, np.eye(k), atol=tol):
            raise ValidationError("basis rows must be orthonormal")
        mean = mean.copy()
        basis = basis.copy()
        mean.setflags(write=False)
        basis.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)

    @property
    def input_channels(self) -> int:
        return self.basis.shape[1]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[0]


class PcaAccumulator:
    """Single-pass accumulation of sums and outer-product sums for PCA."""

    def __init__(self, channels: int):
        self.channels = channels
        self.count = 0
        self.vec_sum = np.zeros(channels)
        self.outer_sum = np.zeros((channels, channels))

    def update(self, cells) -> None:
        batch = np.atleast_2d(np.asarray(cells, dtype=np.float64))
        if batch.shape[1] != self.channels:
            raise ValidationError(
                f"cells have {batch.shape[1]} channels, expected {self.channels}")
        self.count += batch.shape[0]
        self.vec_sum += batch.sum(axis=0)
        self.outer_sum += batch.T @ batch

    def update_map(self, fmap: FeatureMap) -> None:
        self.update(np.asarray(fmap.data, dtype=np.float64).reshape(-1, fmap.channels))

    def merge(self, other: "PcaAccumulator") -> "PcaAccumulator":
        if other.channels != self.channels:
            raise ValidationError("cannot merge accumulators with different channel counts")
        merged = PcaAccumulator(self.channels)
        merged.count = self.count + other.count
        merged.vec_sum = self.vec_sum + other.vec_sum
        merged.outer_sum = self.outer_sum + other.outer_sum
        return merged

    def result(self, output_dim: int) -> PcaTransform:
        if output_dim > self.channels:
            raise ValidationError(
                f"output dimension {output_dim} exceeds {self.channels} channels")
        if self.count < 2:
            raise ValidationError("PCA needs at least 2 samples")
        if self.count < output_dim + 1:
            raise ValidationError(
                f"PCA with {output_dim} components needs at least "
                f"{output_dim + 1} samples, got {self.count}")
        mean = self.vec_sum / self.count
        cov = (self.outer_sum - self.count * np.outer(mean, mean)) / (self.count - 1)
        cov = 0.5 * (cov + cov.T)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1][:output_dim]
        basis = eigvecs[:, order].T.copy()
        # Deterministic sign: the largest-magnitude coefficient of each row
        # is made positive.
        for row in basis:
            if row[np.argmax(np.abs(row))] < 0:
                row *= -1.0
        return PcaTransform(mean=mean, basis=basis)


def learn_pca(cells, output_dim: int) -> PcaTransform:
    """Fit a PCA projection to feature cells (rows of an (n, channels) array)."""
    batch = np.atleast_2d(np.asarray(cells, dtype=np.float64))
    acc = PcaAccumulator(batch.shape[1])
    acc.update(batch)
    return acc.result(output_dim)


def apply_pca(fmap: FeatureMap, transform: PcaTransform) -> FeatureMap:
    """Project every cell; dimensions and geometry stay, channels become k."""
    if fmap.channels != transform.input_channels:
        raise ValidationError(
            f"map has {fmap.channels} channels, PCA expects {transform.input_channels}")
    flat = np.asarray(fmap.data, dtype=np.float64).reshape(-1, fmap.channels)
    projected = (flat - transform.mean) @ transform.basis.T
    data = projected.reshape(fmap.height, fmap.width, transform.output_dim)
    return FeatureMap(data=data, geometry=fmap.geometry, scale=fmap.scale)


def save_pca(transform: PcaTransform, path: str | os.PathLike) -> None:
    doc = {
        "k": transform.output_dim,
        "F": transform.input_channels,
        "mean": transform.mean.tolist(),
        "basis": transform.basis.tolist(),
    }
    atomic_write_text(path, json.dumps(doc))


def load_pca(path: str | os.PathLike) -> PcaTransform:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    for key in ("k", "F", "mean", "basis"):
        if key not in doc:
            raise FormatError(f"{path}: missing field {key!r}")
    basis = np.asarray(doc["basis"], dtype=np.float64)
    if basis.shape != (doc["k"], doc["F"]):
        raise FormatError(
            f"{path}: basis shape {basis.shape} does not match k={doc['k']}, F={doc['F']}")
    return PcaTransform(mean=np.asarray(doc["mean"]), basis=basis)


def combine_layers(maps: Sequence[FeatureMap]) -> FeatureMap:
    """Fuse maps of the same image at different cell sizes into one map.

    The output keeps the finest map's geometry and dimensions; coarser maps
    are oversampled by nearest neighbor (each coarse cell replicated over its
    block of fine cells, indices clamped at the coarse map's edge).  Channels
    are concatenated in input order.
    """
    if not maps:
        raise ValidationError("combine_layers needs at least one map")
    if len(maps) == 1:
        return maps[0]
    finest = min(maps, key=lambda m: (m.geometry.cell_width, m.geometry.cell_height))
    fw, fh = finest.geometry.cell_width, finest.geometry.cell_height
    scale = finest.scale
    for m in maps:
        if not np.isclose(m.scale, scale, rtol=1e-6):
            raise ValidationError("all maps must come from the same image scale")
        if m.geometry.cell_width % fw or m.geometry.cell_height % fh:
            raise ValidationError(
                f"cell size {m.geometry.cell_width}x{m.geometry.cell_height} is not an "
                f"integer multiple of the finest {fw}x{fh}")

    parts = []
    for m in maps:
        rx = m.geometry.cell_width // fw
        ry = m.geometry.cell_height // fh
        xs = np.minimum(np.arange(finest.width) // rx, m.width - 1)
        ys = np.minimum(np.arange(finest.height) // ry, m.height - 1)
        parts.append(np.asarray(m.data)[np.ix_(ys, xs)])
    return FeatureMap(data=np.concatenate(parts, axis=2),
                      geometry=finest.geometry, scale=scale)

"""Feature maps on a cell grid: geometry, HOG extraction, file ingestion, pyramids.

A feature map divides an image into square cells of a fixed pixel size and
stores one feature vector per cell.  Maps can be computed here (HOG) or read
from files produced by an external feature extractor; both carry the cell
geometry and the image scale they were extracted at, so detections can be
mapped back to original pixel coordinates.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import cv2
import numpy as np

from ._io import atomic_write_bytes
from .errors import FormatError, ValidationError

HOG_CHANNELS = 32
DEFAULT_HOG_CELL = 8

# Orientation layout of the built-in HOG variant: 18 contrast-sensitive
# channels (full circle, 20 degrees apart), 9 contrast-insensitive channels
# (half circle), 4 gradient-energy channels (one per normalization block)
# and one channel that is always zero, for 32 channels total.
_N_INSENSITIVE = 9
_N_SENSITIVE = 2 * _N_INSENSITIVE


@dataclass(frozen=True)
class CellGeometry:
    """Pixel footprint of one feature cell and the border trimmed per image side."""

    cell_width: int
    cell_height: int
    border_x: int = 0
    border_y: int = 0

    def __post_init__(self):
        if self.cell_width < 1 or self.cell_height < 1:
            raise ValidationError("cell size must be at least 1 pixel")
        if self.border_x < 0 or self.border_y < 0:
            raise ValidationError("borders must not be negative")


@dataclass(frozen=True)
class LayerParam:
    """Convolution or pooling layer hyper-parameters relevant to cell geometry."""

    kind: str  # "convolution" or "pooling"
    kernel_size: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.kind not in ("convolution", "pooling"):
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.kernel_size < 1:
            raise ValidationError("kernel_size must be at least 1")
        if self.stride < 1:
            raise ValidationError("stride must be at least 1")
        if self.pad < 0:
            raise ValidationError("pad must not be negative")


@dataclass(frozen=True)
class FeatureMap:
    """A width x height grid of feature cells with pixel geometry.

    ``data`` has shape (height, width, channels), row-major with the channel
    axis fastest.  ``scale`` is the factor by which the source image was
    resized before extraction (1.0 means original resolution); dividing cell
    coordinates by it maps back to original pixels.  Instances are immutable:
    the data buffer is marked read-only.
    """

    data: np.ndarray
    geometry: CellGeometry
    scale: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValidationError(f"feature data must be 3-d, got shape {arr.shape}")
        if arr.shape[2] < 1:
            raise ValidationError("feature map needs at least one channel")
        if arr.size and not np.isfinite(arr).all():
            raise ValidationError("feature values must be finite")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValidationError("scale must be positive and finite")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FeatureExtractorConfig:
    """How features are produced: built-in HOG or precomputed map files."""

    kind: str = "hog"  # "hog" or "precomputed"
    hog_cell_size: int = DEFAULT_HOG_CELL
    manifest_path: str | None = None
    max_image_dimension: int = 1024
    channels: int | None = None  # declared channel count for precomputed input

    def __post_init__(self):
        if self.kind not in ("hog", "precomputed"):
            raise ValidationError(f"unknown extractor kind {self.kind!r}")
        if self.hog_cell_size < 1:
            raise ValidationError("hog_cell_size must be at least 1")
        if self.max_image_dimension < 1:
            raise ValidationError("max_image_dimension must be at least 1")

    def output_channels(self) -> int | None:
        return HOG_CHANNELS if self.kind == "hog" else self.channels


@dataclass(frozen=True)
class FeaturePyramid:
    """Feature maps of one image at geometrically spaced scales.

    Scales decrease strictly; level ``i + intervals_per_octave`` sits exactly
    one octave (factor 2) below level ``i``.  All levels share channel count
    and cell geometry.  ``image_size`` is the (width, height) of the source
    image in pixels when known; it is used to clamp detection boxes.
    """

    levels: tuple[FeatureMap, ...]
    intervals_per_octave: int
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise ValidationError("pyramid needs at least one level")
        if self.intervals_per_octave < 1:
            raise ValidationError("intervals_per_octave must be at least 1")
        scales = [lv.scale for lv in levels]
        if any(b >= a for a, b in zip(scales, scales[1:])):
            raise ValidationError("pyramid scales must decrease strictly")
        first = levels[0]
        for lv in levels[1:]:
            if lv.channels != first.channels:
                raise ValidationError("pyramid levels must share channel count")
            if lv.geometry != first.geometry:
                raise ValidationError("pyramid levels must share cell geometry")
        object.__setattr__(self, "levels", levels)

    @property
    def channels(self) -> int:
        return self.levels[0].channels

    @property
    def geometry(self) -> CellGeometry:
        return self.levels[0].geometry


def derive_geometry(layers: list[LayerParam]) -> CellGeometry:
    """Derive cell size and border from a stack of convolution/pooling layers.

    The cell size is the product of all strides.  The border is the
    accumulated receptive-field offset: starting from jump 1 and offset 0,
    each layer adds ((kernel - 1) / 2 - pad) times the current jump to the
    offset and multiplies the jump by its stride.  Negative totals clamp to
    zero; fractional totals round half up.
    """
    jump = 1
    offset = 0.0
    for layer in layers:
        offset += ((layer.kernel_size - 1) / 2.0 - layer.pad) * jump
        jump *= layer.stride
    border = max(0, math.floor(offset + 0.5))
    return CellGeometry(cell_width=jump, cell_height=jump,
                        border_x=border, border_y=border)


def _as_float_image(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValidationError(f"expected a 2-d or 3-d image, got shape {img.shape}")
    if img.shape[2] == 4:  # drop alpha
        img = img[:, :, :3]
    return np.ascontiguousarray(img, dtype=np.float64)


def extract_hog(image, cell_size: int = DEFAULT_HOG_CELL, scale: float = 1.0) -> FeatureMap:
    """Compute 32-channel HOG features on a grid of ``cell_size`` pixel cells.

    Gradients are taken per color channel with centered differences and the
    channel with the largest magnitude wins per pixel.  The gradient
    direction is snapped to 18 discrete orientations and the magnitude is
    shared bilinearly between the four surrounding cells.  Cell histograms
    are normalized against their four 2x2 cell neighborhoods (values clipped
    at 0.2), producing 18 contrast-sensitive channels, 9 contrast-insensitive
    channels, 4 gradient-energy channels and one all-zero channel.

    The grid keeps floor(width / cell_size) x floor(height / cell_size)
    cells; boundary cells reuse their nearest neighborhood for normalization.
    """
    img = _as_float_image(image)
    rows, cols = img.shape[:2]
    cells_y = rows // cell_size
    cells_x = cols // cell_size
    if cells_x < 1 or cells_y < 1:
        raise ValidationError(
            f"image {cols}x{rows} is smaller than one {cell_size}px cell")

    # Centered differences with replicated edges.
    xp = np.clip(np.arange(cols) + 1, 0, cols - 1)
    xm = np.clip(np.arange(cols) - 1, 0, cols - 1)
    yp = np.clip(np.arange(rows) + 1, 0, rows - 1)
    ym = np.clip(np.arange(rows) - 1, 0, rows - 1)
    dx = img[:, xp, :] - img[:, xm, :]
    dy = img[yp, :, :] - img[ym, :, :]

    energy = dx * dx + dy * dy
    best = np.argmax(energy, axis=2)[:, :, None]
    gx = np.take_along_axis(dx, best, axis=2)[:, :, 0]
    gy = np.take_along_axis(dy, best, axis=2)[:, :, 0]
    magnitude = np.sqrt(np.take_along_axis(energy, best, axis=2)[:, :, 0])

    theta = np.arctan2(gy, gx) % (2.0 * np.pi)
    bins = np.rint(theta / (2.0 * np.pi / _N_SENSITIVE)).astype(np.int64) % _N_SENSITIVE

    # Bilinear vote of each pixel into the four surrounding cell centers.
    px = (np.arange(cols) + 0.5) / cell_size - 0.5
    py = (np.arange(rows) + 0.5) / cell_size - 0.5
    ix0 = np.floor(px).astype(np.int64)
    iy0 = np.floor(py).astype(np.int64)
    wx1 = px - ix0
    wy1 = py - iy0

    hist = np.zeros((cells_y, cells_x, _N_SENSITIVE), dtype=np.float64)
    iy0g, ix0g = np.meshgrid(iy0, ix0, indexing="ij")
    wy1g, wx1g = np.meshgrid(wy1, wx1, indexing="ij")
    for dyc, dxc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        cy = iy0g + dyc
        cx = ix0g + dxc
        w = (wy1g if dyc else 1.0 - wy1g) * (wx1g if dxc else 1.0 - wx1g)
        ok = (cy >= 0) & (cy < cells_y) & (cx >= 0) & (cx < cells_x)
        np.add.at(hist, (cy[ok], cx[ok], bins[ok]), (w * magnitude)[ok])

    insensitive = hist[:, :, :_N_INSENSITIVE] + hist[:, :, _N_INSENSITIVE:]
    cell_energy = np.sum(insensitive ** 2, axis=2)

    # Four 2x2 block energies around each cell, edges clamped so boundary
    # cells keep a full complement of normalizers.
    padded = np.pad(cell_energy, 1, mode="edge")
    corners = (
        padded[0:-2, 0:-2] + padded[0:-2, 1:-1] + padded[1:-1, 0:-2] + padded[1:-1, 1:-1],
        padded[0:-2, 1:-1] + padded[0:-2, 2:] + padded[1:-1, 1:-1] + padded[1:-1, 2:],
        padded[1:-1, 0:-2] + padded[1:-1, 1:-1] + padded[2:, 0:-2] + padded[2:, 1:-1],
        padded[1:-1, 1:-1] + padded[1:-1, 2:] + padded[2:, 1:-1] + padded[2:, 2:],
    )

    out = np.zeros((cells_y, cells_x, HOG_CHANNELS), dtype=np.float64)
    texture_base = _N_SENSITIVE + _N_INSENSITIVE
    for k, block in enumerate(corners):
        norm = 1.0 / np.sqrt(block + 1e-4)[:, :, None]
        clipped_s = np.minimum(hist * norm, 0.2)
        clipped_i = np.minimum(insensitive * norm, 0.2)
        out[:, :, :_N_SENSITIVE] += 0.5 * clipped_s
        out[:, :, _N_SENSITIVE:texture_base] += 0.5 * clipped_i
        out[:, :, texture_base + k] = 0.2357 * np.sum(clipped_i, axis=2)
    # channel 31 stays zero

    geometry = CellGeometry(cell_width=cell_size, cell_height=cell_size)
    return FeatureMap(data=out, geometry=geometry, scale=scale)


_WFM_MAGIC = b"WFM1"
_WFM_HEADER = struct.Struct("<7If")


def save_feature_map(fmap: FeatureMap, path: str | os.PathLike) -> None:
    """Write a feature map in the WFM1 binary format (atomically)."""
    header = _WFM_HEADER.pack(
        fmap.width, fmap.height, fmap.channels,
        fmap.geometry.cell_width, fmap.geometry.cell_height,
        fmap.geometry.border_x, fmap.geometry.border_y,
        fmap.scale,
    )
    payload = np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    atomic_write_bytes(path, _WFM_MAGIC + header + payload)


def load_feature_map(path: str | os.PathLike) -> FeatureMap:
    """Read a WFM1 feature-map file; save followed by load is value-identical."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _WFM_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {_WFM_MAGIC!r}")
    if len(blob) < 4 + _WFM_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    width, height, channels, cw, ch, bx, by, scale = _WFM_HEADER.unpack_from(blob, 4)
    if channels < 1:
        raise FormatError(f"{path}: header field channels must be at least 1")
    expected = width * height * channels * 4
    payload = blob[4 + _WFM_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload holds {len(payload) // 4} values, "
            f"header declares {width}x{height}x{channels}")
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width, channels)
    if data.size and not np.isfinite(data).all():
        raise FormatError(f"{path}: payload contains non-finite values")
    try:
        geometry = CellGeometry(cell_width=cw, cell_height=ch, border_x=bx, border_y=by)
        return FeatureMap(data=data, geometry=geometry, scale=float(scale))
    except ValidationError as exc:
        raise FormatError(f"{path}: invalid header: {exc}") from exc


def _level_scales(intervals: int, count: int) -> list[float]:
    # 2^(-i/intervals) computed so that level i+intervals is exactly half of
    # level i (division by a power of two is exact in floating point).
    return [2.0 ** (-(i % intervals) / intervals) / float(2 ** (i // intervals))
            for i in range(count)]


def relative_level_scale(index: int, intervals: int) -> float:
    """Scale of pyramid level ``index`` relative to the base level."""
    return _level_scales(intervals, index + 1)[index]


def resize_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize used throughout the pipeline."""
    return cv2.resize(np.asarray(image), (width, height), interpolation=cv2.INTER_LINEAR)


def build_pyramid(source,
                  config: FeatureExtractorConfig,
                  intervals_per_octave: int = 5,
                  min_level_cells: int = 4) -> FeaturePyramid:
    """Build a multi-scale feature pyramid.

    For ``config.kind == "hog"`` the source is an image array.  If its larger
    dimension exceeds ``config.max_image_dimension`` the image is first
    downscaled to that bound, and all level scales account for it.  Levels
    follow the schedule 2^(-i / intervals) and stop before either feature-map
    dimension would fall below ``min_level_cells``.

    For ``config.kind == "precomputed"`` the source is a manifest path (or
    None, falling back to ``config.manifest_path``); the listed level files
    are loaded and validated against the same scale schedule.
    """
    if intervals_per_octave < 1:
        raise ValidationError("intervals_per_octave must be at least 1")
    if config.kind == "precomputed":
        manifest = source if source is not None else config.manifest_path
        if manifest is None:
            raise ValidationError("precomputed extraction needs a manifest path")
        return _pyramid_from_manifest(manifest, intervals_per_octave)

    img = np.asarray(source)
    if img.ndim not in (2, 3):
        raise ValidationError(f"expected an image array, got shape {img.shape}")
    src_h, src_w = img.shape[:2]
    base_scale = 1.0
    larger = max(src_w, src_h)
    if larger > config.max_image_dimension:
        base_scale = config.max_image_dimension / larger
        img = resize_image(img, max(1, round(src_w * base_scale)),
                           max(1, round(src_h * base_scale)))
    base_h, base_w = np.asarray(img).shape[:2]

    cell = config.hog_cell_size
    levels = []
    index = 0
    while True:
        rel = relative_level_scale(index, intervals_per_octave)
        w = round(base_w * rel)
        h = round(base_h * rel)
        if w // cell < min_level_cells or h // cell < min_level_cells:
            break
        level_img = img if index == 0 else resize_image(img, w, h)
        levels.append(extract_hog(level_img, cell_size=cell, scale=base_scale * rel))
        index += 1
    if not levels:
        raise ValidationError(
            f"image {src_w}x{src_h} yields no level with at least "
            f"{min_level_cells} cells at cell size {cell}")
    return FeaturePyramid(levels=tuple(levels),
                          intervals_per_octave=intervals_per_octave,
                          image_size=(src_w, src_h))


def _pyramid_from_manifest(manifest_path, intervals: int) -> FeaturePyramid:
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: not valid JSON: {exc}") from exc
    entries = manifest.get("levels")
    if not isinstance(entries, list) or not entries:
        raise FormatError(f"{manifest_path}: field 'levels' must be a non-empty list")
    root = os.path.dirname(os.fspath(manifest_path))

    levels = []
    for i, entry in enumerate(entries):
        if "scale" not in entry or "file" not in entry:
            raise FormatError(f"{manifest_path}: level {i} needs 'scale' and 'file'")
        fmap = load_feature_map(os.path.join(root, entry["file"]))
        declared = float(entry["scale"])
        if not math.isclose(declared, fmap.scale, rel_tol=1e-6):
            raise ValidationError(
                f"{manifest_path}: level {i} declares scale {declared}, "
                f"file carries {fmap.scale}")
        levels.append(fmap)

    base = levels[0].scale
    for i, fmap in enumerate(levels):
        want = base * relative_level_scale(i, intervals)
        if not math.isclose(fmap.scale, want, rel_tol=1e-6):
            raise ValidationError(
                f"{manifest_path}: level {i} scale {fmap.scale} deviates from "
                f"the 2^(-i/{intervals}) schedule (expected {want})")
        if fmap.channels != levels[0].channels:
            raise ValidationError(
                f"{manifest_path}: level {i} has {fmap.channels} channels, "
                f"level 0 has {levels[0].channels}")

    image_size = None
    image_path = manifest.get("image")
    if image_path:
        candidate = os.path.join(root, image_path)
        if os.path.exists(candidate):
            img = cv2.imread(candidate, cv2.IMREAD_UNCHANGED)
            if img is not None:
                image_size = (img.shape[1], img.shape[0])
    return FeaturePyramid(levels=tuple(levels), intervals_per_octave=intervals,
                          image_size=image_size)

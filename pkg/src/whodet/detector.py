"""FFT-accelerated sliding-window scoring, detection assembly, and NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.fft

from .errors import PipelineMismatchError, ValidationError
from .featmap import FeatureMap, FeaturePyramid
from .learner import ModelComponent


@dataclass(frozen=True)
class ScoreMap:
    """Scores of all fully-inside filter placements on one pyramid level."""

    scores: np.ndarray  # (height, width) of valid placements in cells
    level_scale: float
    level_index: int = 0

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    @property
    def height(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True)
class Detection:
    """A scored box in original-image pixel coordinates."""

    box: tuple[float, float, float, float]  # x, y, w, h
    score: float
    component_index: int = 0
    level_index: int = 0

    def __post_init__(self):
        x, y, w, h = self.box
        if not all(math.isfinite(v) for v in (x, y, w, h, self.score)):
            raise ValidationError("detection box and score must be finite")
        if w <= 0 or h <= 0:
            raise ValidationError(f"detection box must have positive size, got {self.box}")

    @property
    def area(self) -> float:
        return self.box[2] * self.box[3]


@dataclass(frozen=True)
class NmsConfig:
    """Overlap pruning thresholds.

    ``overlap_threshold`` is the usual IoU cutoff (0.4 by default, which
    works better than 0.5 for loosely localized features).  The optional
    ``nested_containment_threshold`` additionally prunes detections whose
    intersection with a kept box covers more than that fraction of the
    smaller of the two boxes, which removes nested detections that plain IoU
    never reaches.
    """

    overlap_threshold: float = 0.4
    nested_containment_threshold: float | None = None

    def __post_init__(self):
        if not 0 < self.overlap_threshold <= 1:
            raise ValidationError("overlap_threshold must be in (0, 1]")
        if self.nested_containment_threshold is not None:
            if not 0 < self.nested_containment_threshold <= 1:
                raise ValidationError("nested_containment_threshold must be in (0, 1]")


def _fft_shape(h: int, w: int) -> tuple[int, int]:
    return scipy.fft.next_fast_len(h), scipy.fft.next_fast_len(w)


def _level_spectra(level: FeatureMap, shape: tuple[int, int]) -> np.ndarray:
    planes = np.ascontiguousarray(
        np.asarray(level.data, dtype=np.float64).transpose(2, 0, 1))
    return scipy.fft.rfft2(planes, s=shape, axes=(-2, -1))


def convolve_score(level: FeatureMap, component: ModelComponent,
                   _spectra: np.ndarray | None = None,
                   _shape: tuple[int, int] | None = None) -> ScoreMap:
    """Correlate one filter with one level in the frequency domain.

    One forward transform per feature plane, a conjugate multiply-accumulate
    over planes and a single inverse transform produce the same scores as the
    direct sliding-window sum, up to roundoff.  Only placements fully inside
    the level are scored; a filter larger than the level yields an empty map.
    """
    if level.channels != component.shape.channels:
        raise ValidationError(
            f"level has {level.channels} channels, filter expects "
            f"{component.shape.channels}")
    m, n = component.shape.width, component.shape.height
    out_w = level.width - m + 1
    out_h = level.height - n + 1
    if out_w <= 0 or out_h <= 0:
        return ScoreMap(scores=np.zeros((max(0, out_h), max(0, out_w))),
                        level_scale=level.scale)

    shape = _shape or _fft_shape(level.height, level.width)
    spectra = _spectra if _spectra is not None else _level_spectra(level, shape)
    filt = np.ascontiguousarray(
        np.asarray(component.filter, dtype=np.float64).transpose(2, 0, 1))
    filt_spec = scipy.fft.rfft2(filt, s=shape, axes=(-2, -1))
    accum = np.sum(spectra * np.conj(filt_spec), axis=0)
    full = scipy.fft.irfft2(accum, s=shape)
    return ScoreMap(scores=full[:out_h, :out_w] - component.bias,
                    level_scale=level.scale)


def score_naive(level: FeatureMap, component: ModelComponent) -> ScoreMap:
    """Direct sliding-window sum; the slow reference for the FFT path."""
    m, n = component.shape.width, component.shape.height
    out_w = level.width - m + 1
    out_h = level.height - n + 1
    scores = np.zeros((max(0, out_h), max(0, out_w)))
    data = np.asarray(level.data, dtype=np.float64)
    filt = np.asarray(component.filter, dtype=np.float64)
    for y in range(out_h):
        for x in range(out_w):
            scores[y, x] = np.sum(data[y:y + n, x:x + m] * filt) - component.bias
    return ScoreMap(scores=scores, level_scale=level.scale)


def _check_pyramid(pyramid: FeaturePyramid, components: Sequence[ModelComponent],
                   expected_geometry=None) -> None:
    channels = {c.shape.channels for c in components}
    if len(channels) != 1:
        raise ValidationError("all components must share a channel count")
    want = channels.pop()
    if pyramid.channels != want:
        raise PipelineMismatchError(
            f"pyramid provides {pyramid.channels} channels but the model was "
            f"built on {want}; rebuild features with the model's stored pipeline")
    if expected_geometry is not None and pyramid.geometry != expected_geometry:
        raise PipelineMismatchError(
            f"pyramid geometry {pyramid.geometry} does not match the model's "
            f"pipeline geometry {expected_geometry}")


def detect(pyramid: FeaturePyramid,
           components: Sequence[ModelComponent],
           thresholds: float | Sequence[float] | None = None,
           expected_geometry=None) -> list[Detection]:
    """Score all levels against all components and keep placements above
    threshold, mapped back to original-image pixel boxes.

    ``thresholds`` may be one value, one per component, or None to use each
    component's bias-relative zero.  The per-level spectra are computed once
    and shared across components.  Results are sorted by descending score.
    """
    _check_pyramid(pyramid, components, expected_geometry)
    if thresholds is None:
        per_component = [0.0] * len(components)
    elif np.isscalar(thresholds):
        per_component = [float(thresholds)] * len(components)
    else:
        per_component = [float(t) for t in thresholds]
        if len(per_component) != len(components):
            raise ValidationError(
                f"{len(per_component)} thresholds for {len(components)} components")

    geom = pyramid.geometry
    detections = []
    for li, level in enumerate(pyramid.levels):
        shape = _fft_shape(level.height, level.width)
        spectra = _level_spectra(level, shape)
        for ci, comp in enumerate(components):
            smap = convolve_score(level, comp, _spectra=spectra, _shape=shape)
            if smap.scores.size == 0:
                continue
            ys, xs = np.nonzero(smap.scores >= per_component[ci])
            for y, x in zip(ys.tolist(), xs.tolist()):
                box = _cell_to_pixels(x, y, comp, geom, level.scale,
                                      pyramid.image_size)
                if box is None:
                    continue
                detections.append(Detection(box=box,
                                            score=float(smap.scores[y, x]),
                                            component_index=ci,
                                            level_index=li))
    detections.sort(key=_nms_order)
    return detections


def _cell_to_pixels(x: int, y: int, comp: ModelComponent, geom, scale: float,
                    image_size) -> tuple[float, float, float, float] | None:
    px = (x * geom.cell_width + geom.border_x) / scale
    py = (y * geom.cell_height + geom.border_y) / scale
    pw = comp.shape.width * geom.cell_width / scale
    ph = comp.shape.height * geom.cell_height / scale
    if image_size is not None:
        img_w, img_h = image_size
        x0 = min(max(px, 0.0), img_w)
        y0 = min(max(py, 0.0), img_h)
        x1 = min(max(px + pw, 0.0), img_w)
        y1 = min(max(py + ph, 0.0), img_h)
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            return None
        return (x0, y0, x1 - x0, y1 - y0)
    return (px, py, pw, ph)


def box_iou(a: tuple[float, float, float, float],
            b: tuple[float, float, float, float]) -> float:
    """Intersection over union of two (x, y, w, h) rectangles."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _containment(a, b) -> float:
    """Intersection area over the area of the smaller box."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    smaller = min(aw * ah, bw * bh)
    return iw * ih / smaller if smaller > 0 else 0.0


def _nms_order(d: Detection):
    return (-d.score, d.area, d.box[0], d.box[1])


def nms(detections: Sequence[Detection], config: NmsConfig | None = None) -> list[Detection]:
    """Greedy non-maxima suppression with optional nested-box pruning.

    Detections are processed best first (ties broken by area, then position,
    so the result does not depend on input order).  A detection is dropped
    when its IoU with any kept detection exceeds the overlap threshold, or,
    if configured, when a kept box covers more than the containment fraction
    of the smaller of the two boxes.
    """
    if config is None:
        config = NmsConfig()
    ordered = sorted(detections, key=_nms_order)
    kept: list[Detection] = []
    for cand in ordered:
        suppressed = False
        for keep in kept:
            if box_iou(cand.box, keep.box) > config.overlap_threshold:
                suppressed = True
                break
            if (config.nested_containment_threshold is not None
                    and _containment(cand.box, keep.box)
                    > config.nested_containment_threshold):
                suppressed = True
                break
        if not suppressed:
            kept.append(cand)
    return kept

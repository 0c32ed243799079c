"""Linear template learning from positive samples and background statistics.

The background covariance over an M x N cell grid is reconstructed from the
stationary autocorrelation as a symmetric matrix whose blocks depend only on
the cell offset (constant along block diagonals), then factorized with an
adaptively regularized Cholesky decomposition to whiten the mean positive
sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .bgstats import BackgroundStats
from .errors import CholeskyError, CovarianceMemoryError, ValidationError
from .featmap import CellGeometry
from .pipeline import FeaturePipeline

DEFAULT_COVARIANCE_CAP = 4 << 30  # bytes, refuse larger reconstructions


@dataclass(frozen=True)
class ModelShape:
    """Template size: width x height in cells, channels per cell."""

    width: int
    height: int
    channels: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError("model must be at least 1x1 cells")
        if self.channels < 1:
            raise ValidationError("model needs at least one channel")

    @property
    def cells(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class ModelComponent:
    """One linear template: filter tensor, bias, and the mean positive sample.

    ``filter`` and ``positive_mean`` have shape (height, width, channels) and
    are stored in single precision, matching the on-disk model format.
    Scores are filter responses minus ``bias``.
    """

    shape: ModelShape
    filter: np.ndarray
    bias: float = 0.0
    positive_mean: np.ndarray | None = None

    def __post_init__(self):
        expected = (self.shape.height, self.shape.width, self.shape.channels)
        filt = np.ascontiguousarray(self.filter, dtype=np.float32)
        if filt.shape != expected:
            raise ValidationError(
                f"filter shape {filt.shape} does not match model shape {expected}")
        if not np.isfinite(filt).all():
            raise ValidationError("filter values must be finite")
        if not math.isfinite(self.bias):
            raise ValidationError("bias must be finite")
        filt.setflags(write=False)
        object.__setattr__(self, "filter", filt)
        if self.positive_mean is not None:
            pos = np.ascontiguousarray(self.positive_mean, dtype=np.float32)
            if pos.shape != expected:
                raise ValidationError(
                    f"positive mean shape {pos.shape} does not match {expected}")
            pos.setflags(write=False)
            object.__setattr__(self, "positive_mean", pos)


@dataclass(frozen=True)
class LearnerConfig:
    """Learning knobs: regularizer escalation and mixture clustering."""

    initial_regularizer: float | None = None  # None: 1e-7 x mean diagonal
    escalation_factor: float = 10.0
    max_escalations: int = 8
    n_aspect_clusters: int = 1
    n_feature_clusters: int = 1
    max_covariance_bytes: int = DEFAULT_COVARIANCE_CAP

    def __post_init__(self):
        if self.initial_regularizer is not None and self.initial_regularizer < 0:
            raise ValidationError("initial_regularizer must not be negative")
        if self.escalation_factor <= 1:
            raise ValidationError("escalation_factor must exceed 1")
        if self.max_escalations < 0:
            raise ValidationError("max_escalations must not be negative")
        if self.n_aspect_clusters < 1 or self.n_feature_clusters < 1:
            raise ValidationError("cluster counts must be at least 1")


@dataclass(frozen=True)
class LdaSolveInfo:
    """Diagnostics of one whitening solve."""

    regularizer: float
    escalations: int
    residual: float


def estimate_covariance_bytes(shape: ModelShape) -> int:
    """Bytes to store the reconstructed covariance at 4 bytes per coefficient.

    The coefficient count is (width * height * channels) squared, so memory
    grows quadratically with the number of channels.  The in-memory solve
    uses double precision, i.e. twice this figure.
    """
    side = shape.width * shape.height * shape.channels
    return side * side * 4


def reconstruct_covariance(stats: BackgroundStats, shape: ModelShape,
                           max_bytes: int | None = DEFAULT_COVARIANCE_CAP) -> np.ndarray:
    """Assemble the dense background covariance for an M x N cell grid.

    Cells are enumerated row-major; the block for cell pair ((i, j), (i', j'))
    is the autocorrelation at offset (i' - i, j' - j).  Equal offsets yield
    bit-identical blocks and the result is exactly symmetric.
    """
    m, n, channels = shape.width, shape.height, shape.channels
    if channels != stats.channels:
        raise ValidationError(
            f"model has {channels} channels, statistics have {stats.channels}")
    if m - 1 > stats.radius or n - 1 > stats.radius:
        raise ValidationError(
            f"model of {m}x{n} cells needs autocorrelation radius "
            f">= {max(m, n) - 1}, statistics provide {stats.radius}")
    estimate = estimate_covariance_bytes(shape)
    if max_bytes is not None and estimate > max_bytes:
        raise CovarianceMemoryError(
            f"covariance would need {estimate} bytes "
            f"({estimate / 2 ** 30:.2f} GiB at single precision), cap is "
            f"{max_bytes}; reduce model size or channels (PCA)")

    table = np.empty((2 * m - 1, 2 * n - 1, channels, channels))
    for du in range(-(m - 1), m):
        for dv in range(-(n - 1), n):
            table[du + m - 1, dv + n - 1] = stats.gamma(du, dv)

    cells = np.arange(m * n)
    ci = cells % m
    cj = cells // m
    side = m * n * channels
    cov = np.empty((side, side))
    for a in range(m * n):
        row = table[ci - ci[a] + m - 1, cj - cj[a] + n - 1]  # (MN, F, F)
        cov[a * channels:(a + 1) * channels, :] = (
            row.transpose(1, 0, 2).reshape(channels, side))
    return cov


def learn_exemplar_lda(positives: Sequence[np.ndarray],
                       stats: BackgroundStats,
                       config: LearnerConfig | None = None,
                       return_info: bool = False):
    """Learn one linear template by whitening the mean positive sample.

    Solves (S + lambda I) vec(filter) = vec(mean positive - tiled mean cell),
    where S is the reconstructed background covariance.  The regularizer
    starts at ``config.initial_regularizer`` (default 1e-7 times the mean
    diagonal of S) and is multiplied by the escalation factor until the
    Cholesky factorization succeeds.  The returned component has bias 0;
    thresholds are set later from validation data.

    With ``return_info=True`` also returns an :class:`LdaSolveInfo` carrying
    the applied regularizer, the escalation count and the solve residual.
    """
    if config is None:
        config = LearnerConfig()
    if not positives:
        raise ValidationError("need at least one positive sample")
    tensors = [np.asarray(p, dtype=np.float64) for p in positives]
    first = tensors[0].shape
    if len(first) != 3:
        raise ValidationError(f"positive samples must be 3-d, got shape {first}")
    for t in tensors[1:]:
        if t.shape != first:
            raise ValidationError(
                f"positive sample shapes differ: {t.shape} vs {first}")
    n, m, channels = first
    shape = ModelShape(width=m, height=n, channels=channels)

    positive_mean = np.mean(tensors, axis=0)
    target = positive_mean - stats.mean[None, None, :]
    rhs = target.ravel()

    cov = reconstruct_covariance(stats, shape, max_bytes=config.max_covariance_bytes)
    side = cov.shape[0]
    mean_diag = float(np.trace(cov)) / side
    fallback = 1e-7 * mean_diag if mean_diag > 0 else 1e-12
    lam = config.initial_regularizer if config.initial_regularizer is not None else fallback

    solution = None
    escalations = 0
    while True:
        work = cov.copy()
        work.flat[::side + 1] += lam
        try:
            factor = scipy.linalg.cho_factor(work, lower=True, overwrite_a=True,
                                             check_finite=False)
            solution = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
            break
        except np.linalg.LinAlgError:
            pass
        except scipy.linalg.LinAlgError:
            pass
        if escalations >= config.max_escalations:
            raise CholeskyError(
                f"Cholesky factorization failed after {escalations} regularizer "
                f"escalations (final lambda {lam:.3e})")
        escalations += 1
        lam = lam * config.escalation_factor if lam > 0 else fallback

    norm_rhs = float(np.linalg.norm(rhs))
    residual = 0.0
    if norm_rhs > 0:
        residual = float(np.linalg.norm(cov @ solution + lam * solution - rhs)) / norm_rhs

    component = ModelComponent(shape=shape,
                               filter=solution.reshape(n, m, channels),
                               bias=0.0,
                               positive_mean=positive_mean)
    if return_info:
        return component, LdaSolveInfo(regularizer=lam, escalations=escalations,
                                       residual=residual)
    return component


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
            max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; points must be pre-sorted
    canonically for order-independent results."""
    n = points.shape[0]
    k = min(k, n)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    dist2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = dist2.sum()
        if total <= 0:
            centers[c:] = points[int(rng.integers(n))]
            break
        probs = dist2 / total
        centers[c] = points[int(rng.choice(n, p=probs))]
        dist2 = np.minimum(dist2, np.sum((points - centers[c]) ** 2, axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        for c in range(k):
            mask = new_labels == c
            if mask.any():
                centers[c] = points[mask].mean(axis=0)
            else:  # re-seed an empty cluster with the worst-fit point
                worst = int(np.argmax(d2[np.arange(n), new_labels]))
                centers[c] = points[worst]
                new_labels[worst] = c
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels


def _relabel_by_center(labels: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Renumber clusters by lexicographic order of their centers."""
    present = np.unique(labels)
    centers = np.stack([points[labels == c].mean(axis=0) for c in present])
    order = np.lexsort(centers.T[::-1])
    mapping = {int(present[old]): new for new, old in enumerate(order)}
    return np.array([mapping[int(l)] for l in labels], dtype=np.int64)


def cluster_samples(samples: Sequence[tuple[float, np.ndarray]],
                    n_aspect: int, n_feature: int,
                    seed: int = 0) -> np.ndarray:
    """Group samples by log aspect ratio, then by feature appearance.

    Returns an (n, 2) array of (aspect cluster, feature cluster) labels.
    Samples are canonically sorted before seeding, so the partition does not
    depend on input order; labels are renumbered by cluster center.
    """
    if n_aspect < 1 or n_feature < 1:
        raise ValidationError("cluster counts must be at least 1")
    if len(samples) < n_aspect * n_feature:
        raise ValidationError(
            f"{len(samples)} samples cannot fill {n_aspect * n_feature} clusters")
    aspects = np.array([float(a) for a, _ in samples])
    if (aspects <= 0).any() or not np.isfinite(aspects).all():
        raise ValidationError("aspect ratios must be positive and finite")
    vectors = np.stack([np.asarray(v, dtype=np.float64).ravel() for _, v in samples])

    canonical = np.lexsort(np.column_stack([aspects[:, None], vectors]).T[::-1])
    inverse = np.empty_like(canonical)
    inverse[canonical] = np.arange(len(canonical))

    rng = np.random.default_rng(seed)
    log_aspects = np.log(aspects[canonical])[:, None]
    aspect_sorted = (_relabel_by_center(_kmeans(log_aspects, n_aspect, rng), log_aspects)
                     if n_aspect > 1 else np.zeros(len(samples), dtype=np.int64))

    feature_sorted = np.zeros(len(samples), dtype=np.int64)
    if n_feature > 1:
        vec_sorted = vectors[canonical]
        for a in range(n_aspect):
            mask = aspect_sorted == a
            if mask.sum() == 0:
                continue
            group = vec_sorted[mask]
            labels = _kmeans(group, n_feature, np.random.default_rng(seed + a + 1))
            feature_sorted[mask] = _relabel_by_center(labels, group)

    out = np.column_stack([aspect_sorted, feature_sorted])
    return out[inverse]


def choose_model_size(boxes: Sequence[tuple[float, float]],
                      geometry: CellGeometry,
                      stats_radius: int = 19,
                      max_cells: int = 20) -> tuple[int, int]:
    """Pick (width, height) in cells from sample box sizes.

    Targets about 100 cells at 8 px cells, shrinking quadratically with the
    cell size, at the median aspect ratio of the samples.  Both dimensions
    clamp to [1, min(stats_radius + 1, max_cells)] so the model stays
    learnable with the available statistics.
    """
    if not boxes:
        raise ValidationError("need at least one sample box")
    widths = np.array([float(w) for w, _ in boxes])
    heights = np.array([float(h) for _, h in boxes])
    if (widths <= 0).any() or (heights <= 0).any():
        raise ValidationError("boxes must have positive width and height")
    aspect = float(np.median(heights / widths))
    target = 100.0 * (8.0 / geometry.cell_width) * (8.0 / geometry.cell_height)
    m = math.floor(math.sqrt(target / aspect) + 0.5)
    n = math.floor(m * aspect + 0.5)
    upper = max(1, min(stats_radius + 1, max_cells))
    clamp = lambda x: max(1, min(upper, x))
    return clamp(m), clamp(n)


def extract_positive(image: np.ndarray, box: tuple[float, float, float, float],
                     shape: ModelShape, pipeline: FeaturePipeline) -> np.ndarray:
    """Cut a training sample and render it into model feature space.

    The box (plus the pipeline's proportional border allowance) is cropped,
    resized to exactly (width * cell + 2 * border) pixels per axis and pushed
    through the pipeline.  The result must come out at exactly the model's
    cell grid; a mismatch raises with both shapes named.
    """
    import cv2

    geometry = pipeline.geometry()
    if geometry is None:
        raise ValidationError(
            "pipeline geometry is unknown; positives from precomputed features "
            "must be prepared as tensors directly")
    img = np.asarray(image)
    img_h, img_w = img.shape[:2]
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise ValidationError(f"degenerate box {box}")
    if x < -1e-6 or y < -1e-6 or x + w > img_w + 1e-6 or y + h > img_h + 1e-6:
        raise ValidationError(f"box {box} exceeds image {img_w}x{img_h}")

    target_w = shape.width * geometry.cell_width + 2 * geometry.border_x
    target_h = shape.height * geometry.cell_height + 2 * geometry.border_y
    margin_x = geometry.border_x * w / (shape.width * geometry.cell_width)
    margin_y = geometry.border_y * h / (shape.height * geometry.cell_height)

    x0 = math.floor(x - margin_x + 0.5)
    y0 = math.floor(y - margin_y + 0.5)
    x1 = max(x0 + 1, math.floor(x + w + margin_x + 0.5))
    y1 = max(y0 + 1, math.floor(y + h + margin_y + 0.5))

    pad_left = max(0, -x0)
    pad_top = max(0, -y0)
    pad_right = max(0, x1 - img_w)
    pad_bottom = max(0, y1 - img_h)
    if pad_left or pad_top or pad_right or pad_bottom:
        img = cv2.copyMakeBorder(img, pad_top, pad_bottom, pad_left, pad_right,
                                 cv2.BORDER_REPLICATE)
        x0 += pad_left
        x1 += pad_left
        y0 += pad_top
        y1 += pad_top
    patch = img[y0:y1, x0:x1]
    if patch.shape[1] != target_w or patch.shape[0] != target_h:
        patch = cv2.resize(patch, (target_w, target_h),
                           interpolation=cv2.INTER_LINEAR)

    fmap = pipeline.extract_map(patch)
    if (fmap.width, fmap.height) != (shape.width, shape.height):
        raise ValidationError(
            f"pipeline produced {fmap.width}x{fmap.height} cells, model "
            f"expects {shape.width}x{shape.height}")
    return np.asarray(fmap.data)

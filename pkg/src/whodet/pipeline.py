"""The feature pipeline a model carries: extractor, scaler, PCA, layer fusion.

Everything needed to reproduce detection-time features is bundled here so a
stored model can rebuild its exact feature space from raw inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .featmap import (CellGeometry, FeatureExtractorConfig, FeatureMap,
                      FeaturePyramid, build_pyramid, extract_hog)
from .transform import (ChannelScaler, PcaTransform, apply_pca, apply_scaler,
                        combine_layers)


@dataclass(frozen=True)
class FeaturePipeline:
    """Feature extraction plus post-processing, applied in a fixed order.

    Order is: extract (per layer), fuse layers if configured, scale channels,
    project with PCA.  ``combined_layers`` > 1 means detection input is one
    precomputed manifest per layer, fused level by level.
    """

    extractor: FeatureExtractorConfig = FeatureExtractorConfig()
    scaler: ChannelScaler | None = None
    pca: PcaTransform | None = None
    combined_layers: int = 1

    def __post_init__(self):
        if self.combined_layers < 1:
            raise ValidationError("combined_layers must be at least 1")
        if self.combined_layers > 1 and self.extractor.kind != "precomputed":
            raise ValidationError("layer fusion requires precomputed input")

    def output_channels(self) -> int | None:
        if self.pca is not None:
            return self.pca.output_dim
        if self.scaler is not None:
            return self.scaler.channels
        if self.combined_layers > 1:
            return None  # sum over layer files, known only at read time
        return self.extractor.output_channels()

    def geometry(self) -> CellGeometry | None:
        """Cell geometry of produced maps, when known without reading files."""
        if self.extractor.kind == "hog":
            cell = self.extractor.hog_cell_size
            return CellGeometry(cell_width=cell, cell_height=cell)
        return None

    def transform_map(self, fmap: FeatureMap) -> FeatureMap:
        if self.scaler is not None:
            fmap = apply_scaler(fmap, self.scaler)
        if self.pca is not None:
            fmap = apply_pca(fmap, self.pca)
        return fmap

    def extract_map(self, image: np.ndarray, scale: float = 1.0) -> FeatureMap:
        """Extract and post-process features from a raw image patch."""
        if self.extractor.kind != "hog":
            raise ValidationError(
                "this pipeline reads precomputed feature files and cannot "
                "extract features from raw images")
        fmap = extract_hog(image, cell_size=self.extractor.hog_cell_size, scale=scale)
        return self.transform_map(fmap)

    def build_pyramid(self, source, intervals_per_octave: int = 5,
                      min_level_cells: int = 4) -> FeaturePyramid:
        """Build the detection pyramid from an image or manifest path(s)."""
        if self.combined_layers > 1:
            if not isinstance(source, (list, tuple)) or len(source) != self.combined_layers:
                raise ValidationError(
                    f"this pipeline fuses {self.combined_layers} layers and needs "
                    f"that many manifest paths")
            per_layer = [build_pyramid(path, self.extractor, intervals_per_octave,
                                       min_level_cells)
                         for path in source]
            counts = {len(p.levels) for p in per_layer}
            if len(counts) != 1:
                raise ValidationError(
                    f"layer manifests disagree on level count: {sorted(counts)}")
            fused = [combine_layers([p.levels[i] for p in per_layer])
                     for i in range(counts.pop())]
            pyramid = FeaturePyramid(levels=tuple(fused),
                                     intervals_per_octave=intervals_per_octave,
                                     image_size=per_layer[0].image_size)
        else:
            pyramid = build_pyramid(source, self.extractor, intervals_per_octave,
                                    min_level_cells)
        levels = tuple(self.transform_map(m) for m in pyramid.levels)
        return FeaturePyramid(levels=levels,
                              intervals_per_octave=pyramid.intervals_per_octave,
                              image_size=pyramid.image_size)

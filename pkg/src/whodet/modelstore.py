"""Model persistence: JSON metadata with base64 float32 payloads.

A model file carries the complete feature-pipeline configuration next to the
learned components, so detection can rebuild the exact feature space without
external knowledge.  See docs/model-format.md for the field-by-field schema.
"""

from __future__ import annotations

import base64
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_text
from .errors import FormatError, ValidationError
from .featmap import FeatureExtractorConfig
from .learner import ModelComponent, ModelShape
from .pipeline import FeaturePipeline
from .transform import ChannelScaler, PcaTransform, load_scaler

MAGIC_KEY = "whodet-model"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class DetectorModel:
    """A named mixture of linear components plus their feature pipeline."""

    class_name: str
    pipeline: FeaturePipeline
    components: tuple[ModelComponent, ...]
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        components = tuple(self.components)
        if not components:
            raise ValidationError("model needs at least one component")
        expected = self.pipeline.output_channels()
        for idx, comp in enumerate(components):
            if expected is not None and comp.shape.channels != expected:
                raise ValidationError(
                    f"component {idx} has {comp.shape.channels} channels, "
                    f"pipeline produces {expected}")
            if comp.shape.channels != components[0].shape.channels:
                raise ValidationError(
                    f"component {idx} channel count differs from component 0")
        object.__setattr__(self, "components", components)

    def thresholds(self) -> list[float]:
        return [c.bias for c in self.components]


def _encode(arr: np.ndarray | None) -> str | None:
    if arr is None:
        return None
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _decode(text: str, count: int, what: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as exc:
        raise FormatError(f"{what}: invalid base64 payload: {exc}") from exc
    values = np.frombuffer(raw, dtype="<f4")
    if values.size != count:
        raise FormatError(f"{what}: payload holds {values.size} values, expected {count}")
    if not np.isfinite(values).all():
        raise FormatError(f"{what}: payload contains non-finite values")
    return values


def _extractor_doc(cfg: FeatureExtractorConfig) -> dict:
    return {"kind": cfg.kind, "hogCellSize": cfg.hog_cell_size,
            "manifestPath": cfg.manifest_path,
            "maxImageDimension": cfg.max_image_dimension,
            "channels": cfg.channels}


def _extractor_from_doc(doc: dict) -> FeatureExtractorConfig:
    return FeatureExtractorConfig(
        kind=doc.get("kind", "hog"),
        hog_cell_size=int(doc.get("hogCellSize", 8)),
        manifest_path=doc.get("manifestPath"),
        max_image_dimension=int(doc.get("maxImageDimension", 1024)),
        channels=doc.get("channels"))


def save_model(model: DetectorModel, path: str | os.PathLike) -> None:
    """Validate and write a model file; loading it reproduces the model with
    bit-exact filter values.  Scalers referenced from a text file are written
    inline, which is the canonical form."""
    pipe = model.pipeline
    doc = {
        "magic": MAGIC_KEY,
        "formatVersion": model.format_version,
        "class": model.class_name,
        "pipeline": {
            "extractor": _extractor_doc(pipe.extractor),
            "scaler": ({"maxAbs": pipe.scaler.max_abs.tolist()}
                       if pipe.scaler is not None else None),
            "pca": ({"k": pipe.pca.output_dim, "F": pipe.pca.input_channels,
                     "mean": _encode(pipe.pca.mean),
                     "basis": _encode(pipe.pca.basis)}
                    if pipe.pca is not None else None),
            "combinedLayers": pipe.combined_layers,
        },
        "components": [
            {"width": c.shape.width, "height": c.shape.height,
             "channels": c.shape.channels, "bias": c.bias,
             "filter": _encode(c.filter),
             "positiveMean": _encode(c.positive_mean)}
            for c in model.components
        ],
    }
    atomic_write_text(path, json.dumps(doc, indent=1))


def load_model(path: str | os.PathLike) -> DetectorModel:
    """Read and validate a model file; every violation is named distinctly."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if doc.get("magic") != MAGIC_KEY:
        raise FormatError(f"{path}: magic key is {doc.get('magic')!r}, "
                          f"expected {MAGIC_KEY!r}")
    version = doc.get("formatVersion")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unknown formatVersion {version!r}, "
                          f"this build reads version {FORMAT_VERSION}")
    if not isinstance(doc.get("class"), str):
        raise FormatError(f"{path}: field 'class' must be a string")

    pipe_doc = doc.get("pipeline")
    if not isinstance(pipe_doc, dict) or "extractor" not in pipe_doc:
        raise FormatError(f"{path}: field 'pipeline.extractor' is required")
    try:
        extractor = _extractor_from_doc(pipe_doc["extractor"])
    except (ValidationError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid extractor config: {exc}") from exc

    scaler = None
    scaler_doc = pipe_doc.get("scaler")
    if scaler_doc is not None:
        if "maxAbs" in scaler_doc:
            values = np.asarray(scaler_doc["maxAbs"], dtype=np.float64)
        elif "file" in scaler_doc:
            ref = scaler_doc["file"]
            if not os.path.isabs(ref):
                ref = os.path.join(os.path.dirname(os.fspath(path)), ref)
            values = load_scaler(ref).max_abs
        else:
            raise FormatError(f"{path}: scaler needs 'maxAbs' or 'file'")
        try:
            scaler = ChannelScaler(max_abs=values)
        except ValidationError as exc:
            raise FormatError(f"{path}: invalid scaler: {exc}") from exc

    pca = None
    pca_doc = pipe_doc.get("pca")
    if pca_doc is not None:
        for key in ("k", "F", "mean", "basis"):
            if key not in pca_doc:
                raise FormatError(f"{path}: pca is missing field {key!r}")
        k, channels = int(pca_doc["k"]), int(pca_doc["F"])
        mean = _decode(pca_doc["mean"], channels, f"{path}: pca.mean")
        basis = _decode(pca_doc["basis"], k * channels, f"{path}: pca.basis")
        try:
            pca = PcaTransform(mean=mean, basis=basis.reshape(k, channels))
        except ValidationError as exc:
            raise FormatError(f"{path}: invalid pca: {exc}") from exc

    try:
        pipeline = FeaturePipeline(extractor=extractor, scaler=scaler, pca=pca,
                                   combined_layers=int(pipe_doc.get("combinedLayers", 1)))
    except ValidationError as exc:
        raise FormatError(f"{path}: invalid pipeline: {exc}") from exc

    comp_docs = doc.get("components")
    if not isinstance(comp_docs, list) or not comp_docs:
        raise FormatError(f"{path}: field 'components' must be a non-empty list")
    components = []
    for idx, cd in enumerate(comp_docs):
        where = f"{path}: component {idx}"
        for key in ("width", "height", "channels", "bias", "filter"):
            if key not in cd:
                raise FormatError(f"{where} is missing field {key!r}")
        m, n, channels = int(cd["width"]), int(cd["height"]), int(cd["channels"])
        bias = float(cd["bias"])
        if not math.isfinite(bias):
            raise FormatError(f"{where}: bias is not finite")
        filt = _decode(cd["filter"], m * n * channels, f"{where}: filter")
        positive = cd.get("positiveMean")
        pos_arr = (_decode(positive, m * n * channels, f"{where}: positiveMean")
                   .reshape(n, m, channels) if positive is not None else None)
        try:
            shape = ModelShape(width=m, height=n, channels=channels)
            components.append(ModelComponent(shape=shape,
                                             filter=filt.reshape(n, m, channels),
                                             bias=bias, positive_mean=pos_arr))
        except ValidationError as exc:
            raise FormatError(f"{where}: {exc}") from exc

    try:
        return DetectorModel(class_name=doc["class"], pipeline=pipeline,
                             components=tuple(components), format_version=version)
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc

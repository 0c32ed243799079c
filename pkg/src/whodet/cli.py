"""Command-line front end for the learning, detection and evaluation pipeline.

Subcommands mirror the pre-learning and learning procedure: channel maxima,
PCA and background statistics are learned once per feature space, then models
are trained from positive samples, run over images, thresholded, evaluated
and diagnosed.  Ordering is enforced by file dependencies, not hidden state.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import cv2
import numpy as np

from ._io import atomic_write_text
from .bgstats import StatsAccumulator, load_stats, save_stats
from .detector import NmsConfig, detect, nms
from .errors import FormatError, PipelineMismatchError, ValidationError, WhodetError
from .evalkit import (DetectionRecord, GroundTruth, evaluate_class,
                      fp_distribution, impact_analysis)
from .featmap import FeatureExtractorConfig, build_pyramid
from .learner import (LearnerConfig, ModelShape, choose_model_size,
                      cluster_samples, estimate_covariance_bytes,
                      extract_positive, learn_exemplar_lda,
                      reconstruct_covariance)
from .modelstore import DetectorModel, load_model, save_model
from .pipeline import FeaturePipeline
from .synth import generate_corpus
from .transform import (ChannelMaxAccumulator, PcaAccumulator, load_pca,
                        load_scaler, save_pca, save_scaler)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def _parse_pair(text: str, what: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except Exception:
        raise ValidationError(f"{what} must look like '5x4', got {text!r}") from None


def _collect_inputs(paths: list[str]) -> list[str]:
    """Expand directories and .txt list files into a sorted input list."""
    out = []
    for path in paths:
        if os.path.isdir(path):
            names = sorted(os.listdir(path))
            out.extend(os.path.join(path, n) for n in names
                       if n.lower().endswith(IMAGE_EXTENSIONS + (".json",)))
        elif path.lower().endswith(".txt"):
            root = os.path.dirname(path)
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        out.append(line if os.path.isabs(line)
                                   else os.path.join(root, line))
        else:
            out.append(path)
    if not out:
        raise ValidationError("no input files found")
    return out


def _read_image(path: str) -> np.ndarray:
    img = cv2.imread(path, cv2.IMREAD_COLOR)
    if img is None:
        raise ValidationError(f"cannot read image {path!r}")
    return img


def _pyramid_source(path: str, pipeline: FeaturePipeline):
    """Resolve one CLI input for the given pipeline, rejecting mismatches."""
    is_json = path.lower().endswith(".json")
    if pipeline.extractor.kind == "hog":
        if is_json:
            raise PipelineMismatchError(
                f"model pipeline extracts HOG from raw images, but {path!r} "
                f"is a feature manifest")
        return _read_image(path)
    if not is_json:
        raise PipelineMismatchError(
            f"model pipeline reads precomputed feature manifests, but "
            f"{path!r} is a raw image")
    if pipeline.combined_layers > 1:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        layers = doc.get("layers")
        if not isinstance(layers, list):
            raise ValidationError(
                f"{path}: fused-layer input needs a JSON object with a "
                f"'layers' list of manifest paths")
        root = os.path.dirname(path)
        return [p if os.path.isabs(p) else os.path.join(root, p) for p in layers]
    return path


def _map_pyramids(inputs, pipeline, intervals, min_cells, jobs):
    """Yield (input path, pyramid) in input order, optionally in parallel."""
    def build(path):
        return pipeline.build_pyramid(_pyramid_source(path, pipeline),
                                      intervals_per_octave=intervals,
                                      min_level_cells=min_cells)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            yield from zip(inputs, pool.map(build, inputs))
    else:
        for path in inputs:
            yield path, build(path)


def _pipeline_from_args(args) -> FeaturePipeline:
    extractor = FeatureExtractorConfig(
        kind="hog", hog_cell_size=args.cell_size,
        max_image_dimension=args.max_dim)
    scaler = load_scaler(args.scaler) if getattr(args, "scaler", None) else None
    pca = load_pca(args.pca) if getattr(args, "pca", None) else None
    return FeaturePipeline(extractor=extractor, scaler=scaler, pca=pca)


def _read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{ln}: invalid JSON: {exc}") from exc
    return rows


def _load_gt(path: str) -> list[GroundTruth]:
    gts = []
    for row in _read_jsonl(path):
        gts.append(GroundTruth(image=row["image"], class_label=row["class"],
                               box=tuple(float(v) for v in row["box"]),
                               difficult=bool(row.get("difficult", False))))
    return gts


def _load_detections(path: str) -> list[DetectionRecord]:
    dets = []
    for row in _read_jsonl(path):
        dets.append(DetectionRecord(image=row["image"], score=float(row["score"]),
                                    box=tuple(float(v) for v in row["box"]),
                                    class_label=row.get("class"),
                                    component=int(row.get("component", 0))))
    return dets


# ---------------------------------------------------------------- commands


def _cmd_learn_maxima(args) -> int:
    config = FeatureExtractorConfig(kind="hog", hog_cell_size=args.cell_size,
                                    max_image_dimension=args.max_dim)
    pipeline = FeaturePipeline(extractor=config)
    acc = ChannelMaxAccumulator()
    for _, pyramid in _map_pyramids(_collect_inputs(args.inputs), pipeline,
                                    args.intervals, args.min_cells, args.jobs):
        for level in pyramid.levels:
            acc.update(level)
    save_scaler(acc.result(), args.out)
    print(f"wrote channel maxima for {acc.result().channels} channels to {args.out}")
    return 0


def _cmd_learn_pca(args) -> int:
    pipeline = FeaturePipeline(
        extractor=FeatureExtractorConfig(kind="hog", hog_cell_size=args.cell_size,
                                         max_image_dimension=args.max_dim),
        scaler=load_scaler(args.scaler))
    acc = None
    rng = np.random.default_rng(args.seed)
    for _, pyramid in _map_pyramids(_collect_inputs(args.inputs), pipeline,
                                    args.intervals, args.min_cells, args.jobs):
        for level in pyramid.levels:
            cells = np.asarray(level.data, dtype=np.float64).reshape(-1, level.channels)
            if acc is None:
                acc = PcaAccumulator(level.channels)
            if cells.shape[0] > args.max_cells_per_image:
                keep = rng.choice(cells.shape[0], args.max_cells_per_image,
                                  replace=False)
                cells = cells[np.sort(keep)]
            acc.update(cells)
    if acc is None:
        raise ValidationError("no feature cells were collected")
    save_pca(acc.result(args.dim), args.out)
    print(f"wrote PCA ({acc.channels} -> {args.dim}) to {args.out}")
    return 0


def _cmd_learn_stats(args) -> int:
    pipeline = _pipeline_from_args(args)
    acc = None
    count = 0
    for _, pyramid in _map_pyramids(_collect_inputs(args.inputs), pipeline,
                                    args.intervals, args.min_cells, args.jobs):
        if acc is None:
            acc = StatsAccumulator(args.radius, pyramid.channels)
        acc.add_pyramid(pyramid)
        count += 1
        if args.compact_every and count % args.compact_every == 0:
            acc.compact()
    if acc is None:
        raise ValidationError("no pyramids were accumulated")
    stats = acc.result()
    save_stats(stats, args.out)
    print(f"wrote statistics (radius {stats.radius}, {stats.channels} channels, "
          f"{stats.cell_count} cells from {count} images) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    pipeline = _pipeline_from_args(args)
    stats = load_stats(args.stats)
    geometry = pipeline.geometry()
    rows = _read_jsonl(args.samples)
    if not rows:
        raise ValidationError(f"{args.samples}: no training samples")
    root = os.path.dirname(os.path.abspath(args.samples))
    boxes = []
    images = []
    for row in rows:
        path = row["image"]
        images.append(path if os.path.isabs(path) else os.path.join(root, path))
        boxes.append(tuple(float(v) for v in row["box"]))

    n_aspect, n_feature = _parse_pair(args.clusters, "--clusters")
    config = LearnerConfig(n_aspect_clusters=n_aspect, n_feature_clusters=n_feature,
                           initial_regularizer=args.regularizer)
    forced_size = _parse_pair(args.size, "--size") if args.size else None

    if n_aspect * n_feature > 1:
        assignments = _cluster_for_train(images, boxes, stats, pipeline,
                                         geometry, config, forced_size, args.seed)
    else:
        assignments = np.zeros((len(rows), 2), dtype=np.int64)

    components = []
    for a in range(n_aspect):
        for f in range(n_feature):
            mask = (assignments[:, 0] == a) & (assignments[:, 1] == f)
            idx = np.nonzero(mask)[0]
            if idx.size == 0:
                continue
            group_boxes = [(boxes[i][2], boxes[i][3]) for i in idx]
            size = forced_size or choose_model_size(group_boxes, geometry,
                                                    stats_radius=stats.radius)
            shape = ModelShape(width=size[0], height=size[1],
                               channels=stats.channels)
            positives = [extract_positive(_read_image(images[i]), boxes[i],
                                          shape, pipeline) for i in idx]
            component, info = learn_exemplar_lda(positives, stats, config,
                                                 return_info=True)
            print(f"component {len(components)}: {size[0]}x{size[1]} cells "
                  f"from {idx.size} samples (regularizer {info.regularizer:.3e}, "
                  f"{info.escalations} escalations)")
            components.append(component)

    model = DetectorModel(class_name=args.class_name, pipeline=pipeline,
                          components=tuple(components))
    save_model(model, args.out)
    print(f"wrote model with {len(components)} component(s) to {args.out}")
    return 0


def _cluster_for_train(images, boxes, stats, pipeline, geometry, config,
                       forced_size, seed) -> np.ndarray:
    """Whiten all samples at a common shape, then cluster."""
    common = forced_size or choose_model_size([(b[2], b[3]) for b in boxes],
                                              geometry, stats_radius=stats.radius)
    shape = ModelShape(width=common[0], height=common[1], channels=stats.channels)
    cov = reconstruct_covariance(stats, shape, max_bytes=config.max_covariance_bytes)
    side = cov.shape[0]
    lam = (config.initial_regularizer if config.initial_regularizer is not None
           else 1e-7 * float(np.trace(cov)) / side)
    cov.flat[::side + 1] += lam
    import scipy.linalg
    factor = scipy.linalg.cho_factor(cov, lower=True, overwrite_a=True,
                                     check_finite=False)
    samples = []
    tiled = stats.mean[None, None, :]
    for img_path, box in zip(images, boxes):
        tensor = extract_positive(_read_image(img_path), box, shape, pipeline)
        whitened = scipy.linalg.cho_solve(
            factor, (np.asarray(tensor, dtype=np.float64) - tiled).ravel(),
            check_finite=False)
        samples.append((box[3] / box[2], whitened))
    return cluster_samples(samples, config.n_aspect_clusters,
                           config.n_feature_clusters, seed=seed)


def _cmd_detect(args) -> int:
    model = load_model(args.model)
    nms_config = None
    if not args.raw:
        nested = args.nested_threshold
        nms_config = NmsConfig(overlap_threshold=args.nms_threshold,
                               nested_containment_threshold=nested)
    lines = []
    total = 0
    for path, pyramid in _map_pyramids(_collect_inputs(args.inputs),
                                       model.pipeline, args.intervals,
                                       args.min_cells, args.jobs):
        detections = detect(pyramid, model.components,
                            thresholds=args.threshold,
                            expected_geometry=model.pipeline.geometry())
        if nms_config is not None:
            detections = nms(detections, nms_config)
        name = os.path.relpath(path, args.image_root) if args.image_root else path
        for d in detections:
            lines.append(json.dumps({
                "image": name, "component": d.component_index,
                "score": d.score, "box": list(d.box), "class": model.class_name,
            }))
        total += len(detections)
    atomic_write_text(args.out, "".join(line + "\n" for line in lines))
    print(f"wrote {total} detections to {args.out}")
    return 0


def _cmd_optimize_threshold(args) -> int:
    model = load_model(args.model)
    dets = _load_detections(args.detections)
    gts = _load_gt(args.gt)
    new_components = []
    for ci, comp in enumerate(model.components):
        own = [d for d in dets if d.component == ci]
        report = evaluate_class(own, gts, model.class_name, args.iou)
        if math.isnan(report.best_threshold):
            print(f"component {ci}: no positive F1 point, threshold unchanged")
            new_components.append(comp)
            continue
        # Detection scores were already bias-relative, so fold the new
        # threshold into the stored bias.
        shifted = type(comp)(shape=comp.shape, filter=comp.filter,
                             bias=comp.bias + report.best_threshold,
                             positive_mean=comp.positive_mean)
        print(f"component {ci}: best F1 {report.best_f1:.3f} at score "
              f"{report.best_threshold:.4f}; bias -> {shifted.bias:.4f}")
        new_components.append(shifted)
    updated = DetectorModel(class_name=model.class_name, pipeline=model.pipeline,
                            components=tuple(new_components))
    save_model(updated, args.out)
    print(f"wrote updated model to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    dets = _load_detections(args.detections)
    gts = _load_gt(args.gt)
    class_label = args.class_name or _single_class(dets)
    report = evaluate_class(dets, gts, class_label, args.iou)
    doc = {
        "class": class_label, "iouThreshold": args.iou, "ap": report.ap,
        "bestF1": report.best_f1,
        "bestThreshold": None if math.isnan(report.best_threshold)
                         else report.best_threshold,
        "counts": {"tp": report.counts.tp, "fp": report.counts.fp,
                   "fn": report.counts.fn},
        "degenerate": report.degenerate,
    }
    atomic_write_text(args.out, json.dumps(doc, indent=1))
    if args.pr_csv:
        rows = ["recall,precision"]
        rows += [f"{r!r},{p!r}" for r, p in report.pr_points]
        atomic_write_text(args.pr_csv, "".join(r + "\n" for r in rows))
    print(f"class {class_label}: AP {report.ap:.4f}, best F1 {report.best_f1:.4f} "
          f"(tp {report.counts.tp}, fp {report.counts.fp}, fn {report.counts.fn})")
    return 0


def _single_class(dets) -> str:
    classes = {d.class_label for d in dets if d.class_label}
    if len(classes) != 1:
        raise ValidationError(
            f"cannot infer the class from detections ({sorted(classes)}); "
            f"pass --class")
    return classes.pop()


def _cmd_diagnose(args) -> int:
    dets = _load_detections(args.detections)
    gts = _load_gt(args.gt)
    class_label = args.class_name or _single_class(dets)
    similarity = {}
    if args.similar:
        with open(args.similar, "r", encoding="utf-8") as fh:
            similarity = json.load(fh)

    dist = fp_distribution(dets, gts, class_label, similarity)
    impact = impact_analysis(dets, gts, class_label, similarity)
    if dist is None:
        raise ValidationError(f"class {class_label!r} has no ground truth objects")

    rows = ["nstar,tp,localization,similar_category,other_category,background,"
            "recall_strict,recall_relaxed"]
    for i, point in enumerate(dist.grid):
        frac = dist.fractions[i]
        rows.append(",".join(repr(v) for v in
                             (point, *frac.tolist(),
                              dist.recall_strict[i], dist.recall_relaxed[i])))
    atomic_write_text(args.out_prefix + "_fpdist.csv",
                      "".join(r + "\n" for r in rows))

    rows = ["type,removed_ap,removed_delta,corrected_ap,corrected_delta"]
    for name, entry in impact["types"].items():
        rows.append(",".join([name, repr(entry["removed_ap"]),
                              repr(entry["removed_delta"]),
                              repr(entry.get("corrected_ap", "")),
                              repr(entry.get("corrected_delta", ""))]))
    atomic_write_text(args.out_prefix + "_impact.csv",
                      "".join(r + "\n" for r in rows))

    doc = {"class": class_label, "baselineAp": impact["baseline_ap"],
           "impact": impact["types"],
           "distribution": {"grid": list(dist.grid),
                            "fractions": dist.fractions.tolist(),
                            "recallStrict": list(dist.recall_strict),
                            "recallRelaxed": list(dist.recall_relaxed),
                            "totalGt": dist.total_gt}}
    atomic_write_text(args.out_prefix + "_diagnosis.json", json.dumps(doc, indent=1))
    print(f"baseline AP {impact['baseline_ap']:.4f}; wrote "
          f"{args.out_prefix}_fpdist.csv, _impact.csv, _diagnosis.json")
    return 0


def _cmd_estimate_memory(args) -> int:
    m, n = _parse_pair(args.cells, "--cells")
    shape = ModelShape(width=m, height=n, channels=args.channels)
    size = estimate_covariance_bytes(shape)
    print(f"{size} bytes ({size / 2 ** 30:.2f} GiB, {size / 1e9:.2f} GB) "
          f"for a {m}x{n} cell model with {args.channels} channels")
    return 0


def _cmd_synth(args) -> int:
    cells = _parse_pair(args.pattern_cells, "--pattern-cells")
    corpus = generate_corpus(args.out, n_train=args.train, n_test=args.test,
                             n_background=args.background, seed=args.seed,
                             image_size=args.image_size, pattern_cells=cells,
                             cell_size=args.cell_size)
    print(f"wrote corpus to {corpus.root} (train {args.train}, test {args.test}, "
          f"background {args.background})")
    return 0


def _cmd_info(args) -> int:
    model = load_model(args.model)
    pipe = model.pipeline
    print(f"class: {model.class_name}")
    print(f"format version: {model.format_version}")
    print(f"extractor: {pipe.extractor.kind} "
          f"(cell {pipe.extractor.hog_cell_size}px, "
          f"max dimension {pipe.extractor.max_image_dimension}px)")
    print(f"scaler: {'yes, %d channels' % pipe.scaler.channels if pipe.scaler else 'none'}")
    print(f"pca: {('yes, %d -> %d' % (pipe.pca.input_channels, pipe.pca.output_dim)) if pipe.pca else 'none'}")
    for i, comp in enumerate(model.components):
        print(f"component {i}: {comp.shape.width}x{comp.shape.height} cells, "
              f"{comp.shape.channels} channels, threshold {comp.bias:.4f}")
    return 0


# ------------------------------------------------------------------ parser


def _add_pyramid_flags(p, with_scaler=True, with_pca=True):
    p.add_argument("--cell-size", type=int, default=8, help="HOG cell size in pixels")
    p.add_argument("--intervals", type=int, default=5,
                   help="pyramid levels per octave")
    p.add_argument("--min-cells", type=int, default=4,
                   help="stop the pyramid below this many cells")
    p.add_argument("--max-dim", type=int, default=1024,
                   help="downscale images larger than this")
    if with_scaler:
        p.add_argument("--scaler", help="channel maxima text file")
    if with_pca:
        p.add_argument("--pca", help="PCA JSON file")


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("WHODET_JOBS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="whodet",
        description="Linear object detection with whitened features.")
    parser.add_argument("--jobs", type=int, default=_default_jobs(),
                        help="parallel workers (default from WHODET_JOBS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn-maxima", help="learn per-channel maxima")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    _add_pyramid_flags(p, with_scaler=False, with_pca=False)
    p.set_defaults(func=_cmd_learn_maxima)

    p = sub.add_parser("learn-pca", help="learn a PCA projection on scaled features")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--scaler", required=True,
                   help="channel maxima file (learn-maxima output)")
    p.add_argument("--dim", type=int, required=True, help="output dimensions")
    p.add_argument("--max-cells-per-image", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    _add_pyramid_flags(p, with_scaler=False, with_pca=False)
    p.set_defaults(func=_cmd_learn_pca)

    p = sub.add_parser("learn-stats", help="learn background statistics")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=int, default=19,
                   help="autocorrelation radius in cells")
    p.add_argument("--compact-every", type=int, default=16,
                   help="collapse the accumulator every N images (0 keeps all)")
    _add_pyramid_flags(p)
    p.set_defaults(func=_cmd_learn_stats)

    p = sub.add_parser("train", help="learn a detector from positive samples")
    p.add_argument("--samples", required=True,
                   help='JSONL lines {"image": path, "box": [x, y, w, h]}')
    p.add_argument("--stats", required=True, help="background statistics file")
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", help="model size in cells, e.g. 5x4 (default: auto)")
    p.add_argument("--clusters", default="1x1",
                   help="aspect x feature clusters, e.g. 2x3")
    p.add_argument("--regularizer", type=float, default=None,
                   help="initial Cholesky regularizer (default adaptive)")
    p.add_argument("--seed", type=int, default=0)
    _add_pyramid_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("detect", help="run a model over images or manifests")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None,
                   help="score threshold (default 0 relative to stored bias)")
    p.add_argument("--nms-threshold", type=float, default=0.4)
    p.add_argument("--nested-threshold", type=float, default=None,
                   help="containment fraction for nested-box pruning")
    p.add_argument("--raw", action="store_true", help="skip NMS")
    p.add_argument("--image-root", default=None,
                   help="report image paths relative to this directory")
    p.add_argument("--intervals", type=int, default=5)
    p.add_argument("--min-cells", type=int, default=4)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("optimize-threshold",
                       help="set per-component thresholds maximizing F1")
    p.add_argument("--model", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=_cmd_optimize_threshold)

    p = sub.add_parser("evaluate", help="precision/recall/F1/AP for detections")
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--class", dest="class_name", default=None)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--pr-csv", default=None, help="PR curve CSV")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("diagnose",
                       help="false-positive type distribution and AP impact")
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--class", dest="class_name", default=None)
    p.add_argument("--similar", default=None,
                   help="JSON map class -> list of similar classes")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=_cmd_diagnose)

    p = sub.add_parser("estimate-memory",
                       help="covariance memory for a model size")
    p.add_argument("--cells", required=True, help="model size, e.g. 12x12")
    p.add_argument("--channels", type=int, required=True)
    p.set_defaults(func=_cmd_estimate_memory)

    p = sub.add_parser("synth", help="generate a synthetic detection corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=50)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--background", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--pattern-cells", default="5x4")
    p.add_argument("--cell-size", type=int, default=8)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("info", help="summarize a model file")
    p.add_argument("--model", required=True)
    p.set_defaults(func=_cmd_info)

    return parser


def run(argv=None) -> int:
    """Parse arguments and dispatch; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (ValidationError, FormatError, PipelineMismatchError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except WhodetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

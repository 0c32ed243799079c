"""Seeded synthetic detection corpora for tests and demos.

Scenes are textured gray backgrounds with low-contrast rectangular
distractors; the target is a high-contrast diagonally striped patch with a
bright frame, planted at a random position with mild contrast jitter.  All
randomness flows from one seed, so corpora are reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import cv2
import numpy as np

from ._io import atomic_write_text

CLASS_NAME = "target"


def pattern_patch(width: int, height: int) -> np.ndarray:
    """The canonical target: 45-degree stripes inside a bright frame."""
    ys, xs = np.mgrid[0:height, 0:width]
    stripes = (((xs + ys) // 4) % 2) * 255.0
    patch = stripes
    frame = 2
    patch[:frame, :] = 230.0
    patch[-frame:, :] = 230.0
    patch[:, :frame] = 230.0
    patch[:, -frame:] = 230.0
    return patch


def _background(rng: np.random.Generator, size: int, distractors: int = 4) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, (size // 4 + 1, size // 4 + 1))
    noise = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_LINEAR)
    img = 128.0 + 18.0 * noise
    for _ in range(distractors):
        w = int(rng.integers(16, 56))
        h = int(rng.integers(16, 56))
        x = int(rng.integers(0, size - w))
        y = int(rng.integers(0, size - h))
        img[y:y + h, x:x + w] = float(rng.uniform(90, 170))
    return img


def render_scene(rng: np.random.Generator, image_size: int,
                 pattern_size: tuple[int, int], plant: bool = True,
                 snap: int | None = None):
    """One scene; returns (uint8 image HxWx3, planted box or None)."""
    pw, ph = pattern_size
    img = _background(rng, image_size)
    box = None
    if plant:
        margin = 8
        x = int(rng.integers(margin, image_size - pw - margin))
        y = int(rng.integers(margin, image_size - ph - margin))
        if snap:
            x -= x % snap
            y -= y % snap
        contrast = float(rng.uniform(0.75, 1.0))
        patch = 128.0 + (pattern_patch(pw, ph) - 128.0) * contrast
        img[y:y + ph, x:x + pw] = patch
        box = (float(x), float(y), float(pw), float(ph))
    img = img + rng.normal(0.0, 2.0, img.shape)
    img = np.clip(img, 0, 255).astype(np.uint8)
    return np.repeat(img[:, :, None], 3, axis=2), box


@dataclass(frozen=True)
class SynthCorpus:
    root: str
    background_images: list[str]
    train_samples: str  # jsonl: {"image", "box"}
    test_gt: str        # jsonl: {"image", "class", "box", "difficult"}
    test_images: list[str]
    meta: str


def generate_corpus(out_dir: str | os.PathLike,
                    n_train: int = 50, n_test: int = 50, n_background: int = 20,
                    seed: int = 0, image_size: int = 256,
                    pattern_cells: tuple[int, int] = (5, 4),
                    cell_size: int = 8) -> SynthCorpus:
    """Write a train/test/background corpus under ``out_dir``."""
    out = os.fspath(out_dir)
    for sub in ("background", "train", "test"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    rng = np.random.default_rng(seed)
    pattern_size = (pattern_cells[0] * cell_size, pattern_cells[1] * cell_size)

    backgrounds = []
    for i in range(n_background):
        img, _ = render_scene(rng, image_size, pattern_size, plant=False)
        rel = os.path.join("background", f"bg_{i:03d}.png")
        cv2.imwrite(os.path.join(out, rel), img)
        backgrounds.append(rel)

    train_lines = []
    for i in range(n_train):
        img, box = render_scene(rng, image_size, pattern_size, snap=cell_size)
        rel = os.path.join("train", f"train_{i:03d}.png")
        cv2.imwrite(os.path.join(out, rel), img)
        train_lines.append(json.dumps({"image": rel, "box": list(box)}))
    train_path = os.path.join(out, "train.jsonl")
    atomic_write_text(train_path, "".join(line + "\n" for line in train_lines))

    test_lines = []
    test_images = []
    for i in range(n_test):
        img, box = render_scene(rng, image_size, pattern_size)
        rel = os.path.join("test", f"test_{i:03d}.png")
        cv2.imwrite(os.path.join(out, rel), img)
        test_images.append(rel)
        test_lines.append(json.dumps({"image": rel, "class": CLASS_NAME,
                                      "box": list(box), "difficult": False}))
    gt_path = os.path.join(out, "test.jsonl")
    atomic_write_text(gt_path, "".join(line + "\n" for line in test_lines))

    meta_path = os.path.join(out, "meta.json")
    atomic_write_text(meta_path, json.dumps({
        "class": CLASS_NAME, "seed": seed, "imageSize": image_size,
        "patternCells": list(pattern_cells), "cellSize": cell_size,
        "patternPixels": list(pattern_size),
        "counts": {"train": n_train, "test": n_test, "background": n_background},
    }, indent=1))
    return SynthCorpus(root=out, background_images=backgrounds,
                       train_samples=train_path, test_gt=gt_path,
                       test_images=test_images, meta=meta_path)

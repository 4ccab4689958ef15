"""Synthetic scenes with planted toy-detector objects."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from keypatch.detector import PLANT_STRENGTH, ToyDetector
from keypatch.types import Image


@dataclass(frozen=True)
class GroundTruthBox:
    """Annotated object; box is (x_min, y_min, x_max, y_max), max exclusive."""

    box: Tuple[float, float, float, float]
    label: str
    difficult: bool = False


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid (round half away from zero) and back to float."""
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5) / 255.0


def plant_pattern(detectors: Sequence[ToyDetector], class_id: int) -> np.ndarray:
    """Object pattern every detector in ``detectors`` fires on for ``class_id``."""
    return PLANT_STRENGTH * sum(d.templates[class_id] for d in detectors)


def make_scene(
    detectors: Sequence[ToyDetector],
    seed: int,
    size: int = 416,
    n_objects: Tuple[int, int] = (2, 5),
    noise: float = 0.02,
    min_gap: int = 40,
    image_id: str = "",
) -> Tuple[Image, List[GroundTruthBox]]:
    """
    A grey noisy canvas with objects planted on the detectors' window grid.

    All detectors must share template size and stride so an object sits
    exactly in one window of each. Pixels are quantized to the 8-bit grid.

    :param n_objects: Inclusive range for the number of planted objects.
    :param min_gap: Minimum distance between object origins along either axis.
    """
    first = detectors[0]
    if any(d.size != first.size or d.stride != first.stride for d in detectors):
        raise ValueError("detectors must share window size and stride")
    n_classes = min(d.n_templates for d in detectors)
    rng = np.random.default_rng(seed)
    pixels = 0.5 + noise * rng.standard_normal((size, size, 3))
    n_rows, n_cols = first._grid(size, size)
    count = int(rng.integers(n_objects[0], n_objects[1] + 1))
    origins: List[Tuple[int, int]] = []
    truth: List[GroundTruthBox] = []
    attempts = 0
    while len(origins) < count and attempts < 10_000:
        attempts += 1
        r, c = int(rng.integers(0, n_rows)), int(rng.integers(0, n_cols))
        y, x = r * first.stride, c * first.stride
        if any(abs(y - oy) < min_gap and abs(x - ox) < min_gap for oy, ox in origins):
            continue
        cls = int(rng.integers(0, n_classes))
        pixels[y : y + first.size, x : x + first.size] = 0.5 + plant_pattern(detectors, cls)
        origins.append((y, x))
        truth.append(GroundTruthBox(first.box_of(r, c), first.class_names[cls]))
    return Image(quantize(pixels), image_id or f"scene{seed:04d}"), truth


def make_suite(detectors: Sequence[ToyDetector], n_images: int = 20, seed: int = 0, **kwargs):
    """``n_images`` scenes with consecutive seeds, ids ``scene0000`` and up."""
    return [make_scene(detectors, seed + j, image_id=f"scene{j:04d}", **kwargs) for j in range(n_images)]


def default_detectors() -> List[ToyDetector]:
    """The two toy detectors with distinct template sets used throughout the suite."""
    return [ToyDetector(seed=1, detector_id="toy1"), ToyDetector(seed=2, detector_id="toy2")]

"""
Initial key-pixel masks.

The gradient initializer tiles every instance box into cells, ranks cells by
accumulated absolute gradient and turns the best ones into thin grids. The
random and box-center initializers are the ablation baselines.

Cell rectangles are ``(x_min, y_min, x_max, y_max)`` with exclusive max edges.
"""

from __future__ import annotations

import math
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from keypatch.types import Detection

Rect = Tuple[int, int, int, int]


def accumulate_heatmap(heatmap: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Return ``heatmap`` plus the channel-summed absolute ``gradient``."""
    gradient = np.asarray(gradient)
    if gradient.ndim != 3 or gradient.shape[:2] != np.shape(heatmap):
        raise ValueError(f"gradient shape {gradient.shape} does not match heatmap {np.shape(heatmap)}")
    return heatmap + np.abs(gradient).sum(axis=2)


def _integral(heatmap: np.ndarray) -> np.ndarray:
    out = np.zeros((heatmap.shape[0] + 1, heatmap.shape[1] + 1))
    out[1:, 1:] = np.cumsum(np.cumsum(heatmap, axis=0), axis=1)
    return out


def _rect_sum(integral: np.ndarray, rect: Rect) -> float:
    x0, y0, x1, y1 = rect
    return float(integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0])


def tile_box(box: Rect, m: int) -> List[Rect]:
    """Cut ``box`` into m x m cells in row-major order; edge cells are truncated."""
    x0, y0, x1, y1 = box
    return [
        (x, y, min(x + m, x1), min(y + m, y1))
        for y in range(y0, y1, m)
        for x in range(x0, x1, m)
    ]


def score_cells(heatmap: np.ndarray, boxes: Iterable[Detection], m: int) -> List[Tuple[Rect, float]]:
    """
    Tile each box into m x m cells and score every cell by its heatmap sum.

    Boxes are clipped to the heatmap. Cells that repeat exactly (the same box
    reported by several detectors) are kept once.
    """
    if m < 1:
        raise ValueError("cell size must be >= 1")
    heatmap = np.asarray(heatmap, dtype=np.float64)
    h, w = heatmap.shape
    integral = _integral(heatmap)
    seen = set()
    cells = []
    for det in boxes:
        box = det.clipped(h, w) if isinstance(det, Detection) else tuple(int(v) for v in det)
        if box[0] >= box[2] or box[1] >= box[3]:
            continue
        for cell in tile_box(box, m):
            if cell in seen:
                continue
            seen.add(cell)
            cells.append((cell, _rect_sum(integral, cell)))
    return cells


def select_top_k(cells: Sequence[Tuple[Rect, float]], k: int) -> List[Rect]:
    """The ``k`` best-scoring cells; ties go to the smaller row-major origin."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(cells, key=lambda item: (-item[1], item[0][1], item[0][0]))
    return [rect for rect, _ in ranked[:k]]


def grid_offsets(length: int, spacing: int) -> List[int]:
    """Line offsets inside a cell of ``length`` pixels: every ``spacing`` pixels plus the far border."""
    offsets = list(range(0, length, spacing))
    if offsets[-1] != length - 1:
        offsets.append(length - 1)
    return offsets


def render_grid(cells: Iterable[Rect], spacing: int, image_shape) -> np.ndarray:
    """
    Mask with 1-pixel grid lines every ``spacing`` pixels inside each cell,
    cell borders included. Overlapping cells are merged.
    """
    if spacing < 2:
        raise ValueError("grid spacing must be >= 2")
    h, w = image_shape[:2]
    mask = np.zeros((h, w), dtype=bool)
    for x0, y0, x1, y1 in cells:
        x0, y0, x1, y1 = max(0, x0), max(0, y0), min(w, x1), min(h, y1)
        if x0 >= x1 or y0 >= y1:
            continue
        rows = [y0 + o for o in grid_offsets(y1 - y0, spacing)]
        cols = [x0 + o for o in grid_offsets(x1 - x0, spacing)]
        mask[rows, x0:x1] = True
        mask[y0:y1, cols] = True
    return mask


def gradient_mask(heatmap: np.ndarray, boxes: Sequence[Detection], cell_size: int, top_k: int, spacing: int):
    """Gridded top-k cells of the heatmap over all instance boxes; also returns the chosen cells."""
    cells = select_top_k(score_cells(heatmap, boxes, cell_size), top_k) if boxes else []
    return render_grid(cells, spacing, heatmap.shape), cells


def baseline_random_mask(image_shape, rate: float, seed: int) -> np.ndarray:
    """Exactly ``floor(rate * H * W)`` uniformly chosen pixels."""
    if not 0 < rate <= 1:
        raise ValueError("rate must be in (0, 1]")
    h, w = image_shape[:2]
    n = min(h * w, math.floor(rate * h * w + 1e-9))
    rng = np.random.default_rng(seed)
    mask = np.zeros(h * w, dtype=bool)
    mask[rng.choice(h * w, size=n, replace=False)] = True
    return mask.reshape(h, w)


def baseline_center_mask(boxes: Iterable[Detection], patch_size: int, image_shape) -> np.ndarray:
    """Solid ``patch_size`` squares centered on each box, clipped to the image."""
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    h, w = image_shape[:2]
    mask = np.zeros((h, w), dtype=bool)
    for det in boxes:
        x_min, y_min, x_max, y_max = det.box if isinstance(det, Detection) else det
        cy = int(math.floor((y_min + y_max) / 2))
        cx = int(math.floor((x_min + x_max) / 2))
        top, left = cy - patch_size // 2, cx - patch_size // 2
        mask[max(0, top) : max(0, top + patch_size), max(0, left) : max(0, left + patch_size)] = True
    return mask

"""
Shared value types and configuration.

Images are H x W x 3 float arrays in [0, 1]. Masks are H x W boolean arrays
where a set bit makes all three channels of that pixel attackable. Heatmaps
are H x W non-negative float arrays.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class Image:
    """An attackable image with an opaque identifier."""

    pixels: np.ndarray
    id: str = ""

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got shape {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "pixels", pixels)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class Detection:
    """One box reported by one detector. Coordinates are pixels, max edges exclusive."""

    box: Tuple[float, float, float, float]
    confidence: float
    class_id: int = 0
    detector_id: str = ""

    def __post_init__(self):
        x_min, y_min, x_max, y_max = self.box
        if not (x_min < x_max and y_min < y_max):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def clipped(self, height: int, width: int) -> Tuple[int, int, int, int]:
        """Integer (x_min, y_min, x_max, y_max) clipped to the image, rounded outwards."""
        x_min, y_min, x_max, y_max = self.box
        return (
            int(max(0, np.floor(x_min))),
            int(max(0, np.floor(y_min))),
            int(min(width, np.ceil(x_max))),
            int(min(height, np.ceil(y_max))),
        )


class EnginePhase(str, enum.Enum):
    WARMUP = "warmup"
    MASKED_ATTACK = "masked_attack"
    POINTS_REMOVAL = "points_removal"
    DONE = "done"


@dataclass(frozen=True)
class AttackConfig:
    """
    Knobs of the attack. Defaults follow the published VOC2007 settings where
    those exist; ``alpha``, ``cell_size``, ``grid_spacing`` and ``max_patches``
    are not published and carry documented choices.

    ``max_patches=None`` resolves to 10 with a region limit and 20 without.
    """

    max_iterations: int = 2000
    add_frequency: int = 100
    decrease_threshold: int = 25
    alpha: float = 8 / 255
    patch_size: int = 70
    cell_size: int = 70
    top_k_cells: int = 5
    max_patches: Optional[int] = None
    p_limit: float = 0.02
    region_limit: Optional[int] = None
    grid_spacing: int = 5
    seed: int = 0
    points_removal_block: int = 3

    def __post_init__(self):
        if self.max_patches is None:
            object.__setattr__(self, "max_patches", 10 if self.region_limit is not None else 20)
        checks = [
            (self.max_iterations > 0, "max_iterations must be > 0"),
            (self.add_frequency > 0, "add_frequency must be > 0"),
            (self.decrease_threshold > 0, "decrease_threshold must be > 0"),
            (self.alpha > 0, "alpha must be > 0"),
            (0 < self.p_limit <= 1, "p_limit must be in (0, 1]"),
            (self.max_patches >= 1, "max_patches must be >= 1"),
            (self.top_k_cells >= 1, "top_k_cells must be >= 1"),
            (self.patch_size >= 1, "patch_size must be >= 1"),
            (self.cell_size >= 1, "cell_size must be >= 1"),
            (self.grid_spacing >= 2, "grid_spacing must be >= 2"),
            (self.points_removal_block >= 1, "points_removal_block must be >= 1"),
            (self.region_limit is None or self.region_limit >= 1, "region_limit must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)

    @property
    def warmup_cap(self) -> int:
        return 5 * self.add_frequency

    def replace(self, **changes) -> "AttackConfig":
        if "region_limit" in changes and "max_patches" not in changes:
            changes["max_patches"] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PerturbationState:
    """
    Engine state for one image. Arrays are treated as immutable: engine
    operations return a new state instead of writing into these.
    """

    adversarial: np.ndarray
    mask: np.ndarray
    patch_count: int = 0
    iteration: int = 0
    min_bb_num: float = float("inf")
    a_k_counter: int = 0
    d_k_counter: int = 0
    decrease_enabled: bool = False
    counts: Optional[dict] = None
    skipped_patches: int = 0
    extra: dict = field(default_factory=dict)

    def replace(self, **changes) -> "PerturbationState":
        return dataclasses.replace(self, **changes)

    @property
    def mask_bits(self) -> int:
        return int(np.count_nonzero(self.mask))


def as_pixels(image) -> np.ndarray:
    """Return the float pixel array of an ``Image`` or array-like."""
    if isinstance(image, Image):
        return image.pixels
    return np.asarray(image, dtype=np.float64)


def perturbation_rate(mask: np.ndarray) -> float:
    """Fraction of pixels whose mask bit is set."""
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        return 0.0
    return np.count_nonzero(mask) / mask.size


def apply_mask(original, adversarial, mask: np.ndarray) -> np.ndarray:
    """
    Take ``adversarial`` where ``mask`` is set and ``original`` elsewhere.

    :param original: Clean image, HxWx3.
    :param adversarial: Candidate adversarial image, HxWx3.
    :param mask: HxW boolean mask.
    :return: The combined image, clipped to [0, 1].
    """
    original = as_pixels(original)
    adversarial = as_pixels(adversarial)
    mask = np.asarray(mask, dtype=bool)
    if original.shape != adversarial.shape or original.shape[:2] != mask.shape:
        raise ValueError(
            f"shape mismatch: original {original.shape}, adversarial {adversarial.shape}, mask {mask.shape}"
        )
    out = np.where(mask[..., None], np.clip(adversarial, 0.0, 1.0), original)
    return out

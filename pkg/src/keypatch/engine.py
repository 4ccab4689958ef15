"""
Attack driver.

The pipeline for one image is: an instance-level warm-up over the detected
boxes that accumulates a gradient heatmap, a masked sign-gradient ensemble
attack that restarts from the clean image on the initial key-pixels while
adding patches and pruning weak pixels, and a greedy points-removal pass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage, signal

from keypatch import keypixel
from keypatch.detector import Detector, NoDetectionsError, detect, loss_gradient
from keypatch.scenes import quantize
from keypatch.types import AttackConfig, Detection, EnginePhase, PerturbationState, as_pixels

logger = logging.getLogger(__name__)

_EIGHT = np.ones((3, 3), dtype=bool)

INIT_METHODS = ("gradient", "random", "center")


def count_regions(mask: np.ndarray) -> int:
    """Number of 8-connected components of set bits."""
    return int(ndimage.label(np.asarray(mask, dtype=bool), structure=_EIGHT)[1])


def balance_weight(adv_count: int, clean_count: int) -> int:
    """Per-detector gradient weight ``max(1, D_i(x*) - D_i(x))``."""
    return max(1, adv_count - clean_count)


def detect_all(detectors: Sequence[Detector], pixels: np.ndarray) -> Dict[str, List[Detection]]:
    return {d.id: detect(d, pixels) for d in detectors}


def count_all(detectors: Sequence[Detector], pixels: np.ndarray) -> Dict[str, int]:
    return {d.id: len(dets) for d, dets in zip(detectors, detect_all(detectors, pixels).values())}


def _union_box_mask(detections: Dict[str, List[Detection]], shape) -> np.ndarray:
    h, w = shape[:2]
    mask = np.zeros((h, w), dtype=bool)
    for dets in detections.values():
        for det in dets:
            x0, y0, x1, y1 = det.clipped(h, w)
            mask[y0:y1, x0:x1] = True
    return mask


def _frozen(array: np.ndarray) -> np.ndarray:
    """Mark an engine-owned array read-only so detectors may cache results keyed on it."""
    array.setflags(write=False)
    return array


def _ensemble_update(adversarial, mask, detectors, counts, clean_counts, alpha):
    """
    One balanced sign-gradient step restricted to ``mask``.

    Detectors that currently see nothing contribute no term. Returns the new
    image, the per-detector raw gradients and the weights used.
    """
    ys, xs = np.nonzero(mask)
    update = np.zeros((ys.size, 3))
    grads, weights = {}, {}
    for d in detectors:
        if counts is not None and counts.get(d.id, 1) == 0:
            continue
        try:
            g = loss_gradient(d, adversarial)
        except NoDetectionsError:
            continue
        w = balance_weight(counts[d.id], clean_counts[d.id]) if counts is not None else 1
        grads[d.id], weights[d.id] = g, w
        # ascent on the (non-positive) loss drives confidences towards zero
        update += w * alpha * np.sign(g[ys, xs])
    if not grads:
        raise NoDetectionsError("no detector reports a box")
    out = adversarial.copy()
    out[ys, xs] = np.clip(adversarial[ys, xs] + update, 0.0, 1.0)
    return _frozen(out), grads, weights


def _heat_of(grads: Dict[str, np.ndarray], shape) -> np.ndarray:
    heat = np.zeros(shape[:2])
    for g in grads.values():
        heat = keypixel.accumulate_heatmap(heat, g)
    return heat


def ensemble_step(
    state: PerturbationState,
    original,
    detectors: Sequence[Detector],
    config: AttackConfig,
    clean_counts: Dict[str, int],
) -> PerturbationState:
    """
    Advance the adversarial image by one balanced I-FGSM step on the mask.

    Each detector still seeing boxes adds ``w_i * alpha * sign(grad_i)`` with
    ``w_i = max(1, D_i(x*) - D_i(x))``; ``D_i(x*)`` is read from
    ``state.counts`` (detected afresh when missing). The returned state
    carries this step's raw per-detector gradients in ``extra["grads"]``
    and leaves ``counts`` unset, since the image changed.
    """
    original = as_pixels(original)
    counts = state.counts if state.counts is not None else count_all(detectors, state.adversarial)
    if not np.any(state.mask):
        raise ValueError("ensemble step needs a non-empty mask")
    adv, grads, weights = _ensemble_update(
        state.adversarial, state.mask, detectors, counts, clean_counts, config.alpha
    )
    extra = dict(state.extra, weights=weights, grads=grads, fresh=None)
    return state.replace(adversarial=adv, iteration=state.iteration + 1, counts=None, extra=extra)


@dataclass
class WarmupResult:
    heatmap: np.ndarray
    iterations: int
    cleared: bool
    detections: Dict[str, List[Detection]]


def warmup_attack(
    image,
    detectors: Sequence[Detector],
    config: AttackConfig,
    trace: Optional[list] = None,
) -> WarmupResult:
    """
    Instance-level attack over every pixel of the first-pass boxes.

    Runs until no detector reports a box or ``5 * add_frequency`` iterations
    pass, summing channel-summed absolute gradients into a heatmap. The
    perturbed image is thrown away; only the heatmap is kept.
    """
    if not detectors:
        raise ValueError("at least one detector is required")
    original = _frozen(np.array(as_pixels(image)))
    detections = detect_all(detectors, original)
    clean_counts = {k: len(v) for k, v in detections.items()}
    if sum(clean_counts.values()) == 0:
        raise NoDetectionsError("clean image has no detections; nothing to hide")
    mask = _union_box_mask(detections, original.shape)
    heat = np.zeros(original.shape[:2])
    adv, counts = original, clean_counts
    cleared, it = False, 0
    while it < config.warmup_cap:
        it += 1
        adv, grads, weights = _ensemble_update(adv, mask, detectors, counts, clean_counts, config.alpha)
        for g in grads.values():
            heat = keypixel.accumulate_heatmap(heat, g)
        counts = count_all(detectors, adv)
        if trace is not None:
            trace.append(_record(EnginePhase.WARMUP, it, counts, weights, 0, int(mask.sum())))
        if sum(counts.values()) == 0:
            cleared = True
            break
    return WarmupResult(heat, it, cleared, detections)


def _record(phase, iteration, counts, weights, patch_count, mask_bits, **more):
    rec = {
        "phase": phase.value,
        "iteration": iteration,
        "n": dict(counts) if counts is not None else None,
        "weights": dict(weights) if weights else {},
        "patch_count": patch_count,
        "mask_bits": mask_bits,
    }
    rec.update(more)
    return rec


def _patch_rect(cy: int, cx: int, size: int, shape):
    h, w = shape[:2]
    top, left = cy - size // 2, cx - size // 2
    return (max(0, left), max(0, top), min(w, left + size), min(h, top + size))


def _window_sums(heat: np.ndarray, size: int) -> np.ndarray:
    """Sum of ``heat`` over the clipped ``size`` window centered at each pixel."""
    h, w = heat.shape
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = np.cumsum(np.cumsum(heat, axis=0), axis=1)
    ys = np.arange(h)
    xs = np.arange(w)
    y0 = np.clip(ys - size // 2, 0, h)[:, None]
    y1 = np.clip(ys - size // 2 + size, 0, h)[:, None]
    x0 = np.clip(xs - size // 2, 0, w)[None, :]
    x1 = np.clip(xs - size // 2 + size, 0, w)[None, :]
    return integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]


def _candidate_order(scores: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """Flat pixel indices by descending window score, then center heat, then row-major."""
    flat = np.arange(scores.size)
    return np.lexsort((flat, -heat.ravel(), -scores.ravel()))


def add_patch(
    state: PerturbationState,
    heatmap_current: np.ndarray,
    config: AttackConfig,
) -> PerturbationState:
    """
    Add one gridded ``patch_size`` patch where the current gradient is strongest.

    The location maximizes the heatmap summed over the patch window, ignoring
    already-masked pixels. With ``config.region_limit`` set and the new patch
    pushing the region count over the limit, the patch moves to the nearest
    center where it joins an existing region; if none exists it is skipped.
    """
    if state.patch_count >= config.max_patches:
        raise ValueError("patch budget exhausted")
    mask = state.mask
    shape = mask.shape
    heat = np.where(mask, 0.0, np.asarray(heatmap_current, dtype=np.float64))
    scores = _window_sums(heat, config.patch_size)
    best = int(_candidate_order(scores, heat)[0])
    cy, cx = divmod(best, shape[1])

    def placed(y, x):
        rect = _patch_rect(y, x, config.patch_size, shape)
        return mask | keypixel.render_grid([rect], config.grid_spacing, shape), rect

    new_mask, rect = placed(cy, cx)
    regions = count_regions(new_mask)
    limit = config.region_limit
    if limit is not None and regions > limit:
        new_mask, rect, regions = _snap_to_region(mask, cy, cx, config, placed, limit)
        if new_mask is None:
            logger.debug("no region-preserving placement for patch; skipped")
            return state.replace(skipped_patches=state.skipped_patches + 1)
    history = list(state.extra.get("regions_after_add", [])) + [regions]
    patches = list(state.extra.get("patches", [])) + [rect]
    fresh = new_mask & ~mask
    if state.extra.get("fresh") is not None:
        fresh |= state.extra["fresh"]
    extra = dict(state.extra, regions_after_add=history, patches=patches, fresh=fresh)
    return state.replace(mask=new_mask, patch_count=state.patch_count + 1, extra=extra)


def _snap_to_region(mask, cy, cx, config, placed, limit, max_checks=400):
    """Nearest patch center whose patch touches an existing region without exceeding ``limit``."""
    size, spacing = config.patch_size, config.grid_spacing
    kernel = keypixel.render_grid([(0, 0, size, size)], spacing, (size, size)).astype(float)
    grown = ndimage.binary_dilation(mask, structure=_EIGHT).astype(float)
    # touch[y, x] > 0 when an unclipped patch centered at (y, x) meets the grown mask
    touch = signal.fftconvolve(grown, kernel[::-1, ::-1], mode="full")
    h, w = mask.shape
    off_y, off_x = size - 1 - size // 2, size - 1 - size // 2
    touch = touch[off_y : off_y + h, off_x : off_x + w]
    ys, xs = np.nonzero(touch > 0.5)
    if ys.size == 0:
        return None, None, None
    dist = (ys - cy) ** 2 + (xs - cx) ** 2
    order = np.lexsort((xs, ys, dist))
    for idx in order[:max_checks]:
        new_mask, rect = placed(int(ys[idx]), int(xs[idx]))
        regions = count_regions(new_mask)
        if regions <= limit:
            return new_mask, rect, regions
    return None, None, None


def decrease_perturbation(
    state: PerturbationState,
    original,
    region_limit: Optional[int] = None,
) -> PerturbationState:
    """
    Drop masked pixels whose change is below a third of the mean change.

    A pixel's change is the channel-mean absolute difference from the
    original. Dropped pixels return to their original values. With
    ``region_limit`` the pruning is skipped when it would split the mask
    into more regions than both the limit and the current count.

    Pixels added since the last gradient step carry no change yet; they are
    left out of the statistics and kept.
    """
    original = as_pixels(original)
    mask = state.mask
    fresh = state.extra.get("fresh")
    eligible = mask if fresh is None else mask & ~fresh
    if not np.any(eligible):
        return state
    ys, xs = np.nonzero(eligible)
    delta = np.abs(state.adversarial[ys, xs] - original[ys, xs]).mean(axis=1)
    below = delta < delta.mean() / 3.0
    if not np.any(below):
        return state
    dy, dx = ys[below], xs[below]
    new_mask = mask.copy()
    new_mask[dy, dx] = False
    if region_limit is not None:
        if count_regions(new_mask) > max(region_limit, count_regions(mask)):
            return state
    adv = state.adversarial.copy()
    adv[dy, dx] = original[dy, dx]
    return state.replace(adversarial=_frozen(adv), mask=new_mask)


def points_removal(
    state: PerturbationState,
    original,
    detectors: Sequence[Detector],
    block: int = 3,
    region_limit: Optional[int] = None,
    max_passes: Optional[int] = None,
) -> PerturbationState:
    """
    Greedily revert blocks of perturbed pixels that the detectors do not need.

    Masked pixels are grouped into ``block`` x ``block`` tiles and visited by
    ascending mean change. A tile is reverted for good when the total box
    count does not rise; passes repeat until one accepts nothing.
    """
    original = as_pixels(original)
    adv, mask = state.adversarial, state.mask.copy()
    current = sum(count_all(detectors, adv).values())
    passes = 0
    while np.any(mask) and (max_passes is None or passes < max_passes):
        passes += 1
        delta = np.abs(adv - original).mean(axis=2)
        ys, xs = np.nonzero(mask)
        keys = (ys // block) * (mask.shape[1] // block + 1) + xs // block
        uniq, inverse = np.unique(keys, return_inverse=True)
        sums = np.bincount(inverse, weights=delta[ys, xs])
        means = sums / np.bincount(inverse)
        accepted = 0
        for b in np.lexsort((uniq, means)):
            sel = inverse == b
            py, px = ys[sel], xs[sel]
            if not mask[py[0], px[0]]:
                continue
            trial_mask = mask.copy()
            trial_mask[py, px] = False
            if region_limit is not None and count_regions(trial_mask) > max(region_limit, count_regions(mask)):
                continue
            if means[b] == 0.0:
                mask = trial_mask
                accepted += 1
                continue
            trial = adv.copy()
            trial[py, px] = original[py, px]
            _frozen(trial)
            total = sum(count_all(detectors, trial).values())
            if total <= current:
                adv, mask, current = trial, trial_mask, total
                accepted += 1
        if accepted == 0:
            break
    return state.replace(adversarial=adv, mask=mask, counts=None)


class _Snapshot:
    def __init__(self):
        self.key = None
        self.adversarial = None
        self.mask = None

    def offer(self, n: int, adversarial, mask):
        key = (n, int(np.count_nonzero(mask)))
        if self.key is None or key < self.key:
            self.key, self.adversarial, self.mask = key, adversarial, mask


def algorithm1_loop(
    image,
    initial_mask: np.ndarray,
    detectors: Sequence[Detector],
    config: AttackConfig,
    clean_counts: Optional[Dict[str, int]] = None,
    refine: bool = True,
    trace: Optional[list] = None,
    return_best: bool = True,
) -> PerturbationState:
    """
    Masked ensemble attack with adaptive patch adding and pruning.

    Every iteration steps the image, then reads ``N``, the total box count
    over all detectors. While ``N > 0`` a counter advances and every
    ``add_frequency`` ticks a patch is added (at most ``max_patches``).
    Iterations where ``N`` equals the running minimum advance a second
    counter; its ``decrease_threshold``-th tick latches pruning on, after
    which pruning runs on every iteration at the minimum.

    With ``return_best`` the state with the fewest boxes (then fewest mask
    bits) seen at any iteration is returned in place of the last one when
    the last one is worse. ``refine=False`` disables adding and pruning.
    """
    original = _frozen(np.array(as_pixels(image)))
    mask = np.asarray(initial_mask, dtype=bool)
    if mask.shape != original.shape[:2]:
        raise ValueError("initial mask does not match image")
    if clean_counts is None:
        clean_counts = count_all(detectors, original)
    state = PerturbationState(adversarial=original, mask=mask, counts=dict(clean_counts))
    peak = state.mask_bits
    best = _Snapshot()
    dirty = False
    for _ in range(config.max_iterations):
        n_prev = sum(state.counts.values()) if state.counts is not None else None
        weights = {}
        if (dirty or (n_prev or 0) > 0) and np.any(state.mask):
            try:
                state = ensemble_step(state, original, detectors, config, clean_counts)
                weights = state.extra["weights"]
            except NoDetectionsError:
                state = state.replace(iteration=state.iteration + 1)
            state.counts = count_all(detectors, state.adversarial)
            dirty = False
        else:
            state = state.replace(iteration=state.iteration + 1)
            if state.counts is None:
                state.counts = count_all(detectors, state.adversarial)
        n = sum(state.counts.values())
        best.offer(n, state.adversarial, state.mask)

        if n > 0:
            state.a_k_counter += 1
            if refine and state.a_k_counter % config.add_frequency == 0 and state.patch_count < config.max_patches:
                heat = _heat_of(state.extra.get("grads", {}), original.shape)
                state = add_patch(state, heat, config)
                peak = max(peak, state.mask_bits)
        if n < state.min_bb_num:
            state.min_bb_num = n
        if n == state.min_bb_num:
            state.d_k_counter += 1
            if state.d_k_counter % config.decrease_threshold == 0 and refine:
                state.decrease_enabled = True
            if state.decrease_enabled:
                pruned = decrease_perturbation(state, original, config.region_limit)
                if pruned.mask is not state.mask:
                    dirty = True
                state = pruned
        if trace is not None:
            trace.append(
                _record(
                    EnginePhase.MASKED_ATTACK, state.iteration, state.counts, weights,
                    state.patch_count, state.mask_bits, decrease=state.decrease_enabled,
                )
            )
    if dirty:
        state.counts = count_all(detectors, state.adversarial)
    n_final = sum(state.counts.values())
    state.extra = dict(state.extra, peak_mask_bits=peak, final_n=n_final)
    if return_best:
        best.offer(n_final, state.adversarial, state.mask)
        if best.key < (n_final, state.mask_bits):
            logger.debug("returning best snapshot %s over final %s", best.key, (n_final, state.mask_bits))
            state = state.replace(adversarial=best.adversarial, mask=best.mask, counts=None)
            state.extra = dict(state.extra, used_snapshot=True)
    return state


@dataclass
class AttackResult:
    """Everything one image's attack produced."""

    image_id: str
    adversarial: np.ndarray
    mask: np.ndarray
    clean_counts: Dict[str, int]
    pre_removal_counts: Dict[str, int]
    adv_counts: Dict[str, int]
    init: str
    iterations_used: int
    warmup_iterations: int = 0
    warmup_cleared: Optional[bool] = None
    initial_mask_bits: int = 0
    peak_mask_bits: int = 0
    pre_removal_mask_bits: int = 0
    patch_count: int = 0
    skipped_patches: int = 0
    regions_after_add: List[int] = field(default_factory=list)
    cells: list = field(default_factory=list)
    trace: List[dict] = field(default_factory=list)


def initial_mask(
    original: np.ndarray,
    detections: Dict[str, List[Detection]],
    config: AttackConfig,
    init: str,
    heatmap: Optional[np.ndarray] = None,
    seed: int = 0,
):
    """Initial key-pixel mask for ``init`` in {gradient, random, center}; also returns chosen cells."""
    shape = original.shape
    boxes = [det for dets in detections.values() for det in dets]
    if init == "gradient":
        if heatmap is None:
            raise ValueError("gradient init needs a heatmap")
        return keypixel.gradient_mask(heatmap, boxes, config.cell_size, config.top_k_cells, config.grid_spacing)
    if init == "random":
        return keypixel.baseline_random_mask(shape, config.p_limit, seed), []
    if init == "center":
        h, w = shape[:2]
        unique = sorted({det.clipped(h, w) for det in boxes})
        # squares sized so the union stays within the area budget
        side = min(config.patch_size, int(math.floor(math.sqrt(config.p_limit * h * w / max(1, len(unique))))))
        rects = [Detection(b, 1.0) for b in unique]
        return keypixel.baseline_center_mask(rects, max(1, side), shape), []
    raise ValueError(f"unknown init {init!r}; expected one of {INIT_METHODS}")


def run_attack(
    image,
    detectors: Sequence[Detector],
    config: AttackConfig = AttackConfig(),
    init: str = "gradient",
    refine: bool = True,
    remove_points: bool = True,
    image_id: str = "",
    seed: Optional[int] = None,
    keep_trace: bool = True,
) -> AttackResult:
    """
    Full attack on one image.

    The adversarial image is snapped to the 8-bit grid before points-removal
    so the returned counts are the ones an 8-bit PNG reproduces.
    """
    if not detectors:
        raise ValueError("at least one detector is required")
    image_id = image_id or getattr(image, "id", "")
    original = _frozen(np.array(as_pixels(image)))
    trace: List[dict] = [] if keep_trace else None
    detections = detect_all(detectors, original)
    clean_counts = {k: len(v) for k, v in detections.items()}
    if sum(clean_counts.values()) == 0:
        raise NoDetectionsError(f"{image_id or 'image'}: nothing detected on the clean image")

    warm = None
    heat = None
    if init == "gradient":
        warm = warmup_attack(original, detectors, config, trace)
        heat = warm.heatmap
    mask0, cells = initial_mask(original, detections, config, init, heat, config.seed if seed is None else seed)

    state = algorithm1_loop(original, mask0, detectors, config, clean_counts, refine=refine, trace=trace)
    adv = _frozen(np.where(state.mask[..., None], quantize(state.adversarial), original))
    state = state.replace(adversarial=adv, counts=None)
    pre_counts = count_all(detectors, adv)
    pre_bits = state.mask_bits
    if trace is not None:
        trace.append(_record(EnginePhase.POINTS_REMOVAL, state.iteration, pre_counts, {}, state.patch_count, pre_bits))
    if remove_points:
        state = points_removal(
            state, original, detectors, block=config.points_removal_block, region_limit=config.region_limit
        )
    adv_counts = count_all(detectors, state.adversarial)
    if trace is not None:
        trace.append(_record(EnginePhase.DONE, state.iteration, adv_counts, {}, state.patch_count, state.mask_bits))
    return AttackResult(
        image_id=image_id,
        adversarial=state.adversarial,
        mask=state.mask,
        clean_counts=clean_counts,
        pre_removal_counts=pre_counts,
        adv_counts=adv_counts,
        init=init,
        iterations_used=state.iteration,
        warmup_iterations=warm.iterations if warm else 0,
        warmup_cleared=warm.cleared if warm else None,
        initial_mask_bits=int(mask0.sum()),
        peak_mask_bits=int(state.extra.get("peak_mask_bits", mask0.sum())),
        pre_removal_mask_bits=pre_bits,
        patch_count=state.patch_count,
        skipped_patches=state.skipped_patches,
        regions_after_add=list(state.extra.get("regions_after_add", [])),
        cells=[list(c) for c in cells],
        trace=trace or [],
    )

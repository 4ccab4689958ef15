"""
Attack scores and detection accuracy.

Per image ``j`` and detector ``i``:

* area score ``AS_j = 2 - rate_j / p_limit`` when ``rate_j <= p_limit``, else 0
* box score ``BS_ij = max(D_i(x_j) - D_i(x_j + P_j), 0)``
* overall ``OS = sum_j AS_j * sum_i BS_ij``

Reported means divide by the number of images.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from keypatch.types import Detection


@dataclass(frozen=True)
class ImageScore:
    as_j: float
    bs_per_detector: Dict[str, int]
    os_j: float
    p_rate: float
    regions: int = 0
    image_id: str = ""
    clean_counts: Dict[str, int] = field(default_factory=dict)
    adv_counts: Dict[str, int] = field(default_factory=dict)


def area_score(p_rate: float, p_limit: float) -> float:
    if p_rate < 0:
        raise ValueError("p_rate must be >= 0")
    if p_limit <= 0:
        raise ValueError("p_limit must be > 0")
    if p_rate > p_limit:
        return 0.0
    return 2.0 - p_rate / p_limit


def box_score(clean_counts: Mapping[str, int], adv_counts: Mapping[str, int]) -> Dict[str, int]:
    if set(clean_counts) != set(adv_counts):
        raise ValueError(f"detector ids differ: {sorted(clean_counts)} vs {sorted(adv_counts)}")
    return {k: max(int(clean_counts[k]) - int(adv_counts[k]), 0) for k in clean_counts}


def image_score(
    p_rate: float,
    p_limit: float,
    clean_counts: Mapping[str, int],
    adv_counts: Mapping[str, int],
    regions: int = 0,
    image_id: str = "",
) -> ImageScore:
    as_j = area_score(p_rate, p_limit)
    bs = box_score(clean_counts, adv_counts)
    return ImageScore(
        as_j=as_j,
        bs_per_detector=bs,
        os_j=as_j * sum(bs.values()),
        p_rate=p_rate,
        regions=regions,
        image_id=image_id,
        clean_counts=dict(clean_counts),
        adv_counts=dict(adv_counts),
    )


def overall_score(scores: Iterable[ImageScore]) -> float:
    """Total ``sum_j AS_j * sum_i BS_ij``; divide by the image count for the per-image mean."""
    return float(sum(s.as_j * sum(s.bs_per_detector.values()) for s in scores))


def mean_scores(scores: Sequence[ImageScore]) -> dict:
    """Per-image means of AS, BS (per detector) and OS."""
    n = len(scores)
    if n == 0:
        return {"mean_as": 0.0, "mean_bs_per_detector": {}, "mean_os": 0.0}
    bs = defaultdict(float)
    for s in scores:
        for k, v in s.bs_per_detector.items():
            bs[k] += v
    return {
        "mean_as": sum(s.as_j for s in scores) / n,
        "mean_bs_per_detector": {k: v / n for k, v in sorted(bs.items())},
        "mean_os": overall_score(scores) / n,
    }


def _total(items) -> int:
    total = 0
    for item in items:
        if isinstance(item, Mapping):
            total += sum(int(v) for v in item.values())
        elif isinstance(item, (int, np.integer)):
            total += int(item)
        else:
            total += len(item)
    return total


def missed_detection_rate(clean: Sequence, adv: Sequence) -> float:
    """
    ``1 - (adversarial boxes) / (clean boxes)`` summed over all images.

    Each entry is a list of detections, a count, or a ``{detector: count}`` map.
    """
    if len(clean) != len(adv):
        raise ValueError("clean and adversarial lists must have the same length")
    clean_total = _total(clean)
    if clean_total == 0:
        raise ValueError("no clean detections; missed detection rate is undefined")
    return 1.0 - _total(adv) / clean_total


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def voc_ap_11point(recall: np.ndarray, precision: np.ndarray) -> float:
    points = [precision[recall >= t].max() if np.any(recall >= t) else 0.0 for t in np.linspace(0.0, 1.0, 11)]
    return float(np.mean(points))


def voc_map(
    ground_truth: Sequence[Sequence],
    detections: Sequence[Sequence[Detection]],
    iou_threshold: float = 0.5,
    class_names: Optional[Sequence[str]] = None,
) -> float:
    """
    Mean VOC2007 11-point AP over the classes present in ``ground_truth``.

    :param ground_truth: Per image, objects with ``box``, ``label`` and
        optional ``difficult`` attributes. Difficult objects are neither
        required nor penalized, as in the VOC devkit.
    :param detections: Per image, detections; their label is
        ``class_names[class_id]`` (or ``str(class_id)`` without names).
    :return: mAP in [0, 1].
    """
    if len(ground_truth) != len(detections):
        raise ValueError("ground truth and detections must cover the same images")

    def label_of(det):
        return class_names[det.class_id] if class_names is not None else str(det.class_id)

    classes = sorted({g.label for objs in ground_truth for g in objs if not getattr(g, "difficult", False)})
    if not classes:
        raise ValueError("ground truth is empty")
    aps: List[float] = []
    for cls in classes:
        gts = {j: [g for g in objs if g.label == cls] for j, objs in enumerate(ground_truth)}
        n_pos = sum(1 for objs in gts.values() for g in objs if not getattr(g, "difficult", False))
        used = {j: [False] * len(objs) for j, objs in gts.items()}
        dets = [(d.confidence, j, d.box) for j, ds in enumerate(detections) for d in ds if label_of(d) == cls]
        dets.sort(key=lambda item: -item[0])
        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        for k, (_, j, box) in enumerate(dets):
            best, best_idx = 0.0, -1
            for idx, g in enumerate(gts[j]):
                o = iou(box, g.box)
                if o > best:
                    best, best_idx = o, idx
            if best >= iou_threshold:
                if getattr(gts[j][best_idx], "difficult", False):
                    continue
                if not used[j][best_idx]:
                    used[j][best_idx] = True
                    tp[k] = 1
                else:
                    fp[k] = 1
            else:
                fp[k] = 1
        tp, fp = np.cumsum(tp), np.cumsum(fp)
        recall = tp / n_pos
        precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
        aps.append(voc_ap_11point(recall, precision) if len(dets) else 0.0)
    return float(np.mean(aps))

"""
Batch runner: attack a dataset, persist artifacts, score from the artifacts.

Output layout under ``out_dir``::

    adv/<id>.png, adv/<id>_mask.png   adversarial image and float mask
    results/<id>.json                 per-image scores and counts
    traces/<id>.ndjson                per-iteration engine trace
    manifest.json                     config, detector hashes, status, timings
    report.json                       per-image and aggregate scores
"""

from __future__ import annotations

import json
import logging
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from keypatch import __version__
from keypatch.detector import Detector, NoDetectionsError, ToyDetector
from keypatch.engine import count_all, count_regions, detect_all, run_attack
from keypatch.io import (
    DatasetItem,
    RunManifest,
    atomic_write_text,
    dump_json,
    load_dataset,
    read_image,
    read_mask,
    save_adversarial,
    write_report,
)
from keypatch.metrics import image_score, mean_scores, missed_detection_rate, voc_map
from keypatch.types import AttackConfig, Image

logger = logging.getLogger(__name__)

EXTERNAL_ENV = "KEYPATCH_EXTERNAL_DETECTOR"


def build_detector(spec: str, index: int = 0) -> Detector:
    """
    Detector from a spec string.

    ``toy`` is a toy detector seeded ``index + 1``; ``toy:S`` uses seed S;
    ``ext:CMD`` runs CMD as a detector server; bare ``ext`` reads the command
    from the ``KEYPATCH_EXTERNAL_DETECTOR`` environment variable.
    """
    kind, _, arg = spec.partition(":")
    if kind == "toy":
        seed = int(arg) if arg else index + 1
        return ToyDetector(seed=seed, detector_id=f"toy{seed}")
    if kind == "ext":
        from keypatch.external import SubprocessDetector

        command = arg or os.environ.get(EXTERNAL_ENV)
        if not command:
            raise ValueError(f"ext detector needs a command (ext:CMD or ${EXTERNAL_ENV})")
        return SubprocessDetector(command)
    raise ValueError(f"unknown detector spec {spec!r}")


def build_detectors(specs: Sequence[str]) -> List[Detector]:
    dets = [build_detector(s, i) for i, s in enumerate(specs)]
    ids = [d.id for d in dets]
    if len(set(ids)) != len(ids):
        raise ValueError(f"detector ids must be unique, got {ids}")
    return dets


def image_seed(seed: int, image_id: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(image_id.encode())) % (2**32)


def _detections_json(dets_by_id) -> dict:
    return {
        k: [{"box": list(map(float, d.box)), "confidence": round(d.confidence, 6), "class_id": d.class_id} for d in v]
        for k, v in dets_by_id.items()
    }


def artifact_scores(clean: np.ndarray, adv: np.ndarray, detectors, p_limit: float, image_id: str, mask=None):
    """Score one image from its 8-bit clean and adversarial versions."""
    changed = np.any(np.round(clean * 255) != np.round(adv * 255), axis=2)
    clean_dets = detect_all(detectors, clean)
    adv_dets = detect_all(detectors, adv)
    score = image_score(
        p_rate=float(changed.mean()),
        p_limit=p_limit,
        clean_counts={k: len(v) for k, v in clean_dets.items()},
        adv_counts={k: len(v) for k, v in adv_dets.items()},
        regions=count_regions(changed if mask is None else mask),
        image_id=image_id,
    )
    return score, clean_dets, adv_dets, changed


def attack_item(item: DatasetItem, detectors, config: AttackConfig, options: dict, out_dir: Path) -> dict:
    """Attack one image, write its artifacts and return its result record."""
    image_id = item.image.id
    result = {"id": image_id, "lossy_input": item.lossy}
    try:
        attack = run_attack(
            item.image,
            detectors,
            config,
            init=options["init"],
            refine=options["refine"],
            remove_points=options["points_removal"],
            image_id=image_id,
            seed=image_seed(config.seed, image_id),
        )
    except NoDetectionsError as exc:
        result.update(status="skipped", reason=str(exc))
        return result

    adv_path, mask_path = save_adversarial(attack.adversarial, attack.mask, out_dir / "adv", image_id)
    adv = read_image(adv_path)
    clean = item.image.pixels
    score, clean_dets, adv_dets, _ = artifact_scores(clean, adv, detectors, config.p_limit, image_id, read_mask(mask_path))
    trace_rel = f"traces/{image_id}.ndjson"
    (out_dir / "traces").mkdir(parents=True, exist_ok=True)
    with open(out_dir / trace_rel, "w") as f:
        for rec in attack.trace:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    result.update(
        status="done",
        p_rate=score.p_rate,
        mask_rate=float(attack.mask.mean()),
        mask_bits=int(attack.mask.sum()),
        initial_mask_bits=attack.initial_mask_bits,
        peak_mask_bits=attack.peak_mask_bits,
        pre_removal_mask_bits=attack.pre_removal_mask_bits,
        **{"as": score.as_j},
        bs_per_detector=score.bs_per_detector,
        os=score.os_j,
        regions=score.regions,
        iterations_used=attack.iterations_used,
        warmup_iterations=attack.warmup_iterations,
        warmup_cleared=attack.warmup_cleared,
        patch_count=attack.patch_count,
        skipped_patches=attack.skipped_patches,
        regions_after_add=attack.regions_after_add,
        clean_counts=score.clean_counts,
        pre_removal_counts=attack.pre_removal_counts,
        adv_counts=score.adv_counts,
        clean_detections=_detections_json(clean_dets),
        adv_detections=_detections_json(adv_dets),
        cells=attack.cells,
        phase_trace_path=trace_rel,
        adversarial_path=f"adv/{image_id}.png",
        mask_path=f"adv/{image_id}_mask.png",
    )
    return result


_WORKER = {}


def _worker_init(specs):
    _WORKER["detectors"] = build_detectors(specs)


def _worker_run(item, config, options, out_dir):
    start = time.perf_counter()
    result = attack_item(item, _WORKER["detectors"], config, options, Path(out_dir))
    return result, time.perf_counter() - start


def _result_path(out_dir: Path, image_id: str) -> Path:
    return out_dir / "results" / f"{image_id}.json"


def _finished_result(out_dir: Path, image_id: str) -> Optional[dict]:
    path = _result_path(out_dir, image_id)
    if not path.exists():
        return None
    result = json.loads(path.read_text())
    return result if result.get("status") in ("done", "skipped") else None


def aggregate(results: List[dict], items: Sequence[DatasetItem], detectors) -> dict:
    done = [r for r in results if r.get("status") == "done"]
    from keypatch.metrics import ImageScore

    scores = [ImageScore(r["as"], r["bs_per_detector"], r["os"], r["p_rate"], r["regions"], r["id"]) for r in done]
    agg = mean_scores(scores)
    agg["images_done"] = len(done)
    agg["images_total"] = len(results)
    agg["mean_p_rate"] = float(np.mean([r["p_rate"] for r in done])) if done else 0.0
    clean = [r["clean_counts"] for r in done]
    if done and sum(sum(c.values()) for c in clean) > 0:
        agg["missed_detection_rate"] = missed_detection_rate(clean, [r["adv_counts"] for r in done])
    else:
        agg["missed_detection_rate"] = None
    truth = {it.image.id: it.ground_truth for it in items}
    if done and all(truth.get(r["id"]) for r in done):
        agg["map_clean"], agg["map_adv"] = {}, {}
        for d in detectors:
            names = getattr(d, "class_names", None)
            gts = [truth[r["id"]] for r in done]
            for key, field_name in (("map_clean", "clean_detections"), ("map_adv", "adv_detections")):
                dets = [_restore(r[field_name][d.id], d.id) for r in done]
                agg[key][d.id] = voc_map(gts, dets, 0.5, names)
        agg["map_interpolation"] = "voc2007-11point"
    return agg


def _restore(entries, detector_id):
    from keypatch.types import Detection

    return [Detection(tuple(e["box"]), e["confidence"], e["class_id"], detector_id) for e in entries]


def run_batch(
    items: Sequence[DatasetItem],
    detector_specs: Sequence[str],
    config: AttackConfig,
    out_dir,
    init: str = "gradient",
    refine: bool = True,
    points_removal: bool = True,
    workers: int = 1,
    resume: bool = False,
    skipped_inputs: Sequence[str] = (),
) -> Path:
    """
    Attack every item and write artifacts, manifest and report into ``out_dir``.

    With ``resume`` every image that already has a finished result file is
    kept as it is; the existing manifest must carry the same config and
    options. Returns the report path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    detectors = build_detectors(detector_specs)
    options = {"init": init, "refine": refine, "points_removal": points_removal, "detector_specs": list(detector_specs)}
    manifest = RunManifest(
        config=config.to_dict(),
        detectors=[{"id": d.id, "fingerprint": d.fingerprint()} for d in detectors],
        options=options,
        seed=config.seed,
        version=__version__,
        skipped_inputs=list(skipped_inputs),
    )
    previous = RunManifest.load(out_dir) if resume else None
    if previous is not None:
        if previous.config != manifest.config or previous.options != manifest.options:
            raise ValueError("cannot resume: config or options differ from the existing manifest")
        manifest.images = previous.images
    for it in items:
        manifest.images.setdefault(it.image.id, {"status": "pending"})
    manifest.save(out_dir)

    # a result file is written atomically before the manifest, so it is the
    # authority on whether an image finished
    todo = []
    for it in items:
        finished = _finished_result(out_dir, it.image.id) if resume else None
        if finished is None:
            todo.append(it)
        else:
            manifest.images[it.image.id] = dict(manifest.images[it.image.id], status=finished["status"])
    manifest.save(out_dir)

    def record(result, seconds):
        atomic_write_text(_result_path(out_dir, result["id"]), dump_json(result))
        manifest.images[result["id"]] = {"status": result["status"], "seconds": round(seconds, 3)}
        manifest.save(out_dir)
        logger.info("%s: %s (%.1fs)", result["id"], result["status"], seconds)

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(list(detector_specs),)) as pool:
            futures = [pool.submit(_worker_run, it, config, options, str(out_dir)) for it in todo]
            for fut in as_completed(futures):
                record(*fut.result())
    else:
        for it in todo:
            start = time.perf_counter()
            try:
                result = attack_item(it, detectors, config, options, out_dir)
            except Exception as exc:
                logger.exception("attack failed on %s", it.image.id)
                result = {"id": it.image.id, "status": "failed", "reason": str(exc)}
            record(result, time.perf_counter() - start)

    results = [json.loads(_result_path(out_dir, it.image.id).read_text()) for it in items]
    per_image = [_report_entry(r) for r in results]
    return write_report(manifest, per_image, aggregate(results, items, detectors), out_dir)


_REPORT_KEYS = (
    "id", "status", "reason", "p_rate", "mask_rate", "as", "bs_per_detector", "os", "regions",
    "iterations_used", "phase_trace_path", "clean_counts", "pre_removal_counts", "adv_counts",
    "mask_bits", "initial_mask_bits", "peak_mask_bits", "pre_removal_mask_bits", "patch_count",
    "skipped_patches", "regions_after_add", "warmup_iterations", "warmup_cleared", "lossy_input",
    "adversarial_path", "mask_path",
)


def _report_entry(result: dict) -> dict:
    return {k: result[k] for k in _REPORT_KEYS if k in result}


def score_directories(clean_dir, adv_dir, detector_specs: Sequence[str], p_limit: float = 0.02, annotations=None) -> dict:
    """Recompute per-image and aggregate scores from clean and adversarial PNGs on disk."""
    detectors = build_detectors(detector_specs)
    items = load_dataset(clean_dir, annotations)
    adv_dir = Path(adv_dir)
    results = []
    for it in items:
        adv_file = adv_dir / f"{it.image.id}.png"
        if not adv_file.exists():
            results.append({"id": it.image.id, "status": "missing"})
            continue
        adv = read_image(adv_file)
        score, clean_dets, adv_dets, _ = artifact_scores(it.image.pixels, adv, detectors, p_limit, it.image.id)
        if sum(score.clean_counts.values()) == 0:
            results.append({"id": it.image.id, "status": "skipped"})
            continue
        results.append(
            {
                "id": it.image.id,
                "status": "done",
                "p_rate": score.p_rate,
                "as": score.as_j,
                "bs_per_detector": score.bs_per_detector,
                "os": score.os_j,
                "regions": score.regions,
                "clean_counts": score.clean_counts,
                "adv_counts": score.adv_counts,
                "clean_detections": _detections_json(clean_dets),
                "adv_detections": _detections_json(adv_dets),
            }
        )
    return {
        "version": __version__,
        "per_image": [{k: v for k, v in r.items() if not k.endswith("_detections")} for r in results],
        "aggregate": aggregate(results, items, detectors),
    }

"""
Dataset loading, lossless image persistence, reports and run manifests.

Adversarial images are stored as 8-bit RGB PNG, masks as 1-bit PNG. Floats
map to bytes by ``floor(v * 255 + 0.5)``, which rounds halves away from zero
on [0, 1].
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image as PILImage

from keypatch.scenes import GroundTruthBox
from keypatch.types import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
LOSSY_SUFFIXES = {".jpg", ".jpeg"}
REPORT_VERSION = "1.0"
SCHEMA_PATH = Path(__file__).with_name("report.schema.json")


class AnnotationError(ValueError):
    """A VOC annotation file could not be parsed."""


@dataclass
class DatasetItem:
    image: Image
    ground_truth: Optional[List[GroundTruthBox]] = None
    path: Optional[Path] = None
    lossy: bool = False


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_uint8(data: np.ndarray) -> np.ndarray:
    return data.astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def write_png(pixels: np.ndarray, path) -> Path:
    path = Path(path)
    PILImage.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG")
    return path


def write_mask(mask: np.ndarray, path) -> Path:
    path = Path(path)
    PILImage.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path, format="PNG")
    return path


def read_mask(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("1"), dtype=bool)


def parse_voc_xml(path) -> List[GroundTruthBox]:
    """Objects of a VOC annotation; 1-based inclusive boxes become 0-based, max-exclusive."""
    try:
        root = ET.parse(path).getroot()
        objects = []
        for obj in root.iter("object"):
            name = obj.findtext("name")
            bb = obj.find("bndbox")
            if name is None or bb is None:
                raise AnnotationError(f"{path}: object without name or bndbox")
            coords = [float(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax")]
            difficult = (obj.findtext("difficult") or "0").strip() == "1"
            objects.append(
                GroundTruthBox((coords[0] - 1, coords[1] - 1, coords[2], coords[3]), name.strip(), difficult)
            )
        return objects
    except ET.ParseError as exc:
        raise AnnotationError(f"{path}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, AnnotationError):
            raise
        raise AnnotationError(f"{path}: bad bndbox ({exc})") from exc


def write_voc_xml(path, filename: str, shape, objects: Sequence[GroundTruthBox]) -> Path:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = filename
    size = ET.SubElement(root, "size")
    for tag, value in zip(("height", "width", "depth"), (shape[0], shape[1], 3)):
        ET.SubElement(size, tag).text = str(value)
    for obj in objects:
        node = ET.SubElement(root, "object")
        ET.SubElement(node, "name").text = obj.label
        ET.SubElement(node, "difficult").text = "1" if obj.difficult else "0"
        bb = ET.SubElement(node, "bndbox")
        x0, y0, x1, y1 = obj.box
        for tag, value in zip(("xmin", "ymin", "xmax", "ymax"), (x0 + 1, y0 + 1, x1, y1)):
            ET.SubElement(bb, tag).text = str(int(round(value)))
    ET.indent(root)
    path = Path(path)
    ET.ElementTree(root).write(path, encoding="unicode")
    return path


def load_dataset(path, annotations_path=None, skipped: Optional[list] = None) -> List[DatasetItem]:
    """
    Images under ``path`` in lexicographic filename order.

    Undecodable files are skipped with a warning and appended to ``skipped``.
    With ``annotations_path``, ``<stem>.xml`` is parsed for each image when it
    exists; a malformed file raises :class:`AnnotationError`.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"image directory {path} does not exist")
    items = []
    for file in sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            pixels = read_image(file)
        except Exception as exc:  # PIL raises a zoo of exception types
            logger.warning("skipping unreadable image %s: %s", file, exc)
            if skipped is not None:
                skipped.append(str(file))
            continue
        truth = None
        if annotations_path is not None:
            xml = Path(annotations_path) / f"{file.stem}.xml"
            if xml.exists():
                truth = parse_voc_xml(xml)
        items.append(DatasetItem(Image(pixels, file.stem), truth, file, file.suffix.lower() in LOSSY_SUFFIXES))
    return items


def save_adversarial(image, mask: np.ndarray, out_dir, image_id: Optional[str] = None):
    """Write ``<id>.png`` (8-bit RGB) and ``<id>_mask.png`` (1-bit) into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_id = image_id or getattr(image, "id", "") or "image"
    pixels = image.pixels if isinstance(image, Image) else np.asarray(image)
    return write_png(pixels, out_dir / f"{image_id}.png"), write_mask(mask, out_dir / f"{image_id}_mask.png")


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


@dataclass
class RunManifest:
    """Run bookkeeping: enough to resume or exactly re-run."""

    config: dict
    detectors: List[dict]
    options: dict
    seed: int
    images: dict = field(default_factory=dict)
    version: str = ""
    skipped_inputs: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "config": self.config,
            "detectors": self.detectors,
            "options": self.options,
            "seed": self.seed,
            "images": self.images,
            "skipped_inputs": self.skipped_inputs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(
            config=data["config"],
            detectors=data["detectors"],
            options=data.get("options", {}),
            seed=data["seed"],
            images=data.get("images", {}),
            version=data.get("version", ""),
            skipped_inputs=data.get("skipped_inputs", []),
        )

    def save(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        atomic_write_text(path, dump_json(self.to_dict()))
        return path

    @classmethod
    def load(cls, out_dir) -> Optional["RunManifest"]:
        path = Path(out_dir) / "manifest.json"
        if not path.exists():
            return None
        return cls.from_dict(json.loads(path.read_text()))


def write_report(manifest: RunManifest, per_image: List[dict], aggregate: dict, out_dir) -> Path:
    """
    Write ``report.json``. Contents depend only on the inputs, so identical
    runs give byte-identical reports; timings live in the manifest instead.
    """
    report = {
        "version": REPORT_VERSION,
        "config": manifest.config,
        "detectors": manifest.detectors,
        "options": manifest.options,
        "per_image": per_image,
        "aggregate": aggregate,
    }
    path = Path(out_dir) / "report.json"
    atomic_write_text(path, dump_json(report))
    return path


def load_schema() -> dict:
    return json.loads(SCHEMA_PATH.read_text())

"""
Detector contract, the confidence-suppression loss, and a small differentiable
toy detector used for desk-scale verification of the attack.
"""

from __future__ import annotations

import abc
import hashlib
import logging
from typing import List, Optional, Sequence

import numpy as np

from keypatch.types import Detection, as_pixels

logger = logging.getLogger(__name__)


class DetectorError(RuntimeError):
    """The detector backend failed (crashed, unreachable, malformed reply)."""


class NoDetectionsError(ValueError):
    """The attack loss or its gradient was requested but nothing is detected."""


class Detector(abc.ABC):
    """
    Anything the attack can optimize against.

    Subclasses return every box at or above ``threshold`` from :meth:`detect`
    and the gradient of :func:`attack_loss` over those boxes' confidences with
    respect to the input pixels from :meth:`loss_gradient`. Both must be
    deterministic for a fixed input.
    """

    id: str = "detector"
    threshold: float = 0.5

    @abc.abstractmethod
    def detect(self, pixels: np.ndarray, threshold: Optional[float] = None) -> List[Detection]:
        ...

    @abc.abstractmethod
    def loss_gradient(self, pixels: np.ndarray, threshold: Optional[float] = None) -> np.ndarray:
        ...

    def fingerprint(self) -> str:
        """Hash identifying the detector weights; used in run manifests."""
        return ""

    def count(self, pixels: np.ndarray, threshold: Optional[float] = None) -> int:
        return len(self.detect(pixels, threshold))


def _check_threshold(threshold: Optional[float]):
    if threshold is not None and not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")


def detect(d: Detector, image, threshold: Optional[float] = None) -> List[Detection]:
    """
    Run ``d`` on ``image`` and return all detections with confidence >= threshold.

    Backend failures surface as :class:`DetectorError`, never as an empty list.
    """
    _check_threshold(threshold)
    try:
        return d.detect(as_pixels(image), threshold)
    except (DetectorError, ValueError):
        raise
    except Exception as exc:
        raise DetectorError(f"detector {d.id!r} failed: {exc}") from exc


def attack_loss(confidences: Sequence[float]) -> float:
    """
    Mean negative squared confidence, ``-(1/k) * sum(c_i ** 2)``.

    The value is at most 0 and reaches 0 only when every confidence is 0.
    Undefined for an empty list.
    """
    c = np.asarray(confidences, dtype=np.float64)
    if c.size == 0:
        raise NoDetectionsError("attack loss is undefined without detections")
    if np.any(c < 0) or np.any(c > 1):
        raise ValueError("confidences must lie in [0, 1]")
    return float(-np.mean(c**2))


def loss_gradient(d: Detector, image, threshold: Optional[float] = None) -> np.ndarray:
    """Gradient of :func:`attack_loss` over the above-threshold boxes of ``d``, shaped like the image."""
    _check_threshold(threshold)
    pixels = as_pixels(image)
    try:
        grad = d.loss_gradient(pixels, threshold)
    except (DetectorError, NoDetectionsError, ValueError):
        raise
    except Exception as exc:
        raise DetectorError(f"detector {d.id!r} failed: {exc}") from exc
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != pixels.shape:
        raise DetectorError(f"detector {d.id!r} returned gradient of shape {grad.shape}, expected {pixels.shape}")
    return grad


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


PLANT_STRENGTH = 1.6
"""Template correlation of a cleanly planted toy object (see :mod:`keypatch.scenes`)."""


class ToyDetector(Detector):
    """
    Sliding-window template detector.

    Every window of ``size`` x ``size`` pixels at ``stride`` spacing is
    correlated with each zero-mean, unit-norm template; its confidence is
    ``sigmoid(gain * correlation + bias)``. Every window at or above the
    threshold is a box (no NMS). The default gain and bias put a planted
    object at 0.9 and flat background at 0.05.

    :param seed: Seed for the templates.
    :param n_templates: Number of templates, one per class.
    :param size: Template side in pixels.
    :param stride: Window stride in pixels.
    :param threshold: Default operating threshold.
    :param detector_id: Identifier used in reports.
    """

    def __init__(
        self,
        seed: int = 0,
        n_templates: int = 4,
        size: int = 15,
        stride: int = 8,
        threshold: float = 0.5,
        detector_id: Optional[str] = None,
        gain: Optional[float] = None,
        bias: Optional[float] = None,
    ):
        if size < 2 or stride < 1:
            raise ValueError("size must be >= 2 and stride >= 1")
        self.seed = seed
        self.size = size
        self.stride = stride
        self.threshold = threshold
        self.id = detector_id or f"toy{seed}"
        self.bias = float(np.log(0.05 / 0.95)) if bias is None else float(bias)
        self.gain = (float(np.log(0.9 / 0.1)) - self.bias) / PLANT_STRENGTH if gain is None else float(gain)

        rng = np.random.default_rng(seed)
        t = rng.standard_normal((n_templates, size, size, 3))
        t -= t.mean(axis=(1, 2), keepdims=True)
        t /= np.sqrt((t**2).sum(axis=(1, 2, 3), keepdims=True))
        self.templates = t
        self.class_names = [f"obj{z}" for z in range(n_templates)]

        # Templates zero-padded to q*stride and cut into q x q stride-sized quadrants
        # so each window is a sum of q*q per-block matmuls.
        self._q = -(-size // stride)
        side = self._q * stride
        padded = np.zeros((n_templates, side, side, 3))
        padded[:, :size, :size] = t
        quads = padded.reshape(n_templates, self._q, stride, self._q, stride, 3)
        # (qy, qx, stride*stride*3, Z)
        self._quads = quads.transpose(1, 3, 2, 4, 5, 0).reshape(self._q, self._q, stride * stride * 3, n_templates)
        self._quad_matrix = self._quads.transpose(2, 0, 1, 3).reshape(stride * stride * 3, -1)
        self._cache = (None, None)

    @property
    def n_templates(self) -> int:
        return self.templates.shape[0]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.templates).tobytes())
        h.update(np.array([self.gain, self.bias, self.size, self.stride], dtype=np.float64).tobytes())
        return h.hexdigest()[:16]

    def _grid(self, height: int, width: int):
        s = self.stride
        n_rows = (height - self.size) // s + 1 if height >= self.size else 0
        n_cols = (width - self.size) // s + 1 if width >= self.size else 0
        return n_rows, n_cols

    def _blocks(self, pixels: np.ndarray):
        s, q = self.stride, self._q
        h, w = pixels.shape[:2]
        n_rows, n_cols = self._grid(h, w)
        bh, bw = n_rows + q - 1, n_cols + q - 1
        if (bh * s, bw * s) == (h, w):
            region = pixels
        else:
            region = np.zeros((bh * s, bw * s, 3))
            ch, cw = min(h, bh * s), min(w, bw * s)
            region[:ch, :cw] = pixels[:ch, :cw]
        blocks = region.reshape(bh, s, bw, s, 3).transpose(0, 2, 1, 3, 4).reshape(bh, bw, s * s * 3)
        return blocks, n_rows, n_cols

    def correlation_map(self, pixels) -> np.ndarray:
        """Template correlation per window, shape (rows, cols, n_templates)."""
        pixels = as_pixels(pixels)
        blocks, n_rows, n_cols = self._blocks(pixels)
        bh, bw = blocks.shape[:2]
        z = self.n_templates
        per_quad = (blocks.reshape(bh * bw, -1) @ self._quad_matrix).reshape(bh, bw, self._q, self._q, z)
        corr = np.zeros((n_rows, n_cols, z))
        for qy in range(self._q):
            for qx in range(self._q):
                corr += per_quad[qy : qy + n_rows, qx : qx + n_cols, qy, qx]
        return corr

    def confidence_map(self, pixels) -> np.ndarray:
        """
        Confidence per window and template, shape (rows, cols, n_templates).

        The last result is reused when called again with the very same
        read-only array, which cannot have changed in between.
        """
        cached, conf = self._cache
        if cached is not None and pixels is cached:
            return conf
        conf = _sigmoid(self.gain * self.correlation_map(pixels) + self.bias)
        if isinstance(pixels, np.ndarray) and not pixels.flags.writeable:
            self._cache = (pixels, conf)
        return conf

    def box_of(self, row: int, col: int):
        s = self.stride
        return (col * s, row * s, col * s + self.size, row * s + self.size)

    def detect(self, pixels, threshold=None):
        thr = self.threshold if threshold is None else threshold
        conf = self.confidence_map(pixels)
        rows, cols, zs = np.nonzero(conf >= thr)
        return [
            Detection(self.box_of(r, c), float(conf[r, c, z]), int(z), self.id)
            for r, c, z in zip(rows.tolist(), cols.tolist(), zs.tolist())
        ]

    def loss_and_gradient(self, pixels, threshold=None, selection: Optional[np.ndarray] = None):
        """
        Attack loss and its pixel gradient.

        :param selection: Boolean (rows, cols, n_templates) array fixing which
            boxes enter the loss. Defaults to the boxes above threshold.
        """
        pixels = as_pixels(pixels)
        thr = self.threshold if threshold is None else threshold
        conf = self.confidence_map(pixels)
        sel = conf >= thr if selection is None else selection
        k = int(np.count_nonzero(sel))
        if k == 0:
            raise NoDetectionsError(f"{self.id}: nothing detected")
        loss = -float(np.sum(conf[sel] ** 2)) / k
        grad = np.zeros(pixels.shape)
        size, s = self.size, self.stride
        for r, c, z in zip(*np.nonzero(sel)):
            p = conf[r, c, z]
            # dJ/dcorr = -(2/k) c * c(1-c) * gain
            coef = -(2.0 / k) * p * p * (1.0 - p) * self.gain
            grad[r * s : r * s + size, c * s : c * s + size] += coef * self.templates[z]
        return loss, grad

    def loss_gradient(self, pixels, threshold=None):
        return self.loss_and_gradient(pixels, threshold)[1]

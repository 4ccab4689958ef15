"""
Out-of-process detectors.

A detector server reads requests on stdin and writes replies on stdout. Every
message is one JSON header line, optionally followed by a raw C-order array
whose dtype and shape the header names::

    -> {"op": "detect", "threshold": 0.5, "dtype": "<f8", "shape": [H, W, 3]}\\n  <H*W*3*8 bytes>
    <- {"ok": true, "detections": [{"box": [x0, y0, x1, y1], "confidence": c, "class_id": k}]}\\n

    -> {"op": "gradient", "threshold": null, "dtype": "<f8", "shape": [H, W, 3]}\\n  <bytes>
    <- {"ok": true, "dtype": "<f8", "shape": [H, W, 3]}\\n  <bytes>

    -> {"op": "info"}\\n
    <- {"ok": true, "id": "...", "fingerprint": "...", "threshold": 0.5}\\n

Failures reply ``{"ok": false, "kind": "no_detections" | "error", "error": "..."}``.

Run ``python -m keypatch.external toy:3`` to serve a toy detector.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import sys
import threading
from typing import BinaryIO, List, Optional, Sequence, Union

import numpy as np

from keypatch.detector import Detector, DetectorError, NoDetectionsError
from keypatch.types import Detection


def write_message(stream: BinaryIO, header: dict, array: Optional[np.ndarray] = None):
    if array is not None:
        array = np.ascontiguousarray(array)
        header = dict(header, dtype=array.dtype.str, shape=list(array.shape))
    stream.write(json.dumps(header).encode() + b"\n")
    if array is not None:
        stream.write(array.tobytes())
    stream.flush()


def read_message(stream: BinaryIO):
    line = stream.readline()
    if not line:
        raise EOFError("stream closed")
    header = json.loads(line)
    array = None
    if "dtype" in header and "shape" in header:
        dtype = np.dtype(header["dtype"])
        shape = tuple(header["shape"])
        n = int(np.prod(shape)) * dtype.itemsize
        data = stream.read(n)
        if len(data) != n:
            raise EOFError(f"expected {n} payload bytes, got {len(data)}")
        array = np.frombuffer(data, dtype=dtype).reshape(shape)
    return header, array


class SubprocessDetector(Detector):
    """
    Detector backed by a long-lived server process speaking the protocol above.

    Calls are serialized per instance. The process starts on first use.
    """

    def __init__(self, command: Union[str, Sequence[str]], detector_id: Optional[str] = None, timeout: float = 600.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc = None
        self._lock = threading.Lock()
        self._info = None
        self._given_id = detector_id

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
            except OSError as exc:
                raise DetectorError(f"cannot start detector {self.command}: {exc}") from exc

    def _call(self, header: dict, array: Optional[np.ndarray] = None):
        with self._lock:
            self._ensure()
            try:
                write_message(self._proc.stdin, header, array)
                reply, payload = read_message(self._proc.stdout)
            except (OSError, EOFError, ValueError) as exc:
                raise DetectorError(f"detector process {self.command} failed: {exc}") from exc
        if not reply.get("ok", False):
            if reply.get("kind") == "no_detections":
                raise NoDetectionsError(reply.get("error", "no detections"))
            raise DetectorError(reply.get("error", "detector reported failure"))
        return reply, payload

    def info(self) -> dict:
        if self._info is None:
            self._info, _ = self._call({"op": "info"})
        return self._info

    @property
    def id(self) -> str:
        return self._given_id or self.info().get("id", "external")

    @property
    def threshold(self) -> float:
        return float(self.info().get("threshold", 0.5))

    def fingerprint(self) -> str:
        return self.info().get("fingerprint", "")

    def detect(self, pixels, threshold=None) -> List[Detection]:
        reply, _ = self._call({"op": "detect", "threshold": threshold}, np.asarray(pixels, dtype=np.float64))
        return [
            Detection(tuple(d["box"]), float(d["confidence"]), int(d.get("class_id", 0)), self.id)
            for d in reply["detections"]
        ]

    def loss_gradient(self, pixels, threshold=None) -> np.ndarray:
        _, payload = self._call({"op": "gradient", "threshold": threshold}, np.asarray(pixels, dtype=np.float64))
        if payload is None:
            raise DetectorError("gradient reply carried no array")
        return np.array(payload, dtype=np.float64)

    def close(self):
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None

    def __del__(self):
        try:
            if self._proc is not None and self._proc.poll() is None:
                self._proc.kill()
        except Exception:
            pass


def serve(detector: Detector, stdin: BinaryIO, stdout: BinaryIO):
    """Answer protocol requests for ``detector`` until ``stdin`` closes."""
    while True:
        try:
            header, array = read_message(stdin)
        except EOFError:
            return
        op = header.get("op")
        try:
            if op == "info":
                write_message(
                    stdout,
                    {"ok": True, "id": detector.id, "fingerprint": detector.fingerprint(), "threshold": detector.threshold},
                )
            elif op == "detect":
                dets = detector.detect(np.array(array), header.get("threshold"))
                payload = [{"box": list(map(float, d.box)), "confidence": d.confidence, "class_id": d.class_id} for d in dets]
                write_message(stdout, {"ok": True, "detections": payload})
            elif op == "gradient":
                grad = detector.loss_gradient(np.array(array), header.get("threshold"))
                write_message(stdout, {"ok": True}, np.asarray(grad, dtype=np.float64))
            else:
                write_message(stdout, {"ok": False, "kind": "error", "error": f"unknown op {op!r}"})
        except NoDetectionsError as exc:
            write_message(stdout, {"ok": False, "kind": "no_detections", "error": str(exc)})
        except Exception as exc:
            write_message(stdout, {"ok": False, "kind": "error", "error": str(exc)})


def main(argv=None):
    from keypatch.runner import build_detector

    argv = sys.argv[1:] if argv is None else argv
    spec = argv[0] if argv else "toy:1"
    serve(build_detector(spec, 0), sys.stdin.buffer, sys.stdout.buffer)


if __name__ == "__main__":
    main()

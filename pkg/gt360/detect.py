import json
import logging
import math
import threading
from collections.abc import Sequence
from pathlib import Path
from typing import Protocol

import cv2
import numpy as np

from .core import FrameImage, HeadBox
from .exceptions import DetectorError, InvalidInput

log = logging.getLogger(__name__)

# x0, y0, x1, y1 in pixels, then a score
RawDetection = tuple[float, float, float, float, float]


class DetectorBackend(Protocol):
    reentrant: bool

    def detect(self, img: FrameImage, image_ref: str | None = None) -> list[RawDetection]: ...


class StubBackend:
    """Replays scripted detections, from a JSONL sidecar or a list of boxes"""

    reentrant = True

    def __init__(self, stub_path: str | None = None, boxes: Sequence[HeadBox] = (), **kwargs):
        self.scripted: list[tuple[str | None, HeadBox]] = [(None, box) for box in boxes]
        if stub_path:
            self.scripted.extend(self._read_sidecar(Path(stub_path)))

    @staticmethod
    def _read_sidecar(path: Path) -> list[tuple[str | None, HeadBox]]:
        scripted = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    box = HeadBox.from_list(record["box"], record.get("confidence", 1.0))
                except (ValueError, KeyError, TypeError) as e:
                    raise DetectorError(f"{path}:{lineno}: invalid scripted detection: {e}") from e
                image = record.get("image")
                scripted.append((Path(image).name if image else None, box))
        return scripted

    def detect(self, img: FrameImage, image_ref: str | None = None) -> list[RawDetection]:
        name = Path(image_ref).name if image_ref else None
        return [
            (
                box.x_min * img.width,
                box.y_min * img.height,
                box.x_max * img.width,
                box.y_max * img.height,
                box.confidence,
            )
            for image, box in self.scripted
            if image is None or image == name
        ]


def _squash(score: float) -> float:
    return 1.0 / (1.0 + math.exp(-score))


class HaarBackend:
    """OpenCV's frontal-face cascade, shipped with the opencv wheels"""

    reentrant = False

    def __init__(self, cascade: str = "haarcascade_frontalface_default.xml", **kwargs):
        self.classifier = cv2.CascadeClassifier(cv2.data.haarcascades + cascade)
        if self.classifier.empty():
            raise DetectorError(f"Could not load Haar cascade '{cascade}'")

    def detect(self, img: FrameImage, image_ref: str | None = None) -> list[RawDetection]:
        gray = cv2.cvtColor(np.ascontiguousarray(img.pixels), cv2.COLOR_RGB2GRAY)
        rects, _levels, weights = self.classifier.detectMultiScale3(
            gray, scaleFactor=1.1, minNeighbors=5, outputRejectLevels=True
        )
        return [
            (float(x), float(y), float(x + w), float(y + h), _squash(float(weight)))
            for (x, y, w, h), weight in zip(rects, np.ravel(weights), strict=False)
        ]


class DlibBackend:
    """dlib's HOG frontal face detector; dlib is an optional dependency"""

    reentrant = False

    def __init__(self, upsample: int = 1, **kwargs):
        try:
            import dlib
        except ImportError as e:
            raise DetectorError("The dlib backend needs the 'dlib' package installed") from e
        self.detector = dlib.get_frontal_face_detector()
        self.upsample = upsample

    def detect(self, img: FrameImage, image_ref: str | None = None) -> list[RawDetection]:
        rects, scores, _idx = self.detector.run(np.ascontiguousarray(img.pixels), self.upsample)
        return [
            (r.left(), r.top(), r.right(), r.bottom(), _squash(score))
            for r, score in zip(rects, scores, strict=True)
        ]


BACKENDS: dict[str, type] = {
    "stub": StubBackend,
    "haar": HaarBackend,
    "dlib": DlibBackend,
}


class DetectorHandle:
    def __init__(self, backend_name: str, min_confidence: float = 0.0, **options):
        if backend_name not in BACKENDS:
            raise InvalidInput(
                f"Unknown detector backend '{backend_name}' "
                f"(available: {', '.join(sorted(BACKENDS))})"
            )
        if not 0.0 <= min_confidence <= 1.0:
            raise InvalidInput(f"min_confidence outside [0, 1]: {min_confidence}")
        self._backend_name = backend_name
        self._min_confidence = float(min_confidence)
        self._backend = BACKENDS[backend_name](**options)
        self._lock = threading.Lock()

    @property
    def backend_name(self) -> str:
        return self._backend_name

    @property
    def min_confidence(self) -> float:
        return self._min_confidence

    @classmethod
    def from_config(cls, config, **overrides) -> "DetectorHandle":
        options = {
            "stub_path": config["detector.stub_path"] or None,
            "upsample": config["detector.upsample"],
        }
        options.update(overrides)
        return cls(config["detector.backend"], config["detector.min_confidence"], **options)

    def _raw(self, img: FrameImage, image_ref: str | None) -> list[RawDetection]:
        if self._backend.reentrant:
            return self._backend.detect(img, image_ref)
        with self._lock:
            return self._backend.detect(img, image_ref)


def detect_heads(
    det: DetectorHandle, img: FrameImage, image_ref: str | None = None
) -> list[HeadBox]:
    """
    Detect heads, returning normalized boxes sorted by descending confidence.

    An empty list means no faces were found; backend failures raise DetectorError.
    """
    try:
        raw = det._raw(img, image_ref)
    except DetectorError:
        raise
    except Exception as e:
        log.error(f"Detector backend '{det.backend_name}' failed: {e}")
        raise DetectorError(f"Detector backend '{det.backend_name}' failed: {e}") from e

    boxes = []
    for x0, y0, x1, y1, score in raw:
        try:
            box = HeadBox.from_pixels(x0, y0, x1, y1, img.width, img.height, score)
        except InvalidInput:
            log.debug("Dropping detection outside the frame: %s", (x0, y0, x1, y1))
            continue
        if box.confidence >= det.min_confidence:
            boxes.append(box)
    boxes.sort(key=lambda b: b.confidence, reverse=True)
    return boxes

"""
Domain types and geometry shared by every other module.

All coordinates are normalized to [0, 1] relative to the frame width and height.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from .constants import DEFAULT_SIGMA, HEATMAP_SIZE, IFT_THRESHOLD, INPUT_SIZE
from .exceptions import DegenerateCropError, InvalidInput, ShapeError

log = logging.getLogger(__name__)

Point = tuple[float, float]


class GazeClass(str, Enum):
    EC = "EC"
    OFT = "OFT"
    IFT = "IFT"


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class FrameImage:
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ShapeError("FrameImage", "(H, W, 3)", tuple(pixels.shape))
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ShapeError("FrameImage", "(H>=1, W>=1, 3)", tuple(pixels.shape))
        if pixels.dtype != np.uint8:
            raise InvalidInput(f"FrameImage pixels must be uint8, got {pixels.dtype}")
        object.__setattr__(self, "pixels", _readonly(pixels))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(frozen=True)
class HeadBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float = 1.0

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max", "confidence"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise InvalidInput(f"HeadBox {name} is not finite: {value}")
            object.__setattr__(self, name, value)
        if not 0.0 <= self.x_min < self.x_max <= 1.0:
            raise InvalidInput(f"HeadBox x range invalid: {self.x_min}, {self.x_max}")
        if not 0.0 <= self.y_min < self.y_max <= 1.0:
            raise InvalidInput(f"HeadBox y range invalid: {self.y_min}, {self.y_max}")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInput(f"HeadBox confidence outside [0, 1]: {self.confidence}")

    @classmethod
    def from_pixels(cls, x0, y0, x1, y1, width, height, confidence=1.0) -> "HeadBox":
        """
        Normalize a pixel-space box, clamping it to the frame and the confidence to [0, 1].

        Raises InvalidInput when nothing of the box is left inside the frame.
        """
        x_min = min(max(x0 / width, 0.0), 1.0)
        x_max = min(max(x1 / width, 0.0), 1.0)
        y_min = min(max(y0 / height, 0.0), 1.0)
        y_max = min(max(y1 / height, 0.0), 1.0)
        confidence = min(max(float(confidence), 0.0), 1.0)
        return cls(x_min, y_min, x_max, y_max, confidence)

    @classmethod
    def from_list(cls, box, confidence=1.0) -> "HeadBox":
        if len(box) != 4:
            raise InvalidInput(f"A box needs 4 coordinates, got {len(box)}")
        return cls(*box, confidence=confidence)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def center(self) -> Point:
        return (self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def iou(self, other: "HeadBox") -> float:
        ix = max(0.0, min(self.x_max, other.x_max) - max(self.x_min, other.x_min))
        iy = max(0.0, min(self.y_max, other.y_max) - max(self.y_min, other.y_min))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0


@dataclass(frozen=True, eq=False)
class HeatmapGrid:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (HEATMAP_SIZE, HEATMAP_SIZE):
            raise ShapeError("HeatmapGrid", (HEATMAP_SIZE, HEATMAP_SIZE), tuple(values.shape))
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise InvalidInput("HeatmapGrid values must lie in [0, 1]")
        object.__setattr__(self, "values", _readonly(values))

    @property
    def size(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class GazeVerdict:
    head: HeadBox
    cls: GazeClass
    p_ec: float
    p_ift: float | None = None
    heatmap: HeatmapGrid | None = None
    target_point: Point | None = None

    def __post_init__(self):
        object.__setattr__(self, "cls", GazeClass(self.cls))
        is_ift = self.cls is GazeClass.IFT
        if (self.heatmap is not None) != is_ift or (self.target_point is not None) != is_ift:
            raise InvalidInput("heatmap and target_point must be present iff the verdict is IFT")
        if not 0.0 <= self.p_ec <= 1.0:
            raise InvalidInput(f"p_ec outside [0, 1]: {self.p_ec}")
        if self.p_ift is not None and not 0.0 <= self.p_ift <= 1.0:
            raise InvalidInput(f"p_ift outside [0, 1]: {self.p_ift}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "box": self.head.as_list(),
            "confidence": self.head.confidence,
            "class": self.cls.value,
            "p_ec": self.p_ec,
            "p_ift": self.p_ift,
            "target": list(self.target_point) if self.target_point is not None else None,
        }


@dataclass(frozen=True)
class HeadFailure:
    """A head whose processing failed; the rest of the frame is unaffected"""

    head: HeadBox
    message: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "box": self.head.as_list(),
            "confidence": self.head.confidence,
            "error": self.message,
        }


@dataclass(frozen=True)
class PipelineConfig:
    sigma: float = DEFAULT_SIGMA
    ift_threshold: float = IFT_THRESHOLD
    heatmap_size: int = HEATMAP_SIZE
    input_size: tuple[int, int] = INPUT_SIZE
    crop_pad: float = 0.2
    point_mode: str = "argmax"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if not 0.0 < self.sigma < 1.0:
            raise InvalidInput(f"sigma must lie in (0, 1), got {self.sigma}")
        if self.ift_threshold != IFT_THRESHOLD:
            raise InvalidInput(f"ift_threshold is fixed at {IFT_THRESHOLD}")
        if self.heatmap_size != HEATMAP_SIZE:
            raise InvalidInput(f"heatmap_size is fixed at {HEATMAP_SIZE}")
        if self.crop_pad < 0:
            raise InvalidInput(f"crop_pad must be >= 0, got {self.crop_pad}")
        if self.point_mode not in ("argmax", "centroid"):
            raise InvalidInput(f"Unknown point mode '{self.point_mode}'")
        if self.workers < 1:
            raise InvalidInput(f"workers must be >= 1, got {self.workers}")

    @classmethod
    def from_config(cls, config, **overrides) -> "PipelineConfig":
        values = {
            "sigma": config["pipeline.sigma"],
            "ift_threshold": config["pipeline.ift_threshold"],
            "heatmap_size": config["pipeline.heatmap_size"],
            "input_size": config["pipeline.input_size"],
            "crop_pad": config["pipeline.crop_pad"],
            "point_mode": config["pipeline.point_mode"],
            "workers": config["pipeline.workers"],
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def argmax_point(hm: HeatmapGrid) -> Point:
    # np.argmax returns the first maximum in row-major order
    size = hm.size
    row, col = divmod(int(np.argmax(hm.values)), size)
    return (col + 0.5) / size, (row + 0.5) / size


def expected_point(hm: HeatmapGrid) -> Point:
    """Probability-weighted centroid of the heatmap cells"""
    total = float(hm.values.sum())
    if total <= 0.0:
        return argmax_point(hm)
    centers = (np.arange(hm.size) + 0.5) / hm.size
    x = float((hm.values.sum(axis=0) * centers).sum() / total)
    y = float((hm.values.sum(axis=1) * centers).sum() / total)
    return x, y


def extract_point(hm: HeatmapGrid, mode: str = "argmax") -> Point:
    if mode == "centroid":
        return expected_point(hm)
    return argmax_point(hm)


def crop_rect(height: int, width: int, box: HeadBox, pad: float) -> tuple[int, int, int, int]:
    """Pixel rectangle (x0, y0, x1, y1) of the padded box, clamped to the frame"""
    if pad < 0:
        raise InvalidInput(f"pad must be >= 0, got {pad}")
    box_w = (box.x_max - box.x_min) * width
    box_h = (box.y_max - box.y_min) * height
    x0 = max(0, int(round(box.x_min * width - pad * box_w)))
    y0 = max(0, int(round(box.y_min * height - pad * box_h)))
    x1 = min(width, int(round(box.x_max * width + pad * box_w)))
    y1 = min(height, int(round(box.y_max * height + pad * box_h)))
    if x1 <= x0 or y1 <= y0:
        raise DegenerateCropError(
            f"Head box {box.as_list()} has no area on a {width}x{height} frame"
        )
    return x0, y0, x1, y1


def crop_head(img: FrameImage, box: HeadBox, pad: float) -> FrameImage:
    x0, y0, x1, y1 = crop_rect(img.height, img.width, box, pad)
    return FrameImage(img.pixels[y0:y1, x0:x1])

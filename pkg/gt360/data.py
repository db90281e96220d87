"""
Unified annotations, eye-contact labelling geometry, frame sampling, ground-truth heatmaps
and photometric augmentation.

Manifests are JSONL, one sample per line::

    {"image": "frames/0001.png", "box": [x0, y0, x1, y1], "label": "IFT",
     "target": [x, y], "source": "gazefollow", "subject": "p00"}

``box`` and ``target`` are normalized to the image size. ``target`` is required for IFT samples
and must be null (or absent) for EC and OFT samples. ``subject`` is optional. Relative image
paths are resolved against the manifest's directory.
"""

import json
import logging
import math
import os
from collections import Counter
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torchvision import transforms
from torchvision.transforms import functional as TF

from .constants import EC_DISTANCE_MM, GT_SIGMA_CELLS, HEATMAP_SIZE, INPUT_SIZE, MANIFEST_FIELDS
from .core import FrameImage, HeadBox, HeatmapGrid, Point
from .exceptions import InvalidInput, ManifestError

log = logging.getLogger(__name__)


class SampleLabel(str, Enum):
    EC = "EC"
    OFT = "OFT"
    IFT = "IFT"
    UNKNOWN = "UNKNOWN"


@dataclass(frozen=True)
class AnnotatedSample:
    image_ref: str
    head: HeadBox
    label: SampleLabel
    source: str
    target: Point | None = None
    subject: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "label", SampleLabel(self.label))
        if self.target is not None:
            x, y = (float(v) for v in self.target)
            object.__setattr__(self, "target", (x, y))
        if self.label is SampleLabel.IFT:
            if self.target is None:
                raise InvalidInput("IFT sample without a target")
            if not (0.0 <= self.target[0] <= 1.0 and 0.0 <= self.target[1] <= 1.0):
                raise InvalidInput(f"IFT target outside the frame: {list(self.target)}")
        elif self.label in (SampleLabel.EC, SampleLabel.OFT) and self.target is not None:
            raise InvalidInput(f"{self.label.value} sample must not carry a target")
        if not self.source:
            raise InvalidInput("sample without a source")

    @property
    def is_ift(self) -> bool:
        return self.label is SampleLabel.IFT

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "image": self.image_ref,
            "box": self.head.as_list(),
            "label": self.label.value,
            "target": list(self.target) if self.target is not None else None,
            "source": self.source,
        }
        if self.subject is not None:
            data["subject"] = self.subject
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any], base: Path | None = None) -> "AnnotatedSample":
        unknown = set(data) - MANIFEST_FIELDS
        if unknown:
            raise InvalidInput(f"unknown fields: {', '.join(sorted(unknown))}")
        for key in ("image", "box", "label", "source"):
            if key not in data:
                raise InvalidInput(f"missing field '{key}'")
        image = str(data["image"])
        if base is not None and not os.path.isabs(image):
            image = str(base / image)
        subject = data.get("subject")
        return cls(
            image_ref=image,
            head=HeadBox.from_list(data["box"], data.get("confidence", 1.0)),
            label=SampleLabel(data["label"]),
            source=str(data["source"]),
            target=tuple(data["target"]) if data.get("target") is not None else None,
            subject=str(subject) if subject is not None else None,
        )


@dataclass(frozen=True)
class Gaze3dRecord:
    """Face centre and gaze target in camera coordinates, millimetres"""

    face_center: tuple[float, float, float]
    gaze_target: tuple[float, float, float]

    def __post_init__(self):
        fc = tuple(float(v) for v in self.face_center)
        gt = tuple(float(v) for v in self.gaze_target)
        if len(fc) != 3 or len(gt) != 3:
            raise InvalidInput("face_center and gaze_target need three coordinates")
        if not all(math.isfinite(v) for v in fc + gt):
            raise InvalidInput("face_center and gaze_target must be finite")
        if fc == gt:
            raise InvalidInput("face_center and gaze_target coincide")
        object.__setattr__(self, "face_center", fc)
        object.__setattr__(self, "gaze_target", gt)

    @property
    def fc(self) -> np.ndarray:
        return np.asarray(self.face_center)

    @property
    def gt(self) -> np.ndarray:
        return np.asarray(self.gaze_target)

    @property
    def gaze_vector(self) -> np.ndarray:
        return self.gt - self.fc

    def direction(self) -> np.ndarray:
        v = self.gaze_vector
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise InvalidInput("zero-length gaze vector")
        return v / norm


def ec_distance(rec: Gaze3dRecord) -> float:
    """Perpendicular distance (mm) from the camera origin to the line through fc along the gaze"""
    d = rec.direction()
    fc = rec.fc
    return float(np.linalg.norm(fc - np.dot(fc, d) * d))


def ec_distance_literal(rec: Gaze3dRecord) -> float:
    """
    ||v - (v.d)d|| with v the gaze vector itself.

    d is parallel to v, so this is zero up to rounding for every record; ``ec_distance`` is the
    quantity used for labelling.
    """
    d = rec.direction()
    v = rec.gaze_vector
    return float(np.linalg.norm(v - np.dot(v, d) * d))


def label_ec_mpii(rec: Gaze3dRecord, threshold_mm: float = EC_DISTANCE_MM) -> SampleLabel:
    """EC when the gaze ray passes within ``threshold_mm`` of the camera, heading towards it"""
    distance = ec_distance(rec)
    towards_camera = float(np.dot(rec.gaze_vector, -rec.fc)) > 0.0
    if towards_camera and distance < threshold_mm:
        return SampleLabel.EC
    return SampleLabel.OFT


def label_ec_columbia(elevation_deg: float, yaw_deg: float) -> SampleLabel:
    if not (math.isfinite(elevation_deg) and math.isfinite(yaw_deg)):
        raise InvalidInput(f"angles must be finite: {elevation_deg}, {yaw_deg}")
    if elevation_deg == 0 and yaw_deg == 0:
        return SampleLabel.EC
    return SampleLabel.OFT


def sample_eyediap_frames(
    video_index: Iterable[tuple[str, int]], per_video: int = 50
) -> list[tuple[str, int]]:
    """``per_video`` evenly strided frame numbers from every video, floor(i * count / per_video)"""
    if per_video < 1:
        raise InvalidInput(f"per_video must be >= 1, got {per_video}")
    frames = []
    for video_id, frame_count in video_index:
        if frame_count < per_video:
            raise InvalidInput(
                f"Video '{video_id}' has {frame_count} frames, fewer than {per_video}"
            )
        frames.extend((video_id, i * frame_count // per_video) for i in range(per_video))
    return frames


def target_cell(target: Point, size: int) -> tuple[int, int]:
    """(row, col) of the grid cell holding a normalized point"""
    x, y = target
    return min(int(y * size), size - 1), min(int(x * size), size - 1)


def gaussian_grid(target: Point, size: int = HEATMAP_SIZE, sigma: float = GT_SIGMA_CELLS):
    """Peak-1 isotropic Gaussian (sigma in cells) centred on the target cell"""
    x, y = target
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise InvalidInput(f"target outside [0, 1]^2: {[x, y]}")
    row, col = target_cell(target, size)
    rows, cols = np.mgrid[0:size, 0:size]
    return np.exp(-((rows - row) ** 2 + (cols - col) ** 2) / (2.0 * sigma**2))


def build_gt_heatmap(
    target: Point, size: int = HEATMAP_SIZE, sigma_px: float = GT_SIGMA_CELLS
) -> HeatmapGrid:
    return HeatmapGrid(gaussian_grid(target, size, sigma_px))


def augment(
    img: FrameImage,
    sample: AnnotatedSample,
    seed: int,
    size: Sequence[int] = INPUT_SIZE,
) -> tuple[FrameImage, AnnotatedSample]:
    """
    Colour jitter and random grayscale, then a resize to ``size``.

    Only pixels change; the sample's normalized box and target are returned untouched.
    """
    photometric = transforms.Compose(
        [
            transforms.ColorJitter(brightness=0.4, contrast=0.4, saturation=0.4, hue=0.1),
            transforms.RandomGrayscale(p=0.2),
        ]
    )
    pixels = torch.from_numpy(np.ascontiguousarray(img.pixels)).permute(2, 0, 1)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        pixels = photometric(pixels)
    pixels = TF.resize(pixels, list(size), antialias=True)
    return FrameImage(pixels.permute(1, 2, 0).contiguous().numpy()), sample


def read_manifest_lines(path: Path) -> Iterator[tuple[int, dict[str, Any]]]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}: invalid JSON: {e.msg}", lineno) from e
            if not isinstance(record, dict):
                raise ManifestError(f"{path}: expected an object", lineno)
            yield lineno, record


def load_unified(manifest: str | os.PathLike, check_images: bool = True) -> list[AnnotatedSample]:
    """
    Read and validate a unified manifest.

    Every violation is reported with its line number; images must exist unless
    ``check_images`` is off.
    """
    path = Path(manifest)
    if not path.exists():
        raise ManifestError(f"Manifest not found: {path}")
    samples = []
    for lineno, record in read_manifest_lines(path):
        try:
            sample = AnnotatedSample.from_dict(record, base=path.parent)
        except (InvalidInput, ValueError, TypeError) as e:
            raise ManifestError(f"{path}: {e}", lineno) from e
        if check_images and not Path(sample.image_ref).exists():
            raise ManifestError(f"{path}: image not found: {sample.image_ref}", lineno)
        samples.append(sample)
    for source, count in sorted(count_by_source(samples).items()):
        log.info(f"{path.name}: {count} samples from {source}")
    return samples


def count_by_source(samples: Iterable[AnnotatedSample]) -> dict[str, int]:
    return dict(Counter(sample.source for sample in samples))


def write_manifest(samples: Iterable[AnnotatedSample], path: str | os.PathLike) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_dict(), sort_keys=True) + "\n")
            count += 1
    log.info(f"Wrote {count} samples to {path}")
    return count


def leave_one_subject_out(
    samples: Sequence[AnnotatedSample],
) -> Iterator[tuple[str, list[AnnotatedSample], list[AnnotatedSample]]]:
    """
    One fold per subject: (held-out subject, training samples, test samples).

    Samples without a subject are always in the training part.
    """
    subjects = sorted({s.subject for s in samples if s.subject is not None})
    if not subjects:
        raise InvalidInput("no sample carries a subject")
    for subject in subjects:
        train = [s for s in samples if s.subject != subject]
        test = [s for s in samples if s.subject == subject]
        yield subject, train, test

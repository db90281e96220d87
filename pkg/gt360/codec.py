"""
Image decoding, encoding and resizing.

Readers and writers are looked up by file suffix so other formats can be registered
without touching the callers.
"""

import logging
import os
from collections.abc import Callable
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .core import FrameImage
from .exceptions import InvalidInput

log = logging.getLogger(__name__)

Reader = Callable[[Path], FrameImage]
Writer = Callable[[Path, FrameImage], None]


def _pillow_read(path: Path) -> FrameImage:
    with Image.open(path) as image:
        return FrameImage(np.asarray(image.convert("RGB"), dtype=np.uint8))


def _pillow_write(path: Path, img: FrameImage) -> None:
    Image.fromarray(np.ascontiguousarray(img.pixels)).save(path)


_readers: dict[str, Reader] = {}
_writers: dict[str, Writer] = {}


def register_codec(suffixes, reader: Reader | None = None, writer: Writer | None = None):
    for suffix in suffixes:
        if reader is not None:
            _readers[suffix.lower()] = reader
        if writer is not None:
            _writers[suffix.lower()] = writer


register_codec([".png", ".jpg", ".jpeg", ".bmp"], _pillow_read, _pillow_write)


def read_image(path: str | os.PathLike) -> FrameImage:
    path = Path(path)
    reader = _readers.get(path.suffix.lower())
    if reader is None:
        raise InvalidInput(f"No image codec registered for '{path.suffix}'")
    if not path.exists():
        raise InvalidInput(f"Image not found: {path}")
    return reader(path)


def write_image(path: str | os.PathLike, img: FrameImage) -> None:
    path = Path(path)
    writer = _writers.get(path.suffix.lower())
    if writer is None:
        raise InvalidInput(f"No image codec registered for '{path.suffix}'")
    path.parent.mkdir(parents=True, exist_ok=True)
    writer(path, img)
    log.debug("Wrote %dx%d image to %s", img.width, img.height, path)


def image_size(path: str | os.PathLike) -> tuple[int, int]:
    """(width, height) without decoding the pixels"""
    with Image.open(path) as image:
        return image.size


def resize_frame(img: FrameImage, size) -> FrameImage:
    """Bilinear resize to ``size`` (height, width); the aspect ratio is not preserved"""
    height, width = size
    if (img.height, img.width) == (height, width):
        return img
    resized = cv2.resize(
        np.ascontiguousarray(img.pixels), (width, height), interpolation=cv2.INTER_LINEAR
    )
    return FrameImage(resized)


def write_heatmap(path: str | os.PathLike, values: np.ndarray) -> None:
    """Store heatmap values losslessly as a ``.npy`` array"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(values, dtype=np.float64), allow_pickle=False)


def read_heatmap(path: str | os.PathLike) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise InvalidInput(f"Could not read heatmap {path}: {e}") from e

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .codec import resize_frame
from .constants import GREEN, RED, WHITE
from .core import (
    FrameImage,
    GazeClass,
    GazeVerdict,
    HeadBox,
    HeadFailure,
    PipelineConfig,
    extract_point,
)
from .detect import DetectorHandle, detect_heads
from .exceptions import DegenerateCropError, Gt360Error
from .eyecontact import EcConfig, EcModel, batch_predict_ec, load_ec_model
from .gazenet import GazeModel, GazeNetConfig, decode_gaze, encode_scene, multiscale_fuse

log = logging.getLogger(__name__)

HeadResult = GazeVerdict | HeadFailure

TINT_ALPHA = 0.35
HEATMAP_ALPHA = 0.6


def classify(p_ec: float, p_ift: float, cfg: PipelineConfig) -> GazeClass:
    if p_ec >= cfg.sigma:
        return GazeClass.EC
    if p_ift >= cfg.ift_threshold:
        return GazeClass.IFT
    return GazeClass.OFT


@dataclass(frozen=True)
class Gt360System:
    detector: DetectorHandle
    ec: EcModel
    gaze: GazeModel
    config: PipelineConfig

    def __post_init__(self):
        if tuple(self.gaze.config.input_size) != self.config.input_size:
            raise Gt360Error(
                f"Gaze model input size {self.gaze.config.input_size} does not match the "
                f"pipeline input size {self.config.input_size}"
            )
        self.ec.eval()
        self.gaze.eval()

    @classmethod
    def from_config(
        cls,
        config,
        ec_weights=None,
        gaze_weights=None,
        detector: DetectorHandle | None = None,
        **overrides,
    ) -> "Gt360System":
        pipeline = PipelineConfig.from_config(config, **overrides)
        ec = load_ec_model(EcConfig.from_config(config), ec_weights or config["eyecontact.weights"])
        gaze_weights = gaze_weights or config["gazenet.weights"]
        if gaze_weights and Path(gaze_weights).is_dir():
            gaze = GazeModel.from_checkpoint(gaze_weights)
        else:
            gaze = GazeModel(GazeNetConfig.from_config(config))
            if gaze_weights:
                gaze.load(gaze_weights)
            else:
                log.warning("No gaze weights given; the gaze decoder is randomly initialised")
        return cls(detector or DetectorHandle.from_config(config), ec, gaze, pipeline)

    @property
    def sigma(self) -> float:
        return self.config.sigma


def _gaze_verdict(system: Gt360System, fused, head: HeadBox, p_ec: float) -> HeadResult:
    try:
        p_ift, hm = decode_gaze(system.gaze.decoder, fused, head)
    except Gt360Error as e:
        log.error(f"Gaze decoding failed for head {head.as_list()}: {e.message}")
        return HeadFailure(head, e.message)
    cls = classify(p_ec, p_ift, system.config)
    if cls is GazeClass.IFT:
        return GazeVerdict(head, cls, p_ec, p_ift, hm, extract_point(hm, system.config.point_mode))
    return GazeVerdict(head, cls, p_ec, p_ift)


def infer_frame(
    system: Gt360System, img: FrameImage, image_ref: str | None = None
) -> list[HeadResult]:
    """
    One result per detected head, in detection-confidence order.

    The gaze model only runs for heads below the eye-contact threshold, and the scene is only
    encoded when at least one such head exists. Detector failures abort the frame.
    """
    heads = detect_heads(system.detector, img, image_ref)
    if not heads:
        return []
    p_ecs = batch_predict_ec(system.ec, img, heads)

    results: list[HeadResult | None] = [None] * len(heads)
    pending = []
    for i, (head, p_ec) in enumerate(zip(heads, p_ecs, strict=True)):
        if isinstance(p_ec, DegenerateCropError):
            results[i] = HeadFailure(head, p_ec.message)
        elif p_ec >= system.sigma:
            results[i] = GazeVerdict(head, GazeClass.EC, p_ec)
        else:
            pending.append((i, head, p_ec))

    if pending:
        scene = resize_frame(img, system.config.input_size)
        fused = multiscale_fuse(system.gaze.decoder.msf, encode_scene(system.gaze.encoder, scene))
        if system.config.workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=system.config.workers) as pool:
                done = pool.map(lambda job: _gaze_verdict(system, fused, job[1], job[2]), pending)
                for (i, _head, _p), result in zip(pending, done, strict=True):
                    results[i] = result
        else:
            for i, head, p_ec in pending:
                results[i] = _gaze_verdict(system, fused, head, p_ec)

    log.debug(
        "Frame %s: %d heads, %d sent to the gaze model", image_ref, len(heads), len(pending)
    )
    return [r for r in results if r is not None]


def _pixel_box(head: HeadBox, width: int, height: int) -> tuple[int, int, int, int]:
    x0 = min(int(head.x_min * width), width - 1)
    y0 = min(int(head.y_min * height), height - 1)
    x1 = max(min(int(np.ceil(head.x_max * width)) - 1, width - 1), x0)
    y1 = max(min(int(np.ceil(head.y_max * height)) - 1, height - 1), y0)
    return x0, y0, x1, y1


def _to_pixel(point, width: int, height: int) -> tuple[int, int]:
    x, y = point
    return min(int(x * width), width - 1), min(int(y * height), height - 1)


def _tint(canvas: np.ndarray, box, color) -> None:
    x0, y0, x1, y1 = box
    region = canvas[y0 : y1 + 1, x0 : x1 + 1].astype(np.float64)
    blended = region * (1 - TINT_ALPHA) + np.asarray(color, dtype=np.float64) * TINT_ALPHA
    canvas[y0 : y1 + 1, x0 : x1 + 1] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def _blend_heatmap(canvas: np.ndarray, values: np.ndarray) -> np.ndarray:
    height, width = canvas.shape[:2]
    resized = cv2.resize(
        values.astype(np.float32), (width, height), interpolation=cv2.INTER_LINEAR
    )
    resized = np.clip(resized, 0.0, 1.0)
    colored = cv2.applyColorMap(np.rint(resized * 255).astype(np.uint8), cv2.COLORMAP_JET)
    colored = cv2.cvtColor(colored, cv2.COLOR_BGR2RGB).astype(np.float64)
    alpha = (resized * HEATMAP_ALPHA)[..., None]
    blended = canvas.astype(np.float64) * (1 - alpha) + colored * alpha
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def render_overlay(img: FrameImage, verdicts: Sequence[HeadResult]) -> FrameImage:
    """
    Draw verdicts on a copy of the frame.

    Head boxes are outlined in green; EC heads get a green tint, OFT heads a red tint. IFT heads
    get the blended heatmap, an arrow from the head centre to the target and a green dot on the
    target.
    """
    canvas = np.array(img.pixels, copy=True)
    height, width = canvas.shape[:2]
    for verdict in verdicts:
        if not isinstance(verdict, GazeVerdict):
            continue
        box = _pixel_box(verdict.head, width, height)
        if verdict.cls is GazeClass.EC:
            _tint(canvas, box, GREEN)
        elif verdict.cls is GazeClass.OFT:
            _tint(canvas, box, RED)
        elif verdict.heatmap is not None:
            canvas = _blend_heatmap(canvas, verdict.heatmap.values)
        cv2.rectangle(canvas, box[:2], box[2:], GREEN, 1, cv2.LINE_8)

    # markers go on top of every heatmap
    radius = max(3, min(width, height) // 80)
    for verdict in verdicts:
        if isinstance(verdict, GazeVerdict) and verdict.target_point is not None:
            start = _to_pixel(verdict.head.center, width, height)
            end = _to_pixel(verdict.target_point, width, height)
            cv2.arrowedLine(canvas, start, end, WHITE, 2, cv2.LINE_8, tipLength=0.05)
            cv2.circle(canvas, end, radius, GREEN, -1, cv2.LINE_8)
    return FrameImage(canvas)

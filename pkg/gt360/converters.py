"""
Converters from the public gaze datasets to the unified manifest format.

Each converter walks a dataset's own directory layout and yields ``AnnotatedSample`` records.
Unusable samples are logged and skipped, so a manifest never holds an invalid line.
"""

import csv
import logging
import os
import re
from collections.abc import Iterator
from pathlib import Path

import cv2
import numpy as np

from .codec import image_size, read_image, write_image
from .constants import COLUMBIA_NAME_RE
from .core import FrameImage, HeadBox
from .data import (
    AnnotatedSample,
    Gaze3dRecord,
    SampleLabel,
    label_ec_columbia,
    label_ec_mpii,
    sample_eyediap_frames,
    write_manifest,
)
from .detect import DetectorHandle, detect_heads
from .exceptions import DetectorError, InvalidInput

log = logging.getLogger(__name__)

# landmark box side multiplier for MPIIFaceGaze face crops
FACE_MARGIN = 2.2


class Converter:
    source = ""

    def __init__(self, in_dir, out_dir, detector: DetectorHandle | None = None):
        self.in_dir = Path(in_dir)
        self.out_dir = Path(out_dir)
        self.detector = detector
        self.skipped = 0

    def skip(self, where, reason) -> None:
        self.skipped += 1
        log.warning(f"{self.source}: skipping {where}: {reason}")

    def ref(self, path: Path) -> str:
        """Image reference relative to the manifest directory"""
        return os.path.relpath(path, self.out_dir)

    def detect_head(self, img: FrameImage, path: Path) -> HeadBox | None:
        if self.detector is None:
            raise DetectorError(f"The {self.source} converter needs a face detector")
        heads = detect_heads(self.detector, img, str(path))
        if not heads:
            self.skip(path, "no face detected")
            return None
        return heads[0]

    def samples(self) -> Iterator[AnnotatedSample]:
        raise NotImplementedError


class GazeFollowConverter(Converter):
    source = "gazefollow"

    def annotation_files(self) -> list[Path]:
        files = sorted(self.in_dir.glob("*annotations*.txt"))
        if not files:
            raise InvalidInput(f"No GazeFollow annotation files in {self.in_dir}")
        return files

    def samples(self) -> Iterator[AnnotatedSample]:
        for annotations in self.annotation_files():
            with open(annotations, newline="") as fh:
                for lineno, row in enumerate(csv.reader(fh), start=1):
                    where = f"{annotations.name}:{lineno}"
                    if len(row) < 14:
                        self.skip(where, f"expected at least 14 columns, got {len(row)}")
                        continue
                    image = self.in_dir / row[0]
                    if not image.exists():
                        self.skip(where, f"image not found: {row[0]}")
                        continue
                    try:
                        width, height = image_size(image)
                        x0, y0, x1, y1 = (float(v) for v in row[10:14])
                        head = HeadBox.from_pixels(x0, y0, x1, y1, width, height)
                        yield AnnotatedSample(
                            image_ref=self.ref(image),
                            head=head,
                            label=SampleLabel.IFT,
                            target=(float(row[8]), float(row[9])),
                            source=self.source,
                        )
                    except (InvalidInput, ValueError) as e:
                        self.skip(where, e)


class VatConverter(Converter):
    """VideoAttentionTarget: annotations/<split>/<show>/<clip>/<person>.txt"""

    source = "vat"

    def samples(self) -> Iterator[AnnotatedSample]:
        annotation_root = self.in_dir / "annotations"
        files = sorted(annotation_root.glob("*/*/*/*.txt"))
        if not files:
            raise InvalidInput(f"No VideoAttentionTarget annotations under {annotation_root}")
        for person in files:
            split_dir = person.parents[2]
            clip = person.parent.relative_to(split_dir)
            with open(person, newline="") as fh:
                for lineno, row in enumerate(csv.reader(fh), start=1):
                    where = f"{person.relative_to(self.in_dir)}:{lineno}"
                    if len(row) != 7:
                        self.skip(where, f"expected 7 columns, got {len(row)}")
                        continue
                    image = self.in_dir / "images" / clip / row[0]
                    if not image.exists():
                        self.skip(where, f"image not found: {image}")
                        continue
                    try:
                        width, height = image_size(image)
                        x0, y0, x1, y1, gx, gy = (float(v) for v in row[1:])
                        head = HeadBox.from_pixels(x0, y0, x1, y1, width, height)
                        if gx < 0 and gy < 0:
                            label, target = SampleLabel.OFT, None
                        else:
                            label, target = SampleLabel.IFT, (gx / width, gy / height)
                        yield AnnotatedSample(
                            image_ref=self.ref(image),
                            head=head,
                            label=label,
                            target=target,
                            source=self.source,
                            subject=person.stem,
                        )
                    except (InvalidInput, ValueError) as e:
                        self.skip(where, e)


class MpiiConverter(Converter):
    """MPIIFaceGaze: pXX/pXX.txt with landmarks, face centre and gaze target per image"""

    source = "mpii"

    @staticmethod
    def face_box(landmarks: np.ndarray, width: int, height: int) -> HeadBox:
        points = landmarks.reshape(6, 2)
        center = points.mean(axis=0)
        side = FACE_MARGIN * float(np.ptp(points, axis=0).max())
        x0, y0 = center - side / 2
        x1, y1 = center + side / 2
        return HeadBox.from_pixels(x0, y0, x1, y1, width, height)

    def samples(self) -> Iterator[AnnotatedSample]:
        subjects = sorted(p for p in self.in_dir.glob("p*") if p.is_dir())
        if not subjects:
            raise InvalidInput(f"No MPIIFaceGaze subject directories in {self.in_dir}")
        for subject in subjects:
            annotations = subject / f"{subject.name}.txt"
            if not annotations.exists():
                self.skip(subject, "annotation file missing")
                continue
            with open(annotations) as fh:
                for lineno, line in enumerate(fh, start=1):
                    where = f"{subject.name}.txt:{lineno}"
                    fields = line.split()
                    if len(fields) < 27:
                        self.skip(where, f"expected at least 27 columns, got {len(fields)}")
                        continue
                    image = subject / fields[0]
                    if not image.exists():
                        self.skip(where, f"image not found: {fields[0]}")
                        continue
                    try:
                        values = np.array([float(v) for v in fields[1:27]])
                        width, height = image_size(image)
                        record = Gaze3dRecord(tuple(values[20:23]), tuple(values[23:26]))
                        yield AnnotatedSample(
                            image_ref=self.ref(image),
                            head=self.face_box(values[2:14], width, height),
                            label=label_ec_mpii(record),
                            source=self.source,
                            subject=subject.name,
                        )
                    except (InvalidInput, ValueError) as e:
                        self.skip(where, e)


class ColumbiaConverter(Converter):
    """ColumbiaGaze: labels come from the file names, head boxes from the detector"""

    source = "columbia"

    def samples(self) -> Iterator[AnnotatedSample]:
        images = sorted(p for p in self.in_dir.rglob("*") if COLUMBIA_NAME_RE.match(p.name))
        if not images:
            raise InvalidInput(f"No ColumbiaGaze images in {self.in_dir}")
        for path in images:
            match = COLUMBIA_NAME_RE.match(path.name)
            head = self.detect_head(read_image(path), path)
            if head is None:
                continue
            yield AnnotatedSample(
                image_ref=self.ref(path),
                head=head,
                label=label_ec_columbia(
                    float(match.group("vertical")), float(match.group("horizontal"))
                ),
                source=self.source,
                subject=match.group("subject"),
            )


class EyediapConverter(Converter):
    """EYEDIAP floating-target sessions: ball_tracking.txt next to the RGB video"""

    source = "eyediap"
    video_names = ("rgb_vga.mov", "rgb_hd.mov", "rgb.mp4", "rgb.avi")

    def __init__(self, in_dir, out_dir, detector=None, per_video: int = 50):
        super().__init__(in_dir, out_dir, detector)
        self.per_video = per_video
        self.oft = 0
        self.total = 0

    @staticmethod
    def read_tracking(path: Path) -> dict[int, tuple[float, float]]:
        with open(path) as fh:
            rows = [re.split(r"[,;\s]+", line.strip()) for line in fh if line.strip()]
        if not rows:
            return {}
        header = [name.lower() for name in rows[0]]
        try:
            columns = [header.index(name) for name in ("frame", "ball_x", "ball_y")]
        except ValueError as e:
            raise InvalidInput(f"{path}: header needs frame, ball_x and ball_y") from e
        tracking = {}
        for row in rows[1:]:
            frame, x, y = (row[i] for i in columns)
            tracking[int(float(frame))] = (float(x), float(y))
        return tracking

    def video_for(self, session: Path) -> Path | None:
        for name in self.video_names:
            if (session / name).exists():
                return session / name
        return None

    def sessions(self) -> list[tuple[Path, Path, dict[int, tuple[float, float]], int]]:
        found = []
        for tracking_file in sorted(self.in_dir.rglob("ball_tracking.txt")):
            session = tracking_file.parent
            video = self.video_for(session)
            if video is None:
                self.skip(session, "no RGB video")
                continue
            tracking = self.read_tracking(tracking_file)
            capture = cv2.VideoCapture(str(video))
            frame_count = int(capture.get(cv2.CAP_PROP_FRAME_COUNT))
            capture.release()
            if frame_count < self.per_video:
                self.skip(session, f"{frame_count} frames, fewer than {self.per_video}")
                continue
            found.append((session, video, tracking, frame_count))
        if not found:
            raise InvalidInput(f"No usable EYEDIAP sessions with ball tracking in {self.in_dir}")
        return found

    def samples(self) -> Iterator[AnnotatedSample]:
        sessions = {session.name: rest for session, *rest in self.sessions()}
        index = [(name, count) for name, (_v, _t, count) in sessions.items()]
        frames_dir = self.out_dir / "eyediap_frames"
        capture = None
        current = None
        try:
            for name, frame in sample_eyediap_frames(index, self.per_video):
                video, tracking, _count = sessions[name]
                if current != name:
                    if capture is not None:
                        capture.release()
                    capture, current = cv2.VideoCapture(str(video)), name
                where = f"{name} frame {frame}"
                if frame not in tracking:
                    self.skip(where, "no ball position")
                    continue
                capture.set(cv2.CAP_PROP_POS_FRAMES, frame)
                ok, bgr = capture.read()
                if not ok:
                    self.skip(where, "could not decode the frame")
                    continue
                img = FrameImage(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))
                path = frames_dir / f"{name}_{frame:05d}.png"
                write_image(path, img)
                head = self.detect_head(img, path)
                if head is None:
                    continue
                bx, by = tracking[frame]
                if 0 <= bx < img.width and 0 <= by < img.height:
                    label, target = SampleLabel.IFT, (bx / img.width, by / img.height)
                else:
                    label, target = SampleLabel.OFT, None
                    self.oft += 1
                self.total += 1
                yield AnnotatedSample(
                    image_ref=self.ref(path),
                    head=head,
                    label=label,
                    target=target,
                    source=self.source,
                    subject=name,
                )
        finally:
            if capture is not None:
                capture.release()

    @property
    def oft_fraction(self) -> float:
        return self.oft / self.total if self.total else 0.0


CONVERTERS: dict[str, type[Converter]] = {
    "gazefollow": GazeFollowConverter,
    "vat": VatConverter,
    "mpii": MpiiConverter,
    "columbia": ColumbiaConverter,
    "eyediap": EyediapConverter,
}


def convert_dataset(
    source: str, in_dir, out_path, detector: DetectorHandle | None = None
) -> Converter:
    if source not in CONVERTERS:
        raise InvalidInput(
            f"Unknown dataset source '{source}' (available: {', '.join(sorted(CONVERTERS))})"
        )
    out_path = Path(out_path)
    converter = CONVERTERS[source](in_dir, out_path.parent, detector)
    count = write_manifest(converter.samples(), out_path)
    log.info(f"{source}: converted {count} samples, skipped {converter.skipped}")
    if isinstance(converter, EyediapConverter):
        log.info(f"eyediap: OFT fraction {converter.oft_fraction:.3f}")
    return converter

import logging
from pathlib import Path

import numpy as np
import pytest

from gt360 import converters
from gt360.codec import write_image
from gt360.converters import CONVERTERS, EyediapConverter, MpiiConverter, convert_dataset
from gt360.core import HeadBox
from gt360.data import SampleLabel, load_unified
from gt360.detect import DetectorHandle
from gt360.exceptions import DetectorError, InvalidInput

from .conftest import make_frame


@pytest.fixture
def out_path(tmp_path):
    return tmp_path.joinpath("out", "manifest.jsonl")


def test_registry():
    assert sorted(CONVERTERS) == ["columbia", "eyediap", "gazefollow", "mpii", "vat"]


def test_unknown_source(tmp_path, out_path):
    with pytest.raises(InvalidInput, match="Unknown dataset source 'coco'"):
        convert_dataset("coco", tmp_path, out_path)


def test_gazefollow(tmp_path, out_path, caplog):
    root = tmp_path.joinpath("gazefollow")
    write_image(root.joinpath("train", "0001.png"), make_frame(40, 40))
    root.joinpath("train_annotations_release.txt").write_text(
        "train/0001.png,0,0,0,0,0,0.5,0.5,0.25,0.75,10,10,30,30,1\n"
        "train/missing.png,0,0,0,0,0,0.5,0.5,0.25,0.75,10,10,30,30,1\n"
        "train/0001.png,0,0\n"
    )
    with caplog.at_level(logging.WARNING):
        converter = convert_dataset("gazefollow", root, out_path)
    assert converter.skipped == 2
    assert "image not found" in caplog.text
    (sample,) = load_unified(out_path)
    assert sample.label is SampleLabel.IFT
    assert sample.target == (0.25, 0.75)
    assert sample.head.as_list() == [0.25, 0.25, 0.75, 0.75]
    assert sample.source == "gazefollow"


def test_gazefollow_without_annotations(tmp_path, out_path):
    with pytest.raises(InvalidInput, match="No GazeFollow annotation files"):
        convert_dataset("gazefollow", tmp_path, out_path)


def test_vat(tmp_path, out_path):
    root = tmp_path.joinpath("vat")
    for name in ("00001.png", "00002.png"):
        write_image(root.joinpath("images", "Show", "clip1", name), make_frame(50, 100))
    annotations = root.joinpath("annotations", "train", "Show", "clip1")
    annotations.mkdir(parents=True)
    annotations.joinpath("s00.txt").write_text(
        "00001.png,10,5,30,25,50,40\n00002.png,10,5,30,25,-1,-1\n"
    )
    convert_dataset("vat", root, out_path)
    ift, oft = load_unified(out_path)
    assert ift.label is SampleLabel.IFT
    assert ift.target == (0.5, 0.8)
    assert ift.subject == "s00"
    assert oft.label is SampleLabel.OFT
    assert oft.target is None


def _mpii_line(name, fc, gt):
    values = [0.0, 0.0]
    values += [40, 30, 60, 30, 45, 35, 55, 35, 45, 50, 55, 50]
    values += [0.0] * 6
    values += list(fc) + list(gt)
    values.append(0.0)
    return " ".join([name] + [str(v) for v in values])


def test_mpii(tmp_path, out_path):
    root = tmp_path.joinpath("mpii")
    subject = root.joinpath("p00")
    write_image(subject.joinpath("day01", "0001.png"), make_frame(80, 100))
    write_image(subject.joinpath("day01", "0002.png"), make_frame(80, 100))
    subject.joinpath("p00.txt").write_text(
        _mpii_line("day01/0001.png", (0, 0, 600), (0, 0, 0))
        + "\n"
        + _mpii_line("day01/0002.png", (0, 0, 600), (100, 0, 0))
        + "\n"
    )
    convert_dataset("mpii", root, out_path)
    looking, away = load_unified(out_path)
    assert looking.label is SampleLabel.EC
    assert away.label is SampleLabel.OFT
    assert looking.subject == "p00"
    assert looking.head.contains(0.5, 38.33 / 80)


def test_mpii_face_box():
    landmarks = np.array([40, 30, 60, 30, 45, 35, 55, 35, 45, 50, 55, 50], dtype=float)
    box = MpiiConverter.face_box(landmarks, 100, 80)
    # side = 2.2 * 20 around the landmark centroid (50, 38.33)
    assert box.x_min == pytest.approx(28 / 100)
    assert box.x_max == pytest.approx(72 / 100)
    assert box.center == pytest.approx((0.5, (115 / 3) / 80))


def test_columbia(tmp_path, out_path):
    root = tmp_path.joinpath("columbia")
    write_image(root.joinpath("0001", "0001_2m_0P_0V_0H.png"), make_frame(40, 40))
    write_image(root.joinpath("0001", "0001_2m_15P_10V_-5H.png"), make_frame(40, 40))
    write_image(root.joinpath("0001", "notes.png"), make_frame(4, 4))
    det = DetectorHandle("stub", boxes=[HeadBox(0.2, 0.2, 0.8, 0.8)])
    convert_dataset("columbia", root, out_path, det)
    samples = load_unified(out_path)
    assert [s.label for s in samples] == [SampleLabel.EC, SampleLabel.OFT]
    assert {s.subject for s in samples} == {"0001"}


def test_columbia_needs_detector(tmp_path, out_path):
    write_image(tmp_path.joinpath("0001_2m_0P_0V_0H.png"), make_frame(8, 8))
    with pytest.raises(DetectorError, match="needs a face detector"):
        convert_dataset("columbia", tmp_path, out_path)


def test_columbia_no_face(tmp_path, out_path):
    write_image(tmp_path.joinpath("0001_2m_0P_0V_0H.png"), make_frame(8, 8))
    converter = convert_dataset("columbia", tmp_path, out_path, DetectorHandle("stub"))
    assert converter.skipped == 1
    assert load_unified(out_path) == []


def test_eyediap_tracking_file(tmp_path):
    path = tmp_path.joinpath("ball_tracking.txt")
    path.write_text("frame;ball_x;ball_y\n0;10.5;20\n3;-4;7\n")
    assert EyediapConverter.read_tracking(path) == {0: (10.5, 20.0), 3: (-4.0, 7.0)}


def test_eyediap_tracking_header(tmp_path):
    path = tmp_path.joinpath("ball_tracking.txt")
    path.write_text("a b c\n1 2 3\n")
    with pytest.raises(InvalidInput, match="frame, ball_x and ball_y"):
        EyediapConverter.read_tracking(path)


class ScriptedCapture:
    """Stands in for cv2.VideoCapture; the frame count comes from the session directory"""

    frame_counts: dict[str, int] = {}

    def __init__(self, path):
        self.count = self.frame_counts[Path(path).parent.name]
        self.pos = 0

    def get(self, prop):
        return float(self.count)

    def set(self, prop, value):
        self.pos = int(value)

    def read(self):
        return True, np.full((40, 60, 3), self.pos % 256, dtype=np.uint8)

    def release(self):
        pass


@pytest.fixture
def eyediap_root(tmp_path, monkeypatch):
    def _build(frame_counts):
        root = tmp_path.joinpath("eyediap")
        for name, count in frame_counts.items():
            session = root.joinpath(name)
            session.mkdir(parents=True)
            session.joinpath("rgb_vga.mov").write_bytes(b"")
            # the ball is inside the 60x40 frame for the first 60 frames, then left of it
            rows = [f"{f};{30 if f < 60 else -5};20" for f in range(count)]
            session.joinpath("ball_tracking.txt").write_text(
                "frame;ball_x;ball_y\n" + "\n".join(rows) + "\n"
            )
        monkeypatch.setattr(ScriptedCapture, "frame_counts", frame_counts)
        monkeypatch.setattr(converters.cv2, "VideoCapture", ScriptedCapture)
        return root

    return _build


def test_eyediap_skips_short_sessions(eyediap_root, out_path, caplog):
    root = eyediap_root({"s1": 120, "s2": 20, "s3": 0})
    det = DetectorHandle("stub", boxes=[HeadBox(0.2, 0.2, 0.8, 0.8)])
    with caplog.at_level(logging.WARNING):
        converter = convert_dataset("eyediap", root, out_path, det)
    assert converter.skipped == 2
    assert "s2: 20 frames, fewer than 50" in caplog.text
    assert "s3: 0 frames, fewer than 50" in caplog.text
    samples = load_unified(out_path)
    assert len(samples) == 50
    assert {s.subject for s in samples} == {"s1"}
    # frames floor(i * 2.4) lie inside the frame for i < 25
    assert sum(s.label is SampleLabel.IFT for s in samples) == 25
    assert converter.oft_fraction == 0.5


def test_eyediap_no_usable_session(eyediap_root, out_path):
    root = eyediap_root({"s1": 10})
    with pytest.raises(InvalidInput, match="No usable EYEDIAP sessions"):
        convert_dataset("eyediap", root, out_path, DetectorHandle("stub"))

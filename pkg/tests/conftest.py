import json

import numpy as np
import pytest

from gt360.codec import write_image
from gt360.config import load_config
from gt360.core import FrameImage, HeadBox, PipelineConfig
from gt360.data import AnnotatedSample, write_manifest
from gt360.detect import DetectorHandle
from gt360.eyecontact import EcConfig, EcModel
from gt360.gazenet import GazeModel, GazeNetConfig
from gt360.pipeline import Gt360System

SMALL_INPUT = (64, 64)

# environment understood by load_config for a desk-sized model and scripted detections
TINY_ENV = {
    "GT360_DETECTOR__BACKEND": "stub",
    "GT360_PIPELINE__INPUT_SIZE": "[64, 64]",
    "GT360_GAZENET__PATCH_SIZE": "16",
    "GT360_EYECONTACT__INPUT_SIZE": "[32, 32]",
}


def make_frame(height=120, width=160, seed=0) -> FrameImage:
    rng = np.random.default_rng(seed)
    return FrameImage(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


def gray_frame(height=120, width=160, value=128) -> FrameImage:
    return FrameImage(np.full((height, width, 3), value, dtype=np.uint8))


@pytest.fixture
def config():
    return load_config(environ=TINY_ENV)


@pytest.fixture
def frame():
    return make_frame()


@pytest.fixture
def gaze_model():
    return GazeModel(GazeNetConfig(patch_size=16, input_size=SMALL_INPUT))


@pytest.fixture
def ec_model():
    return EcModel(EcConfig(input_size=(32, 32)))


@pytest.fixture
def heads():
    return [
        HeadBox(0.1, 0.1, 0.3, 0.4, confidence=0.9),
        HeadBox(0.6, 0.2, 0.8, 0.5, confidence=0.7),
    ]


@pytest.fixture
def system(ec_model, gaze_model, heads):
    return Gt360System(
        DetectorHandle("stub", boxes=heads),
        ec_model,
        gaze_model,
        PipelineConfig(input_size=SMALL_INPUT),
    )


@pytest.fixture
def stub_sidecar(tmp_path):
    def _write(records):
        path = tmp_path.joinpath("detections.jsonl")
        with open(path, "w") as fh:
            for record in records:
                fh.write(json.dumps(record) + "\n")
        return path

    return _write


@pytest.fixture
def ift_manifest(tmp_path):
    """Four in-frame samples on 64x64 frames, one per quadrant"""
    samples = []
    targets = [(0.2, 0.2), (0.8, 0.2), (0.2, 0.8), (0.8, 0.8)]
    for i, target in enumerate(targets):
        path = tmp_path.joinpath("frames", f"{i:04d}.png")
        write_image(path, make_frame(64, 64, seed=i))
        samples.append(
            AnnotatedSample(
                image_ref=str(path),
                head=HeadBox(0.4, 0.4, 0.6, 0.6),
                label="IFT",
                target=target,
                source="gazefollow",
                subject=f"s{i % 2}",
            )
        )
    manifest = tmp_path.joinpath("train.jsonl")
    write_manifest(samples, manifest)
    return manifest

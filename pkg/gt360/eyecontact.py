"""
Eye-contact classifier on cropped heads.

Crops are padded, resized to the model input (the aspect ratio is not preserved) and normalized
before a convolutional backbone emits one logit per head.
"""

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import resnet18

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .constants import EC_INPUT_SIZE, IMAGENET_MEAN, IMAGENET_STD
from .core import FrameImage, HeadBox, crop_head
from .exceptions import DegenerateCropError, InvalidInput

log = logging.getLogger(__name__)

BACKBONES = ("standin", "resnet18")
# keeps the probability strictly inside (0, 1)
PROB_EPS = 1e-12


@dataclass(frozen=True)
class EcConfig:
    backbone: str = "standin"
    input_size: tuple[int, int] = EC_INPUT_SIZE
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    crop_pad: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        if self.backbone not in BACKBONES:
            raise InvalidInput(
                f"Unknown eye-contact backbone '{self.backbone}' "
                f"(available: {', '.join(BACKBONES)})"
            )
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise InvalidInput("eye-contact mean and std need three values, std > 0")
        if min(self.input_size) < 8:
            raise InvalidInput(f"eye-contact input size too small: {self.input_size}")

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("input_size", "mean", "std"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_config(cls, config, **overrides) -> "EcConfig":
        values = {
            "backbone": config["eyecontact.backbone"],
            "input_size": config["eyecontact.input_size"],
            "mean": config["eyecontact.mean"],
            "std": config["eyecontact.std"],
            "crop_pad": config["pipeline.crop_pad"],
        }
        values.update(overrides)
        return cls(**values)


class StandInNet(nn.Module):
    """Small trainable classifier used when no pre-trained eye-contact weights are available"""

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.fc = nn.Linear(64, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))


def build_backbone(name: str) -> nn.Module:
    if name == "standin":
        return StandInNet()
    net = resnet18(weights=None)
    net.fc = nn.Linear(net.fc.in_features, 1)
    return net


class EcModel(nn.Module):
    kind = "eyecontact"

    def __init__(self, config: EcConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or EcConfig()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.backbone = build_backbone(self.config.backbone)
        self.register_buffer("mean", torch.tensor(self.config.mean).view(3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(self.config.std).view(3, 1, 1), persistent=False)
        self.eval()

    @property
    def input_size(self) -> tuple[int, int]:
        return self.config.input_size

    @property
    def head(self) -> nn.Linear:
        """The final fully-connected layer producing the logit"""
        return self.backbone.fc

    def preprocess(self, img: FrameImage, box: HeadBox) -> torch.Tensor:
        crop = crop_head(img, box, self.config.crop_pad)
        x = torch.from_numpy(np.ascontiguousarray(crop.pixels)).permute(2, 0, 1).float() / 255.0
        x = F.interpolate(x[None], size=self.input_size, mode="bilinear", align_corners=False)[0]
        return (x - self.mean) / self.std

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x).squeeze(-1)

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        """Evaluation-mode P_EC for a preprocessed batch, computed in float64"""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                logits = self(x)
        finally:
            self.train(was_training)
        return torch.sigmoid(logits.double()).clamp(PROB_EPS, 1 - PROB_EPS)

    def save(self, directory, stage: str | None = "eyecontact"):
        params = sum(p.numel() for p in self.parameters() if p.requires_grad)
        return save_checkpoint(
            directory, self.state_dict(), self.kind, self.config.to_dict(), params, stage
        )

    def load(self, path) -> dict | None:
        tensors, manifest = load_checkpoint(
            path, self.state_dict(), self.kind, self.config.to_dict()
        )
        self.load_state_dict(tensors)
        return manifest

    @classmethod
    def from_checkpoint(cls, path) -> "EcModel":
        manifest = read_manifest(path)
        model = cls(EcConfig(**manifest["config"]))
        model.load(path)
        return model


def load_ec_model(config: EcConfig, weights=None, seed: int = 0) -> EcModel:
    """
    Build the eye-contact model, loading ``weights`` when given.

    A checkpoint directory brings its own config; a bare weights file must fit ``config``.
    Without weights the configured backbone is replaced by the trainable stand-in.
    """
    if weights and Path(weights).is_dir():
        return EcModel.from_checkpoint(weights)
    if weights:
        model = EcModel(config, seed=seed)
        model.load(weights)
        return model
    if config.backbone != "standin":
        log.warning(
            f"No weights for the '{config.backbone}' eye-contact backbone; "
            "falling back to the stand-in classifier"
        )
        config = EcConfig(**{**config.to_dict(), "backbone": "standin"})
    return EcModel(config, seed=seed)


def predict_ec(model: EcModel, img: FrameImage, box: HeadBox) -> float:
    x = model.preprocess(img, box)
    return float(model.probabilities(x[None])[0])


def batch_predict_ec(
    model: EcModel, img: FrameImage, boxes: Sequence[HeadBox]
) -> list[float | DegenerateCropError]:
    """
    P_EC for every box in one forward pass.

    A box whose crop is degenerate yields its DegenerateCropError in place of a probability;
    the other elements are unaffected.
    """
    results: list[float | DegenerateCropError] = []
    crops = []
    for box in boxes:
        try:
            crops.append(model.preprocess(img, box))
            results.append(0.0)
        except DegenerateCropError as e:
            log.warning(f"Skipping eye-contact prediction: {e.message}")
            results.append(e)
    if crops:
        probs = iter(model.probabilities(torch.stack(crops)).tolist())
        results = [r if isinstance(r, DegenerateCropError) else next(probs) for r in results]
    return results

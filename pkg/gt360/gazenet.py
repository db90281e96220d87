"""
Scene encoder, multi-scale fusion and the gaze decoder.

The encoder is always frozen. The decoder fuses the encoder's token grid at three
receptive-field scales, marks the prompted head on the fused grid, runs a single transformer
block and emits an in-frame probability and a 64x64 target heatmap.
"""

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from itertools import chain

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .constants import HEATMAP_SIZE, IMAGENET_MEAN, IMAGENET_STD, INPUT_SIZE, SCALE_FACTORS
from .core import FrameImage, HeadBox, HeatmapGrid
from .exceptions import InvalidInput, ShapeError

log = logging.getLogger(__name__)

HUB_REPO = "facebookresearch/dinov2"
HUB_ENCODERS = {"dinov2_vits14": 384, "dinov2_vitb14": 768, "dinov2_vitl14": 1024}


@dataclass(frozen=True)
class MsfConfig:
    fusion_channels: int
    scale_factors: tuple[float, ...] = SCALE_FACTORS

    def __post_init__(self):
        object.__setattr__(self, "scale_factors", tuple(float(s) for s in self.scale_factors))
        if self.scale_factors != SCALE_FACTORS:
            raise InvalidInput(f"scale_factors must be {SCALE_FACTORS}, got {self.scale_factors}")
        if self.fusion_channels < 1:
            raise InvalidInput(f"fusion_channels must be >= 1, got {self.fusion_channels}")

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(int(round(1 / s)) for s in self.scale_factors)


@dataclass(frozen=True)
class GazeNetConfig:
    encoder: str = "tiny"
    patch_size: int = 32
    embed_dim: int = 64
    decoder_dim: int = 32
    num_heads: int = 4
    heatmap_channels: tuple[int, int] = (32, 16)
    input_size: tuple[int, int] = INPUT_SIZE
    encoder_seed: int = 0
    scale_factors: tuple[float, ...] = field(default=SCALE_FACTORS)

    def __post_init__(self):
        object.__setattr__(self, "heatmap_channels", tuple(int(c) for c in self.heatmap_channels))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "scale_factors", tuple(float(s) for s in self.scale_factors))
        if self.encoder != "tiny" and self.encoder not in HUB_ENCODERS:
            raise InvalidInput(f"Unknown encoder '{self.encoder}'")
        if self.encoder in HUB_ENCODERS and (
            self.patch_size != 14 or self.embed_dim != HUB_ENCODERS[self.encoder]
        ):
            raise InvalidInput(
                f"{self.encoder} has patch size 14 and embedding size {HUB_ENCODERS[self.encoder]}"
            )
        if self.input_size[0] != self.input_size[1] or self.input_size[0] % self.patch_size:
            raise InvalidInput(
                f"input size {self.input_size} must be square and divisible by {self.patch_size}"
            )
        if self.decoder_dim % 4 or self.decoder_dim % self.num_heads:
            raise InvalidInput(
                f"decoder_dim {self.decoder_dim} must be divisible by 4 and by num_heads"
            )
        if len(self.heatmap_channels) != 2:
            raise InvalidInput("heatmap_channels needs two hidden channel counts")

    @property
    def grid_size(self) -> int:
        return self.input_size[0] // self.patch_size

    def to_dict(self) -> dict:
        data = asdict(self)
        data["heatmap_channels"] = list(self.heatmap_channels)
        data["input_size"] = list(self.input_size)
        data["scale_factors"] = list(self.scale_factors)
        return data

    @classmethod
    def from_dict(cls, data) -> "GazeNetConfig":
        return cls(**data)

    @classmethod
    def from_config(cls, config, **overrides) -> "GazeNetConfig":
        values = {
            "encoder": config["gazenet.encoder"],
            "patch_size": config["gazenet.patch_size"],
            "embed_dim": config["gazenet.embed_dim"],
            "decoder_dim": config["gazenet.decoder_dim"],
            "num_heads": config["gazenet.num_heads"],
            "heatmap_channels": config["gazenet.heatmap_channels"],
            "input_size": config["pipeline.input_size"],
        }
        values.update(overrides)
        return cls(**values)

    @classmethod
    def vitb14(cls) -> "GazeNetConfig":
        """Full-size configuration on a DINOv2 ViT-B/14 encoder (1,944,634 learnable)"""
        return cls(
            encoder="dinov2_vitb14",
            patch_size=14,
            embed_dim=768,
            decoder_dim=256,
            num_heads=8,
            heatmap_channels=(184, 64),
        )


def sincos_2d(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2D sine-cosine position table of shape (grid * grid, dim), row-major"""
    if dim % 4:
        raise InvalidInput(f"position encoding size must be divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    coords = torch.arange(grid, dtype=torch.float64)
    ys, xs = torch.meshgrid(coords, coords, indexing="ij")
    out_x = xs.reshape(-1, 1) * omega[None]
    out_y = ys.reshape(-1, 1) * omega[None]
    table = torch.cat([out_x.sin(), out_x.cos(), out_y.sin(), out_y.cos()], dim=1)
    return table.float()


def head_mask(box: HeadBox, grid: int) -> torch.Tensor:
    """Token cells whose centre falls inside the head box; at least the cell under its centre"""
    centers = (torch.arange(grid, dtype=torch.float64) + 0.5) / grid
    inside_x = (centers >= box.x_min) & (centers <= box.x_max)
    inside_y = (centers >= box.y_min) & (centers <= box.y_max)
    mask = inside_y[:, None] & inside_x[None, :]
    if not mask.any():
        cx, cy = box.center
        mask[min(int(cy * grid), grid - 1), min(int(cx * grid), grid - 1)] = True
    return mask.float()


class TinyEncoder(nn.Module):
    """Desk-scale stand-in for a pre-trained ViT: patch embedding plus one transformer layer"""

    def __init__(self, patch_size: int, embed_dim: int, grid_size: int):
        super().__init__()
        self.patch_embed = nn.Conv2d(3, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.register_buffer("pos_embed", sincos_2d(grid_size, embed_dim), persistent=False)
        self.block = nn.TransformerEncoderLayer(
            embed_dim,
            max(1, embed_dim // 16),
            dim_feedforward=2 * embed_dim,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        return self.norm(self.block(tokens))


class HubEncoder(nn.Module):
    def __init__(self, name: str):
        super().__init__()
        self.model = torch.hub.load(HUB_REPO, name)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model.forward_features(x)["x_norm_patchtokens"]


class EncoderAdapter(nn.Module):
    def __init__(
        self,
        backbone_name: str,
        patch_size: int,
        embed_dim: int,
        input_size: Sequence[int] = INPUT_SIZE,
        seed: int = 0,
    ):
        super().__init__()
        self.backbone_name = backbone_name
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.input_size = tuple(input_size)
        if backbone_name == "tiny":
            # the stand-in weights only depend on the seed
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                self.backbone = TinyEncoder(patch_size, embed_dim, self.grid_size)
        elif backbone_name in HUB_ENCODERS:
            self.backbone = HubEncoder(backbone_name)
        else:
            raise InvalidInput(f"Unknown encoder backbone '{backbone_name}'")
        self.freeze()

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    @property
    def external(self) -> bool:
        """Whether the weights come from outside the checkpoint"""
        return self.backbone_name in HUB_ENCODERS

    @property
    def grid_size(self) -> int:
        return self.input_size[0] // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size**2

    def freeze(self) -> None:
        for param in self.parameters():
            param.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True) -> "EncoderAdapter":
        # stays in evaluation mode whatever the surrounding model does
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) != self.input_size:
            raise ShapeError("scene input", self.input_size, tuple(x.shape[-2:]))
        with torch.no_grad():
            return self.backbone(x)


class MultiScaleFusion(nn.Module):
    def __init__(self, in_dim: int, config: MsfConfig):
        super().__init__()
        self.config = config
        self.branches = nn.ModuleList(
            nn.Conv2d(in_dim, config.fusion_channels, kernel_size=1) for _ in config.strides
        )

    @staticmethod
    def to_map(features: torch.Tensor) -> torch.Tensor:
        """(B, N, D) row-major tokens to a (B, D, s, s) map"""
        batch, tokens, dim = features.shape
        side = int(round(tokens**0.5))
        if side * side != tokens:
            raise ShapeError("token grid", "a square number of tokens", tokens)
        return features.reshape(batch, side, side, dim).permute(0, 3, 1, 2)

    def branch_maps(self, features: torch.Tensor) -> list[torch.Tensor]:
        base = self.to_map(features)
        size = base.shape[-2:]
        maps = []
        for stride, conv in zip(self.config.strides, self.branches, strict=True):
            pooled = base if stride == 1 else F.avg_pool2d(base, stride, stride, ceil_mode=True)
            aligned = conv(pooled)
            if aligned.shape[-2:] != size:
                aligned = F.interpolate(aligned, size=size, mode="nearest")
            maps.append(aligned)
        return maps

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.stack(self.branch_maps(features)).sum(dim=0)


class GazeDecoder(nn.Module):
    vit_blocks = 1

    def __init__(
        self,
        in_dim: int,
        grid_size: int,
        dim: int,
        num_heads: int,
        heatmap_channels: Sequence[int],
        heatmap_size: int = HEATMAP_SIZE,
    ):
        super().__init__()
        self.grid_size = grid_size
        self.heatmap_size = heatmap_size
        self.msf = MultiScaleFusion(in_dim, MsfConfig(fusion_channels=dim))
        self.head_prompt = nn.Parameter(torch.randn(dim))
        self.inout_token = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.register_buffer("pos_embed", sincos_2d(grid_size, dim), persistent=False)
        self.block = nn.TransformerEncoderLayer(
            dim,
            num_heads,
            dim_feedforward=4 * dim,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        self.inout_head = nn.Sequential(
            nn.Linear(dim, dim // 2),
            nn.ReLU(),
            nn.Linear(dim // 2, 1),
        )
        hidden1, hidden2 = heatmap_channels
        self.heatmap_head = nn.Sequential(
            nn.Conv2d(dim, hidden1, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden1, hidden2, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden2, 1, kernel_size=3, padding=1),
        )

    @property
    def learnable_param_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def fuse(self, features: torch.Tensor) -> torch.Tensor:
        return self.msf(features)

    def decode(self, fused: torch.Tensor, masks: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Decode a fused (B, C, s, s) grid for the heads marked in (B, s, s) masks.

        Returns the in/out logits (B,) and heatmap logits (B, 64, 64).
        """
        batch, channels, side, _ = fused.shape
        if side != self.grid_size or masks.shape[-2:] != (side, side):
            raise ShapeError("fused grid", (self.grid_size, self.grid_size), tuple(fused.shape))
        x = fused + masks[:, None] * self.head_prompt[None, :, None, None]
        tokens = x.flatten(2).transpose(1, 2) + self.pos_embed
        tokens = torch.cat([self.inout_token.expand(batch, -1, -1), tokens], dim=1)
        tokens = self.block(tokens)
        inout = self.inout_head(tokens[:, 0]).squeeze(-1)
        grid = tokens[:, 1:].transpose(1, 2).reshape(batch, channels, side, side)
        grid = F.interpolate(
            grid, size=(self.heatmap_size, self.heatmap_size), mode="bilinear", align_corners=False
        )
        heatmap = self.heatmap_head(grid).squeeze(1)
        return inout, heatmap

    def forward(
        self, features: torch.Tensor, masks: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self.decode(self.fuse(features), masks)


class GazeModel(nn.Module):
    kind = "gazenet"

    def __init__(self, config: GazeNetConfig):
        super().__init__()
        self.config = config
        self.encoder = EncoderAdapter(
            config.encoder,
            config.patch_size,
            config.embed_dim,
            config.input_size,
            seed=config.encoder_seed,
        )
        self.decoder = GazeDecoder(
            config.embed_dim,
            config.grid_size,
            config.decoder_dim,
            config.num_heads,
            config.heatmap_channels,
        )
        log.info(
            f"Built gaze model ({config.encoder} encoder) with "
            f"{count_learnable_params(self.decoder, self.encoder)} learnable parameters"
        )

    def forward(self, images: torch.Tensor, masks: torch.Tensor):
        return self.decoder(self.encoder(images), masks)

    def checkpoint_state(self) -> dict[str, torch.Tensor]:
        state = self.state_dict()
        if self.encoder.external:
            state = {k: v for k, v in state.items() if not k.startswith("encoder.")}
        return state

    def save(self, directory, stage: str | None = None):
        return save_checkpoint(
            directory,
            self.checkpoint_state(),
            self.kind,
            self.config.to_dict(),
            count_learnable_params(self.decoder, self.encoder),
            stage,
        )

    def load(self, path) -> dict | None:
        tensors, manifest = load_checkpoint(
            path, self.checkpoint_state(), self.kind, self.config.to_dict()
        )
        self.load_state_dict(tensors, strict=not self.encoder.external)
        return manifest

    @classmethod
    def from_checkpoint(cls, path) -> "GazeModel":
        manifest = read_manifest(path)
        model = cls(GazeNetConfig.from_dict(manifest["config"]))
        model.load(path)
        return model


def scene_tensor(img: FrameImage, input_size: Sequence[int] | None = None) -> torch.Tensor:
    """(3, H, W) ImageNet-normalized tensor, optionally resized to ``input_size`` (h, w)"""
    x = torch.from_numpy(np.ascontiguousarray(img.pixels)).permute(2, 0, 1).float() / 255.0
    if input_size is not None and tuple(x.shape[-2:]) != tuple(input_size):
        x = F.interpolate(
            x[None], size=tuple(input_size), mode="bilinear", align_corners=False
        )[0]
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (x - mean) / std


def encode_scene(enc: EncoderAdapter, img: FrameImage) -> torch.Tensor:
    """Token features (N, D) of a frame already resized to the encoder's input size"""
    if (img.height, img.width) != enc.input_size:
        raise ShapeError("scene image", enc.input_size, (img.height, img.width))
    return enc(scene_tensor(img)[None])[0]


def multiscale_fuse(msf: MultiScaleFusion, features: torch.Tensor) -> torch.Tensor:
    """Fuse a (N, D) or (B, N, D) token grid into (C, s, s) or (B, C, s, s)"""
    if features.dim() == 2:
        return msf(features[None])[0]
    return msf(features)


def decode_gaze(dec: GazeDecoder, fused: torch.Tensor, head: HeadBox) -> tuple[float, HeatmapGrid]:
    was_training = dec.training
    dec.eval()
    try:
        with torch.no_grad():
            mask = head_mask(head, dec.grid_size).to(fused.dtype)
            inout, heatmap = dec.decode(fused[None], mask[None])
    finally:
        dec.train(was_training)
    p_ift = float(torch.sigmoid(inout[0].double()).clamp(1e-12, 1 - 1e-12))
    values = torch.sigmoid(heatmap[0].double()).numpy()
    return p_ift, HeatmapGrid(values)


def count_learnable_params(dec: nn.Module, enc: nn.Module | None = None) -> int:
    params = chain(dec.parameters(), enc.parameters() if enc is not None else ())
    return sum(p.numel() for p in params if p.requires_grad)

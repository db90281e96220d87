"""
Training for the gaze decoder and the stand-in eye-contact classifier.

The gaze decoder trains in two stages: a heatmap-only pre-training stage on in-frame targets,
then a fine-tuning stage adding the in/out loss. Heatmap losses of samples whose target is out
of frame are masked to zero. The encoder stays frozen throughout.
"""

import csv
import logging
import math
import os
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .codec import read_image, resize_frame
from .constants import GT_SIGMA_CELLS, HEATMAP_SIZE, INPUT_SIZE
from .core import HeatmapGrid, argmax_point
from .data import AnnotatedSample, SampleLabel, augment, gaussian_grid, leave_one_subject_out
from .eval import average_precision, ec_prf, heatmap_auc, point_distance
from .exceptions import InvalidInput, NonFiniteLossError, ShapeError, StageMismatchError
from .eyecontact import EcModel, predict_ec
from .gazenet import GazeModel, head_mask, scene_tensor
from .utils import seed_everything

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "split", "loss_hm", "loss_io", "lr", "auc", "l2", "ap")
PRF_KEYS = ("precision", "recall", "f1")


class Stage(str, Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"
    EYECONTACT = "eyecontact"


class LrSchedule(str, Enum):
    CONSTANT = "constant"
    COSINE_DECAY = "cosine"


@dataclass(frozen=True)
class TrainConfig:
    stage: Stage = Stage.PRETRAIN
    epochs: int = 15
    warmup_epochs: int = 0
    lr: float = 1e-3
    lr_schedule: LrSchedule = LrSchedule.COSINE_DECAY
    warmup_mode: str = "constant"
    batch_size: int = 32
    lambda_: float = 1.0
    weight_decay: float = 0.01
    num_workers: int = 0
    gt_sigma: float = GT_SIGMA_CELLS
    augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        object.__setattr__(self, "lr_schedule", LrSchedule(self.lr_schedule))
        if self.lambda_ < 0:
            raise InvalidInput(f"lambda must be >= 0, got {self.lambda_}")
        if self.batch_size < 1:
            raise InvalidInput(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise InvalidInput(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise InvalidInput(
                f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}"
            )
        if self.warmup_mode not in ("constant", "linear"):
            raise InvalidInput(f"Unknown warm-up mode '{self.warmup_mode}'")
        if self.lr <= 0:
            raise InvalidInput(f"lr must be > 0, got {self.lr}")

    @classmethod
    def from_config(cls, config, stage, **overrides) -> "TrainConfig":
        """Shared ``train.*`` keys plus the schedule of the stage's own section"""
        stage = Stage(stage)
        section = f"train.{stage.value}"
        values = {
            "stage": stage,
            "epochs": config[f"{section}.epochs"],
            "warmup_epochs": config[f"{section}.warmup_epochs"],
            "lr": config[f"{section}.lr"],
            "lr_schedule": config["train.lr_schedule"],
            "warmup_mode": config["train.warmup_mode"],
            "batch_size": config["train.batch_size"],
            "lambda_": config["train.lambda"],
            "weight_decay": config["train.weight_decay"],
            "num_workers": config["train.num_workers"],
            "gt_sigma": config["train.gt_sigma"],
            "augment": config["train.augment"],
        }
        values.update(overrides)
        return cls(**values)

    @classmethod
    def recipe(cls, stage) -> "TrainConfig":
        """Full-scale schedules: 15 pre-training epochs, then 5 warm-up + 10 fine-tuning"""
        if Stage(stage) is Stage.FINETUNE:
            return cls(stage=Stage.FINETUNE, epochs=15, warmup_epochs=5, lr=1e-5)
        return cls(stage=Stage(stage), epochs=15, lr=1e-3)


def _as_tensor(value) -> torch.Tensor:
    if isinstance(value, HeatmapGrid):
        return torch.from_numpy(np.array(value.values))
    if isinstance(value, torch.Tensor):
        return value
    return torch.as_tensor(value, dtype=torch.float64)


def heatmap_loss(pred, gt, is_ift) -> torch.Tensor:
    """
    Pixel-wise binary cross-entropy, averaged over cells and over the in-frame samples.

    ``pred`` and ``gt`` are (64, 64) or (B, 64, 64); ``is_ift`` is a flag or (B,) mask. Samples
    without an in-frame target contribute exactly zero loss and zero gradient.
    """
    pred = _as_tensor(pred)
    gt = _as_tensor(gt).to(pred.dtype)
    if pred.shape[-2:] != (HEATMAP_SIZE, HEATMAP_SIZE) or pred.shape != gt.shape:
        raise ShapeError("heatmap loss", tuple(gt.shape), tuple(pred.shape))
    if pred.dim() == 2:
        pred, gt = pred[None], gt[None]
    mask = torch.as_tensor(is_ift, dtype=pred.dtype, device=pred.device).reshape(-1)
    if mask.numel() != pred.shape[0]:
        raise ShapeError("heatmap loss mask", (pred.shape[0],), tuple(mask.shape))
    per_sample = F.binary_cross_entropy(pred, gt, reduction="none").mean(dim=(-2, -1))
    return (per_sample * mask).sum() / mask.sum().clamp(min=1.0)


def inout_loss(p_ift, label_in) -> torch.Tensor:
    p_ift = _as_tensor(p_ift)
    label = torch.as_tensor(label_in, dtype=p_ift.dtype, device=p_ift.device)
    return F.binary_cross_entropy(p_ift, label.expand_as(p_ift))


def total_loss(hm, io, cfg: TrainConfig):
    if cfg.stage is Stage.FINETUNE:
        return hm + cfg.lambda_ * io
    return hm


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """
    Learning rate at ``step`` of ``total_steps``.

    The first warmup_epochs/epochs of the steps hold the base rate (or ramp up linearly from 0);
    the rest follow a half cosine from the base rate down to 0 at ``total_steps``.
    """
    if not 0 <= step <= total_steps:
        raise InvalidInput(f"step {step} outside [0, {total_steps}]")
    warmup_steps = round(total_steps * cfg.warmup_epochs / cfg.epochs)
    if step < warmup_steps:
        if cfg.warmup_mode == "linear":
            return cfg.lr * step / warmup_steps
        return cfg.lr
    if cfg.lr_schedule is LrSchedule.CONSTANT:
        return cfg.lr
    main_steps = total_steps - warmup_steps
    progress = (step - warmup_steps) / main_steps if main_steps > 0 else 1.0
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def check_stage_data(samples: Sequence[AnnotatedSample], stage: Stage) -> None:
    if not samples:
        raise StageMismatchError(f"No training samples for the {stage.value} stage")
    if stage is Stage.PRETRAIN:
        bad = [s for s in samples if not s.is_ift]
        if bad:
            raise StageMismatchError(
                f"Pre-training needs in-frame targets; {len(bad)} samples are labelled "
                f"{sorted({s.label.value for s in bad})}"
            )
    else:
        unknown = sum(1 for s in samples if s.label is SampleLabel.UNKNOWN)
        if unknown:
            raise StageMismatchError(
                f"The {stage.value} stage needs labelled samples; {unknown} are UNKNOWN"
            )


class GazeDataset(Dataset):
    """
    Materialized training tensors per sample.

    Augmentation seeds derive from (seed, epoch, index), so loading is reproducible with any
    number of workers.
    """

    def __init__(
        self,
        samples: Sequence[AnnotatedSample],
        grid_size: int,
        input_size: Sequence[int] = INPUT_SIZE,
        gt_sigma: float = GT_SIGMA_CELLS,
        augment: bool = False,
        seed: int = 0,
    ):
        self.samples = list(samples)
        self.grid_size = grid_size
        self.input_size = tuple(input_size)
        self.gt_sigma = gt_sigma
        self.augment = augment
        self.seed = seed
        self.epoch = 0

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> dict[str, torch.Tensor]:
        sample = self.samples[index]
        img = read_image(sample.image_ref)
        if self.augment:
            seed = (self.seed * 1_000_003 + self.epoch * len(self) + index) % 2**63
            img, sample = augment(img, sample, seed, self.input_size)
        else:
            img = resize_frame(img, self.input_size)
        if sample.is_ift:
            heatmap = torch.from_numpy(gaussian_grid(sample.target, HEATMAP_SIZE, self.gt_sigma))
        else:
            heatmap = torch.zeros(HEATMAP_SIZE, HEATMAP_SIZE, dtype=torch.float64)
        return {
            "image": scene_tensor(img),
            "mask": head_mask(sample.head, self.grid_size),
            "heatmap": heatmap.float(),
            "is_ift": torch.tensor(float(sample.is_ift)),
        }


class EcCropDataset(Dataset):
    def __init__(self, samples: Sequence[AnnotatedSample], model: EcModel):
        self.samples = list(samples)
        self.model = model

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> dict[str, torch.Tensor]:
        sample = self.samples[index]
        return {
            "image": self.model.preprocess(read_image(sample.image_ref), sample.head),
            "label": torch.tensor(float(sample.label is SampleLabel.EC)),
        }


@dataclass
class EpochLog:
    epoch: int
    split: str
    loss_hm: float | None
    loss_io: float | None
    lr: float | None
    auc: float | None = None
    l2: float | None = None
    ap: float | None = None

    def row(self) -> list[str]:
        return ["" if v is None else str(v) for v in (getattr(self, c) for c in CSV_COLUMNS)]


@dataclass
class StageResult:
    history: list[EpochLog] = field(default_factory=list)
    checkpoint: Path | None = None

    @property
    def train_losses(self) -> list[float]:
        return [
            (e.loss_hm or 0.0) + (e.loss_io or 0.0) for e in self.history if e.split == "train"
        ]


def write_metrics(history: Sequence[EpochLog], path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for entry in history:
            writer.writerow(entry.row())


def _loader(dataset: Dataset, cfg: TrainConfig, generator: torch.Generator | None, shuffle: bool):
    return DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=shuffle,
        generator=generator,
        num_workers=cfg.num_workers,
    )


def _check_finite(loss: torch.Tensor, epoch: int, step: int, parts: dict[str, float]) -> None:
    if not torch.isfinite(loss):
        details = ", ".join(f"{k}={v}" for k, v in parts.items())
        raise NonFiniteLossError(
            f"Non-finite loss at epoch {epoch + 1}, step {step}: {float(loss)} ({details})"
        )


def validate(
    model: GazeModel,
    samples: Sequence[AnnotatedSample],
    cfg: TrainConfig,
    epoch: int = 0,
    auc_mode: str = "disk",
) -> EpochLog:
    """Losses plus heatmap AUC, mean L2 and in/out AP on held-out samples"""
    dataset = GazeDataset(samples, model.decoder.grid_size, model.config.input_size, cfg.gt_sigma)
    was_training = model.training
    model.eval()
    losses_hm, losses_io, p_ifts, heatmaps = [], [], [], []
    try:
        with torch.no_grad():
            for batch in _loader(dataset, cfg, None, shuffle=False):
                inout, logits = model(batch["image"], batch["mask"])
                p_ift, probs = torch.sigmoid(inout), torch.sigmoid(logits)
                losses_hm.append(float(heatmap_loss(probs, batch["heatmap"], batch["is_ift"])))
                losses_io.append(float(inout_loss(p_ift, batch["is_ift"])))
                p_ifts.extend(p_ift.tolist())
                heatmaps.extend(probs.double().numpy())
    finally:
        model.train(was_training)

    aucs, l2s = [], []
    for sample, values in zip(samples, heatmaps, strict=True):
        if sample.is_ift:
            aucs.append(heatmap_auc(values, sample.target, auc_mode))
            l2s.append(point_distance(argmax_point(HeatmapGrid(values)), sample.target))
    labels = [s.is_ift for s in samples]
    ap = average_precision(list(zip(p_ifts, labels))) if len(set(labels)) == 2 else None
    return EpochLog(
        epoch,
        "val",
        float(np.mean(losses_hm)),
        float(np.mean(losses_io)),
        None,
        float(np.mean(aucs)) if aucs else None,
        float(np.mean(l2s)) if l2s else None,
        ap,
    )


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def run_stage(
    model: GazeModel,
    data: Sequence[AnnotatedSample],
    cfg: TrainConfig,
    seed: int,
    out_dir: str | os.PathLike | None = None,
    val_data: Sequence[AnnotatedSample] | None = None,
) -> StageResult:
    """
    Train the gaze decoder for one stage.

    Only decoder parameters are optimized. With ``out_dir`` the checkpoint and ``metrics.csv``
    are written there.
    """
    if cfg.stage is Stage.EYECONTACT:
        raise StageMismatchError("Use run_ec_stage for the eye-contact stage")
    check_stage_data(data, cfg.stage)
    generator = seed_everything(seed)
    deterministic = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True, warn_only=True)
    result = StageResult()
    try:
        dataset = GazeDataset(
            data,
            model.decoder.grid_size,
            model.config.input_size,
            cfg.gt_sigma,
            cfg.augment,
            seed,
        )
        loader = _loader(dataset, cfg, generator, shuffle=True)
        params = [p for p in model.decoder.parameters() if p.requires_grad]
        optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        total_steps = cfg.epochs * len(loader)
        finetune = cfg.stage is Stage.FINETUNE
        log.info(
            f"Starting {cfg.stage.value}: {len(data)} samples, {cfg.epochs} epochs, "
            f"{total_steps} steps"
        )
        model.train()
        step = 0
        for epoch in range(cfg.epochs):
            dataset.epoch = epoch
            sum_hm = sum_io = 0.0
            lr = cfg.lr
            for batch in loader:
                lr = lr_at(step, total_steps, cfg)
                _set_lr(optimizer, lr)
                inout, logits = model(batch["image"], batch["mask"])
                loss_hm = heatmap_loss(torch.sigmoid(logits), batch["heatmap"], batch["is_ift"])
                loss_io = inout_loss(torch.sigmoid(inout), batch["is_ift"])
                loss = total_loss(loss_hm, loss_io, cfg)
                _check_finite(
                    loss, epoch, step, {"loss_hm": float(loss_hm), "loss_io": float(loss_io)}
                )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                sum_hm += float(loss_hm)
                sum_io += float(loss_io)
                step += 1
            entry = EpochLog(
                epoch + 1,
                "train",
                sum_hm / len(loader),
                sum_io / len(loader) if finetune else None,
                lr,
            )
            result.history.append(entry)
            log.info(
                f"{cfg.stage.value} epoch {entry.epoch}/{cfg.epochs}: loss_hm={entry.loss_hm:.5f}"
                + (f" loss_io={entry.loss_io:.5f}" if finetune else "")
                + f" lr={lr:.3g}"
            )
            if val_data:
                result.history.append(validate(model, val_data, cfg, epoch + 1))
    finally:
        torch.use_deterministic_algorithms(deterministic)
        model.eval()

    if out_dir is not None:
        result.checkpoint = model.save(out_dir, stage=cfg.stage.value)
        write_metrics(result.history, Path(out_dir) / "metrics.csv")
    return result


def run_ec_stage(
    model: EcModel,
    data: Sequence[AnnotatedSample],
    cfg: TrainConfig,
    seed: int,
    out_dir: str | os.PathLike | None = None,
) -> StageResult:
    """Train the eye-contact classifier on head crops; EC is the positive class"""
    check_stage_data(data, Stage.EYECONTACT)
    generator = seed_everything(seed)
    deterministic = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True, warn_only=True)
    result = StageResult()
    try:
        loader = _loader(EcCropDataset(data, model), cfg, generator, shuffle=True)
        params = [p for p in model.parameters() if p.requires_grad]
        optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        total_steps = cfg.epochs * len(loader)
        model.train()
        step = 0
        for epoch in range(cfg.epochs):
            total = 0.0
            lr = cfg.lr
            for batch in loader:
                lr = lr_at(step, total_steps, cfg)
                _set_lr(optimizer, lr)
                loss = F.binary_cross_entropy_with_logits(model(batch["image"]), batch["label"])
                _check_finite(loss, epoch, step, {"loss_ec": float(loss)})
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += float(loss)
                step += 1
            entry = EpochLog(epoch + 1, "train", None, total / len(loader), lr)
            result.history.append(entry)
            log.info(f"eyecontact epoch {entry.epoch}/{cfg.epochs}: loss={entry.loss_io:.5f}")
    finally:
        torch.use_deterministic_algorithms(deterministic)
        model.eval()

    if out_dir is not None:
        result.checkpoint = model.save(out_dir)
        write_metrics(result.history, Path(out_dir) / "metrics.csv")
    return result


def run_ec_loso(
    make_model: Callable[[], EcModel],
    data: Sequence[AnnotatedSample],
    cfg: TrainConfig,
    seed: int,
    sigma: float,
) -> dict[str, Any]:
    """
    Leave-one-subject-out eye-contact evaluation.

    A fresh model from ``make_model`` is trained on every fold and scored on the held-out
    subject; a crop counts as EC at ``p_ec >= sigma``. Folds whose subject has no EC sample
    carry no precision, recall or F1 and are left out of the mean.
    """
    check_stage_data(data, Stage.EYECONTACT)
    folds: dict[str, dict[str, Any]] = {}
    for subject, train_part, test_part in leave_one_subject_out(data):
        model = make_model()
        run_ec_stage(model, train_part, cfg, seed)
        truths = [s.label is SampleLabel.EC for s in test_part]
        preds = [predict_ec(model, read_image(s.image_ref), s.head) >= sigma for s in test_part]
        fold: dict[str, Any] = {"samples": len(test_part), **dict.fromkeys(PRF_KEYS)}
        if any(truths):
            fold["precision"], fold["recall"], fold["f1"] = ec_prf(preds, truths)
        else:
            log.warning(f"Subject {subject} has no eye-contact samples; no P/R/F1 for the fold")
        folds[subject] = fold
        log.info(f"LOSO fold {subject}: {fold}")
    scored = [fold for fold in folds.values() if fold["f1"] is not None]
    mean = {
        key: float(np.mean([fold[key] for fold in scored])) if scored else None
        for key in PRF_KEYS
    }
    return {"folds": folds, "mean": mean}

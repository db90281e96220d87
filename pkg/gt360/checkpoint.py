"""
Checkpoint directories.

A checkpoint is a directory holding ``weights.pt``, a ``torch.save``d mapping of tensor name
to tensor, and ``manifest.json``::

    {
        "format": 1,
        "kind": "gazenet" | "eyecontact",
        "config": {...},
        "config_hash": "<sha256 of the canonical config JSON>",
        "param_count": <learnable parameters>,
        "stage": "pretrain" | "finetune" | "eyecontact" | null
    }

A bare ``.pt`` file holding only the tensor mapping is accepted too; it is checked tensor by
tensor but has no config hash to compare.
"""

import json
import logging
import os
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import torch

from .exceptions import CheckpointError
from .utils import config_hash

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
WEIGHTS_FILE = "weights.pt"
MANIFEST_FILE = "manifest.json"


def save_checkpoint(
    directory: str | os.PathLike,
    state: Mapping[str, torch.Tensor],
    kind: str,
    config: Mapping[str, Any],
    param_count: int,
    stage: str | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {name: tensor.detach().cpu().contiguous().clone() for name, tensor in state.items()}
    torch.save(tensors, directory / WEIGHTS_FILE)
    manifest = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "config": dict(config),
        "config_hash": config_hash(config),
        "param_count": int(param_count),
        "stage": stage,
    }
    with open(directory / MANIFEST_FILE, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info(f"Saved {kind} checkpoint ({param_count} learnable parameters) to {directory}")
    return directory


def read_manifest(directory: str | os.PathLike) -> dict[str, Any]:
    path = Path(directory) / MANIFEST_FILE
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as e:
        raise CheckpointError(f"Checkpoint manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Checkpoint manifest is not valid JSON: {path}") from e
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format: {manifest.get('format')}")
    return manifest


def check_tensors(
    loaded: Mapping[str, torch.Tensor], expected: Mapping[str, torch.Tensor]
) -> None:
    """Raise CheckpointError naming the first tensor that does not match the model"""
    for name, tensor in expected.items():
        if name not in loaded:
            raise CheckpointError(f"Checkpoint schema mismatch: missing tensor '{name}'")
        if not isinstance(loaded[name], torch.Tensor):
            raise CheckpointError(f"Checkpoint schema mismatch: '{name}' is not a tensor")
        if tuple(loaded[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"Checkpoint schema mismatch: tensor '{name}' has shape "
                f"{tuple(loaded[name].shape)}, expected {tuple(tensor.shape)}"
            )
    for name in loaded:
        if name not in expected:
            raise CheckpointError(f"Checkpoint schema mismatch: unexpected tensor '{name}'")


def load_checkpoint(
    path: str | os.PathLike,
    expected: Mapping[str, torch.Tensor],
    kind: str,
    config: Mapping[str, Any] | None = None,
) -> tuple[dict[str, torch.Tensor], dict[str, Any] | None]:
    """
    Load and validate tensors for a model.

    ``expected`` is the model's own state (names and shapes); ``config`` is the model config the
    manifest hash must match. Returns the tensors and the manifest (None for a bare file).
    """
    path = Path(path)
    manifest = None
    if path.is_dir():
        manifest = read_manifest(path)
        if manifest.get("kind") != kind:
            raise CheckpointError(
                f"Checkpoint at {path} holds a '{manifest.get('kind')}' model, not '{kind}'"
            )
        if config is not None and manifest.get("config_hash") != config_hash(config):
            raise CheckpointError(
                f"Checkpoint config hash mismatch at {path}: the checkpoint was trained with "
                f"{manifest.get('config')}"
            )
        weights = path / WEIGHTS_FILE
    else:
        weights = path
    try:
        loaded = torch.load(weights, map_location="cpu", weights_only=True)
    except FileNotFoundError as e:
        raise CheckpointError(f"Checkpoint weights not found: {weights}") from e
    except Exception as e:
        raise CheckpointError(f"Could not read checkpoint weights {weights}: {e}") from e
    if not isinstance(loaded, Mapping):
        raise CheckpointError(f"Checkpoint {weights} does not hold a tensor mapping")
    check_tensors(loaded, expected)
    log.info(f"Loaded {kind} weights from {path}")
    return dict(loaded), manifest

from .checkpoints import CheckpointClient, resolve_weights

__all__ = ["CheckpointClient", "resolve_weights"]

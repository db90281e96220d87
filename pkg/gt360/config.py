import json
import logging
import os
import tomllib
from collections.abc import Iterator, Mapping
from pathlib import Path
from typing import Any

from mautrix.util.config import BaseProxyConfig, ConfigUpdateHelper, RecursiveDict
from ruamel.yaml import YAML
from ruamel.yaml.comments import CommentedMap

from .constants import ENV_PREFIX, ENV_SEPARATOR
from .exceptions import ConfigError

log = logging.getLogger(__name__)

BASE_CONFIG_PATH = Path(__file__).parent.joinpath("base-config.yaml")


class Config(BaseProxyConfig):
    def do_update(self, helper: ConfigUpdateHelper) -> None:
        helper.copy("detector.backend")
        helper.copy("detector.min_confidence")
        helper.copy("detector.stub_path")
        helper.copy("detector.upsample")
        helper.copy("pipeline.sigma")
        helper.copy("pipeline.ift_threshold")
        helper.copy("pipeline.heatmap_size")
        helper.copy("pipeline.input_size")
        helper.copy("pipeline.crop_pad")
        helper.copy("pipeline.point_mode")
        helper.copy("pipeline.workers")
        helper.copy("eyecontact.backbone")
        helper.copy("eyecontact.input_size")
        helper.copy("eyecontact.mean")
        helper.copy("eyecontact.std")
        helper.copy("eyecontact.weights")
        helper.copy("gazenet.encoder")
        helper.copy("gazenet.patch_size")
        helper.copy("gazenet.embed_dim")
        helper.copy("gazenet.decoder_dim")
        helper.copy("gazenet.num_heads")
        helper.copy("gazenet.heatmap_channels")
        helper.copy("gazenet.weights")
        for stage in ("pretrain", "finetune", "eyecontact"):
            helper.copy(f"train.{stage}.epochs")
            helper.copy(f"train.{stage}.warmup_epochs")
            helper.copy(f"train.{stage}.lr")
        helper.copy("train.lr_schedule")
        helper.copy("train.warmup_mode")
        helper.copy("train.batch_size")
        helper.copy("train.lambda")
        helper.copy("train.weight_decay")
        helper.copy("train.num_workers")
        helper.copy("train.gt_sigma")
        helper.copy("train.augment")
        helper.copy("eval.auc_mode")
        helper.copy("clients.cache_dir")
        helper.copy("clients.timeout")
        helper.copy("clients.max_tries")


def load_base_config() -> RecursiveDict:
    yaml = YAML()
    with open(BASE_CONFIG_PATH) as fh:
        return RecursiveDict(yaml.load(fh), CommentedMap)


def flatten(data: Mapping, prefix: str = "") -> Iterator[tuple[str, Any]]:
    for key, value in data.items():
        path = f"{prefix}{key}"
        if isinstance(value, Mapping):
            yield from flatten(value, f"{path}.")
        else:
            yield path, value


def _nest(flat: Mapping[str, Any]) -> dict:
    nested: dict = {}
    for path, value in flat.items():
        node = nested
        *parents, leaf = path.split(".")
        for parent in parents:
            node = node.setdefault(parent, {})
        node[leaf] = value
    return nested


def coerce(key: str, raw: str, default: Any) -> Any:
    """Convert an environment string to the type of the default it overrides"""
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered in {"1", "true", "yes", "on"}:
                return True
            if lowered in {"0", "false", "no", "off"}:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            value = json.loads(raw)
            if not isinstance(value, list):
                raise ValueError(raw)
            return value
    except ValueError as e:
        raise ConfigError(key, f"Invalid value for '{key}': {raw!r}") from e
    return raw


def env_overrides(environ: Mapping[str, str], defaults: Mapping[str, Any]) -> dict[str, Any]:
    overrides = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX) :].lower().replace(ENV_SEPARATOR, ".")
        if key not in defaults:
            raise ConfigError(key, f"Unknown configuration key '{key}' (from {name})")
        overrides[key] = coerce(key, raw, defaults[key])
    return overrides


def read_config_file(path: str | os.PathLike | None) -> dict[str, Any]:
    if not path:
        return {}
    with open(path, "rb") as fh:
        return dict(flatten(tomllib.load(fh)))


def load_config(
    path: str | os.PathLike | None = None,
    environ: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> Config:
    """
    Build the effective configuration.

    Precedence is overrides (command-line flags) > environment > config file > defaults.
    """
    base = load_base_config()
    defaults = dict(flatten(base._data))

    user = read_config_file(path)
    for key in user:
        if key not in defaults:
            raise ConfigError(key)
    user.update(env_overrides(os.environ if environ is None else environ, defaults))
    for key, value in (overrides or {}).items():
        if key not in defaults:
            raise ConfigError(key)
        if value is not None:
            user[key] = value

    config = Config(lambda: _nest(user), lambda: base, lambda c: None)
    config.load_and_update()
    log.debug("Loaded configuration with %d user-provided keys", len(user))
    return config

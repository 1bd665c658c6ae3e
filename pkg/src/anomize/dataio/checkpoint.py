"""JSON checkpoint container with a SHA-256 content digest."""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .features import atomic_write_bytes

FORMAT_VERSION = 1


class CheckpointCorruptError(ValueError):
    pass


class CheckpointMigrationError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    stage: str
    epoch: int
    version: int = FORMAT_VERSION


def _body(ckpt: Checkpoint) -> dict:
    return {
        "format_version": ckpt.version,
        "config": ckpt.config,
        "cursor": {"stage": ckpt.stage, "epoch": ckpt.epoch},
        "params": [
            {"name": name, "shape": list(arr.shape),
             "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")}
            for name, arr in sorted(ckpt.params.items())
        ],
    }


def _digest(body: dict) -> str:
    canon = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(canon).hexdigest()


def save_checkpoint(path, model=None, *, stage: str = "init", epoch: int = 0, checkpoint: Checkpoint | None = None) -> str:
    """Write ``model`` (or a prepared ``checkpoint``) and return its digest."""
    if checkpoint is None:
        checkpoint = Checkpoint(model.config.to_dict(), model.state_dict(), stage, epoch)
    body = _body(checkpoint)
    digest = _digest(body)
    body["digest"] = digest
    atomic_write_bytes(path, json.dumps(body, sort_keys=True, indent=1).encode("utf-8"))
    return digest


def load_checkpoint(path, expected_config: dict | None = None) -> Checkpoint:
    raw = open(path, "rb").read()
    try:
        body = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable checkpoint container ({exc})") from None
    digest = body.pop("digest", None)
    if digest != _digest(body):
        raise CheckpointCorruptError(f"{path}: content digest mismatch")
    version = body.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointMigrationError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    config = body["config"]
    if expected_config is not None:
        for key in ("d", "heads"):
            if key in expected_config and expected_config[key] != config.get(key):
                raise CheckpointMigrationError(
                    f"{path}: checkpoint has {key}={config.get(key)}, config asks for {expected_config[key]}")
    params = {}
    for entry in body["params"]:
        buf = base64.b64decode(entry["data"])
        params[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(config, params, body["cursor"]["stage"], int(body["cursor"]["epoch"]), version)


def restore_model(path, expected_config: dict | None = None):
    from ..model import Anomize, ModelConfig

    ckpt = load_checkpoint(path, expected_config)
    model = Anomize(ModelConfig.from_dict(ckpt.config))
    model.load_state_dict(ckpt.params)
    return model, ckpt

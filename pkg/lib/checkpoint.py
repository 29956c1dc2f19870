"""
Encoder checkpoints on disk.

A checkpoint is a directory holding `checkpoint.json` (config, parameter
names and shapes in blob order, training metadata) and `weights.bin`, the raw
little-endian float64 parameters concatenated in manifest order.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np

from lib.config import EncoderConfig
from lib.encoder import EncoderWeights, parameter_shapes
from lib.errors import FormatError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "checkpoint.json"
BLOB_NAME = "weights.bin"
FORMAT_TAG = "splat-align-checkpoint"
FORMAT_VERSION = 1


@dataclass
class ModelCheckpoint:
    config: EncoderConfig
    weights: EncoderWeights
    metadata: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(checkpoint: ModelCheckpoint, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    checkpoint.weights.check(checkpoint.config)
    names = list(parameter_shapes(checkpoint.config))
    manifest = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "config": checkpoint.config.to_dict(),
        "parameters": [{"name": n, "shape": list(checkpoint.weights[n].shape)} for n in names],
        "metadata": checkpoint.metadata,
    }
    with open(path / BLOB_NAME, "wb") as f:
        for name in names:
            f.write(np.ascontiguousarray(checkpoint.weights[name], dtype="<f8").tobytes())
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=False))
    logger.info(f"Saved checkpoint with {len(names)} parameters to {path}")
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    blob_path = path / BLOB_NAME
    if not manifest_path.exists() or not blob_path.exists():
        raise FileNotFoundError(f"Checkpoint directory {path} needs {MANIFEST_NAME} and {BLOB_NAME}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path} is not valid JSON: {e}") from e
    if manifest.get("format") != FORMAT_TAG:
        raise FormatError(f"{manifest_path} is not a splat-align checkpoint")

    config = EncoderConfig.from_dict(manifest["config"])
    blob = np.frombuffer(blob_path.read_bytes(), dtype="<f8")
    expected = sum(int(np.prod(p["shape"])) for p in manifest["parameters"])
    if blob.size != expected:
        raise FormatError(f"{blob_path} holds {blob.size} values, manifest expects {expected}")

    params = {}
    offset = 0
    for entry in manifest["parameters"]:
        size = int(np.prod(entry["shape"]))
        params[entry["name"]] = blob[offset:offset + size].reshape(entry["shape"]).astype(np.float64)
        offset += size
    weights = EncoderWeights(params)
    weights.check(config)
    return ModelCheckpoint(config=config, weights=weights, metadata=manifest.get("metadata", {}))

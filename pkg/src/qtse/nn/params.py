"""Parameter containers and the checkpoint format.

A checkpoint is a ``.npz`` archive holding one array per parameter plus a
``__manifest__`` entry: JSON with the format version, the architecture
description, the init seed and every tensor's name and shape.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

CHECKPOINT_VERSION = 1
_MANIFEST_KEY = "__manifest__"


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    seed: int = 0
    arch: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise ValueError(f"parameter {name} has non-finite entries")

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}

    @property
    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.seed, dict(self.arch))


def save_checkpoint(params: ModelParams, path) -> Path:
    path = Path(path)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "arch": params.arch,
        "seed": params.seed,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    arrays = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.tensors.items()}
    arrays[_MANIFEST_KEY] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, expected_shapes: dict[str, tuple] | None = None) -> ModelParams:
    """Load a checkpoint, rejecting any tensor whose shape disagrees with
    its manifest or with ``expected_shapes``."""
    try:
        data = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from exc
    with data:
        if _MANIFEST_KEY not in data:
            raise CheckpointError(f"{path}: missing manifest")
        manifest = json.loads(bytes(data[_MANIFEST_KEY]).decode())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {manifest.get('version')}")
        tensors = {}
        for entry in manifest["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in data:
                raise CheckpointError(f"{path}: tensor {name} listed but absent")
            arr = data[name]
            if arr.shape != shape:
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, manifest says {shape}")
            tensors[name] = arr
    if expected_shapes is not None:
        if set(expected_shapes) != set(tensors):
            missing = set(expected_shapes) ^ set(tensors)
            raise CheckpointError(f"{path}: parameter names differ from the model: {sorted(missing)}")
        for name, shape in expected_shapes.items():
            if tensors[name].shape != tuple(shape):
                raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, model needs {tuple(shape)}")
    return ModelParams(tensors, manifest.get("seed", 0), manifest.get("arch", {}))

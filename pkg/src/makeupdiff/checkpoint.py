"""Single-file checkpoints: named arrays plus a JSON header, stored as ``.npz``."""
from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np
import torch

from makeupdiff.diffusion import ModelConfig, TransferModel

CHECKPOINT_SCHEMA = 1
_HEADER_KEY = "__header__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: TransferModel, path: str | os.PathLike, **extra) -> None:
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    header = {
        "schema_version": CHECKPOINT_SCHEMA,
        "model": dataclasses.asdict(model.cfg),
        "parameter_count": int(sum(p.numel() for p in model.parameters())),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        **extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **{_HEADER_KEY: np.array(json.dumps(header, sort_keys=True))}, **state)


def read_header(path: str | os.PathLike) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return json.loads(str(z[_HEADER_KEY]))


def load_checkpoint(path: str | os.PathLike) -> TransferModel:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if _HEADER_KEY not in z:
            raise CheckpointError(f"{path}: no header")
        header = json.loads(str(z[_HEADER_KEY]))
        if header.get("schema_version") != CHECKPOINT_SCHEMA:
            raise CheckpointError(f"{path}: schema {header.get('schema_version')} != {CHECKPOINT_SCHEMA}")
        model = TransferModel(ModelConfig(**header["model"]), seed=None)
        expected = model.state_dict()
        arrays = {k: z[k] for k in z.files if k != _HEADER_KEY}
    if set(arrays) != set(expected):
        missing, unexpected = set(expected) - set(arrays), set(arrays) - set(expected)
        raise CheckpointError(f"{path}: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    for k, v in arrays.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise CheckpointError(f"{path}: {k} has shape {v.shape}, expected {tuple(expected[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    model.eval()
    return model

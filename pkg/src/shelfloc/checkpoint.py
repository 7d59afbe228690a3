"""Versioned, pickle-free model container.

A checkpoint is a ``.npz`` archive. The ``__header__`` entry is a UTF-8 JSON
document holding the format tag, version, model kind, config and catalog;
every other entry is one named parameter array.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

FORMAT = "shelfloc-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, config: dict, state_dict, catalog: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "catalog": catalog,
        "extra": extra or {},
        "parameters": list(state_dict.keys()),
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, tensor in state_dict.items():
        arrays[f"p:{name}"] = tensor.detach().cpu().numpy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if "__header__" not in data:
            raise CheckpointError(f"{path}: not a {FORMAT} file")
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format") != FORMAT:
            raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
        if header.get("version", 0) > VERSION:
            raise CheckpointError(f"{path}: version {header['version']} is newer than supported {VERSION}")
        if kind is not None and header.get("kind") != kind:
            raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')!r}")
        state = OrderedDict((name, torch.from_numpy(data[f"p:{name}"].copy())) for name in header["parameters"])
    return header, state

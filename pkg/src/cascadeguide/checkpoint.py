"""Checkpoint archive: a zip of ``.npy`` arrays plus a JSON manifest.

Layout::

    manifest.json            {"format": "cascadeguide-checkpoint", "version": 1,
                              "config": {...}, "entries": [{"name", "file", "shape",
                              "dtype", "frozen", "kind"}, ...], "meta": {...}}
    arrays/<index>.npy       one array per entry, in manifest order

``kind`` is ``"parameter"`` or ``"buffer"``. ``frozen`` is true for the base
network (and for buffers), false for adapter parameters.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

FORMAT = "cascadeguide-checkpoint"
VERSION = 1


class CheckpointError(OSError):
    pass


def save_checkpoint(
    path: str | Path,
    module: nn.Module,
    config: dict[str, Any],
    frozen: set[str] | None = None,
    meta: dict[str, Any] | None = None,
    skip_prefixes: tuple[str, ...] = (),
) -> Path:
    """Write ``module``'s parameters and buffers.

    ``frozen`` names the frozen parameters; ``None`` marks all of them frozen.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    param_names = {n for n, _ in module.named_parameters()}
    entries = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for i, (name, tensor) in enumerate(module.state_dict().items()):
            if name.startswith(skip_prefixes):
                continue
            arr = tensor.detach().cpu().numpy()
            is_param = name in param_names
            entry = {
                "name": name,
                "file": f"arrays/{i:05d}.npy",
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "frozen": (not is_param) or frozen is None or name in frozen,
                "kind": "parameter" if is_param else "buffer",
            }
            buf = io.BytesIO()
            np.save(buf, arr, allow_pickle=False)
            zf.writestr(entry["file"], buf.getvalue())
            entries.append(entry)
        manifest = {"format": FORMAT, "version": VERSION, "config": config, "entries": entries, "meta": meta or {}}
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(path: str | Path) -> dict[str, Any]:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} archive")
    return manifest


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    """Return ``(manifest, state_dict)``."""
    manifest = read_manifest(path)
    state: dict[str, torch.Tensor] = {}
    try:
        with zipfile.ZipFile(path) as zf:
            for entry in manifest["entries"]:
                arr = np.load(io.BytesIO(zf.read(entry["file"])), allow_pickle=False)
                if list(arr.shape) != entry["shape"]:
                    raise CheckpointError(f"{path}: entry {entry['name']} has shape {arr.shape}, manifest says {entry['shape']}")
                state[entry["name"]] = torch.from_numpy(arr.copy())
    except (KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return manifest, state

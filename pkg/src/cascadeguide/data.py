"""Procedural labeled image datasets and the on-disk index format.

Index file: ``index.tsv`` in the dataset root, UTF-8, one
``filename<TAB>label`` per line. Labels start at 1; 0 is the null label
reserved for classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .codec import load_png
from .errors import InputError

INDEX_NAME = "index.tsv"


@dataclass
class DatasetSpec:
    root: Path
    entries: list[tuple[str, int]]
    resolutions: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[int]:
        return [label for _, label in self.entries]

    def load_images(self) -> list[torch.Tensor]:
        return [load_png(self.root / name) for name, _ in self.entries]


def _class_palette(rng: np.random.Generator, label: int, num_classes: int) -> np.ndarray:
    level = 0.25 + 0.5 * (label - 1) / max(num_classes - 1, 1)
    colors = np.clip(level + rng.uniform(-0.15, 0.15, size=(2, 3)), 0.0, 1.0)
    tint = np.zeros(3)
    tint[(label - 1) % 3] = 0.08
    return np.clip(colors + tint, 0.0, 1.0)


def render_image(rng: np.random.Generator, size: int, label: int, num_classes: int) -> np.ndarray:
    """One ``size x size x 3`` float image in [0, 1]."""
    c0, c1 = _class_palette(rng, label, num_classes)
    y, x = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    kind = rng.integers(3)
    if kind == 0:  # gradient field
        theta = rng.uniform(0, 2 * np.pi)
        w = (np.cos(theta) * x + np.sin(theta) * y + 1.0) / 2.0
        w = np.clip(w + 0.1 * np.sin(rng.uniform(1, 4) * np.pi * (x - y)), 0.0, 1.0)
    elif kind == 1:  # checkerboard
        cells = rng.integers(2, 7)
        phase = rng.uniform(0, 1, size=2)
        w = ((np.floor((x + 1) / 2 * cells + phase[0]) + np.floor((y + 1) / 2 * cells + phase[1])) % 2).astype(float)
    else:  # blob composition
        w = np.zeros_like(x)
        for _ in range(rng.integers(2, 6)):
            cx, cy = rng.uniform(-0.8, 0.8, size=2)
            r = rng.uniform(0.15, 0.45)
            w = np.maximum(w, np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * r**2)))
    img = c0[None, None, :] * (1 - w[..., None]) + c1[None, None, :] * w[..., None]
    return np.clip(img, 0.0, 1.0)


def make_synthetic_dataset(
    out_dir: str | Path,
    num_classes: int = 2,
    per_class: int = 500,
    sizes: tuple[int, ...] = (64, 128, 192),
    seed: int = 0,
) -> DatasetSpec:
    """Render ``num_classes * per_class`` labeled PNGs plus ``index.tsv``.

    Image ``i`` is drawn from its own seed stream ``(seed, i)``, so the output
    is byte-identical for a given seed regardless of rendering order.
    """
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    entries: list[tuple[str, int]] = []
    resolutions: dict[str, tuple[int, int]] = {}
    n = num_classes * per_class
    for i in range(n):
        label = 1 + i % num_classes
        size = sizes[(i // num_classes) % len(sizes)]
        rng = np.random.default_rng([seed, i])
        img = render_image(rng, size, label, num_classes)
        name = f"img_{i:05d}.png"
        Image.fromarray(np.round(img * 255).astype(np.uint8), mode="RGB").save(root / name, format="PNG")
        entries.append((name, label))
        resolutions[name] = (size, size)
    with open(root / INDEX_NAME, "w", encoding="utf-8") as fh:
        for name, label in entries:
            fh.write(f"{name}\t{label}\n")
    return DatasetSpec(root=root, entries=entries, resolutions=resolutions)


def load_dataset(root: str | Path, cond_vocab: int | None = None) -> DatasetSpec:
    """Read and validate ``index.tsv``; every file must exist and decode."""
    root = Path(root)
    index = root / INDEX_NAME
    if not index.is_file():
        raise FileNotFoundError(f"dataset index not found: {index}")
    entries: list[tuple[str, int]] = []
    resolutions: dict[str, tuple[int, int]] = {}
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, label_s = line.split("\t")
            label = int(label_s)
        except ValueError as exc:
            raise InputError(f"{index}:{lineno}: expected 'filename<TAB>label'") from exc
        if label < 1 or (cond_vocab is not None and label >= cond_vocab):
            raise InputError(f"{index}:{lineno}: label {label} outside 1..{(cond_vocab or 0) - 1}")
        path = root / name
        if not path.is_file():
            raise FileNotFoundError(f"indexed file missing: {path}")
        try:
            with Image.open(path) as im:
                im.verify()
            with Image.open(path) as im:
                resolutions[name] = (im.height, im.width)
        except Exception as exc:  # PIL raises a zoo of types for corrupt files
            raise InputError(f"cannot decode {path}: {exc}") from exc
        entries.append((name, label))
    return DatasetSpec(root=root, entries=entries, resolutions=resolutions)

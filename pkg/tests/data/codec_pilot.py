"""Regenerate codec_pilot.json: the held-out PSNR threshold for the codec criterion.

Trains the toy codec with the acceptance settings under pilot seeds that the
acceptance run does not use, and records the mean held-out PSNR.

    python tests/data/codec_pilot.py
"""

import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from cascadeguide.cli import is_holdout
from cascadeguide.codec import CodecConfig, evaluate_codec, train_codec
from cascadeguide.data import make_synthetic_dataset

SEEDS = (1, 2)
STEPS = 400


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        ds = make_synthetic_dataset(Path(tmp), num_classes=2, per_class=500, sizes=(64, 128, 192), seed=0)
        images = ds.load_images()
    train = [im for i, im in enumerate(images) if not is_holdout(i)]
    held_out = [im for i, im in enumerate(images) if is_holdout(i)]
    runs = {}
    for seed in SEEDS:
        model = train_codec(train, CodecConfig(), steps=STEPS, seed=seed)
        runs[str(seed)] = float(np.mean(evaluate_codec(model, held_out)))
        print(f"seed {seed}: {runs[str(seed)]:.4f} dB", file=sys.stderr)
    out = {
        "mean_psnr": float(np.mean(list(runs.values()))),
        "per_seed": runs,
        "method": f"CodecConfig() trained {STEPS} steps on the 2x500 synthetic set (dataset seed 0), "
                  "every tenth image held out; mean held-out PSNR over pilot seeds",
    }
    Path(__file__).with_name("codec_pilot.json").write_text(json.dumps(out, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())

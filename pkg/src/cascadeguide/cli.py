"""Command-line entry point.

Every command accepts ``--config FILE`` (``key = value`` lines),
``--preset NAME`` and repeatable ``--set key=value`` overrides; the effective
configuration is echoed before the run starts and saved next to the outputs.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from collections import defaultdict
from pathlib import Path
from typing import Any, Sequence

import torch

from . import config as C
from .backbone import GuidedDenoiser, model_from_config, partition_parameters
from .checkpoint import CheckpointError, read_manifest
from .codec import (
    Autoencoder,
    evaluate_codec,
    load_codec,
    load_decoder,
    save_codec,
    save_decoder,
    train_codec,
    train_diffusion_decoder,
)
from .data import DatasetSpec, load_dataset, make_synthetic_dataset
from .errors import ConfigError, DomainError, InputError, NumericError
from .pipeline import GenerationRequest, Pipeline
from .trainer import (
    BatchSampler,
    LatentBank,
    TrainConfig,
    Trainer,
    ablation_grid,
    build_adapter_model,
    build_base_model,
    load_model,
    run_ablation,
    save_model,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def is_holdout(index: int) -> bool:
    """Every tenth image is held out from codec training."""
    return index % 10 == 9


# -- config plumbing --------------------------------------------------------------


def _parse_sets(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def effective_config(args: argparse.Namespace, extra: dict[str, str] | None = None) -> dict[str, Any]:
    overrides = dict(extra or {})
    overrides.update(_parse_sets(args.set or []))
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = str(args.seed)
    if getattr(args, "out", None):
        overrides["run.out_dir"] = args.out
    return C.resolve(args.config, overrides, preset=args.preset)


def echo_config(cfg: dict[str, Any], out_dir: Path | None = None) -> None:
    text = C.dump(cfg)
    print("# effective config (hash %s)" % C.config_hash(cfg))
    print(text, end="", flush=True)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "effective.cfg").write_text(text, encoding="utf-8")


def train_config(cfg: dict[str, Any], phase: str | None = None) -> TrainConfig:
    return TrainConfig(
        phase=phase or cfg["trainer.phase"],
        lr=cfg["trainer.lr"],
        weight_decay=cfg["trainer.weight_decay"],
        batch_size=cfg["trainer.batch_size"],
        steps=cfg["trainer.steps"],
        cond_dropout_p=cfg["trainer.cond_dropout_p"],
        t_extract=cfg["trainer.t_extract"],
        seed=cfg["run.seed"],
        resolution_buckets=cfg["trainer.resolution_buckets"],
        base_checkpoint=cfg["trainer.base_checkpoint"],
        log_every=cfg["trainer.log_every"],
    )


def obtain_dataset(cfg: dict[str, Any], out_dir: Path) -> DatasetSpec:
    root = cfg["data.root"]
    if root and (Path(root) / "index.tsv").is_file():
        return load_dataset(root, cfg["backbone.cond_vocab"])
    if root and not cfg["data.synthetic"]:
        raise FileNotFoundError(f"dataset index not found under {root}")
    target = Path(root) if root else out_dir / "data"
    print(f"rendering synthetic dataset into {target}", flush=True)
    return make_synthetic_dataset(
        target, cfg["data.num_classes"], cfg["data.per_class"], cfg["data.sizes"], cfg["run.seed"]
    )


def obtain_codec(cfg: dict[str, Any], images: list[torch.Tensor], out_dir: Path) -> Autoencoder:
    path = cfg["codec.path"]
    if path:
        codec = load_codec(path)
        if codec.config != C.codec_config(cfg):
            raise ConfigError(f"codec at {path} has {codec.config}, config asks for {C.codec_config(cfg)}")
        return codec
    print("training codec", flush=True)
    train = [im for i, im in enumerate(images) if not is_holdout(i)]
    codec = train_codec(
        train, C.codec_config(cfg), cfg["codec.steps"], cfg["codec.batch_size"], lr=cfg["codec.lr"],
        seed=C.derive_seed(cfg["run.seed"], "codec"),
    )
    saved = save_codec(out_dir / "codec.ckpt", codec)
    print(f"codec -> {saved}", flush=True)
    return codec


def latent_bank(cfg: dict[str, Any], ds: DatasetSpec, codec: Autoencoder, buckets) -> LatentBank:
    return LatentBank(ds.load_images(), ds.labels, codec, cfg["backbone.base_latent_hw"], buckets)


# -- commands ---------------------------------------------------------------------


def cmd_make_dataset(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    out = Path(args.out_data)
    ds = make_synthetic_dataset(out, cfg["data.num_classes"], cfg["data.per_class"], cfg["data.sizes"], cfg["run.seed"])
    print(f"wrote {len(ds)} images and index to {out}")
    return EXIT_OK


def cmd_train_codec(args: argparse.Namespace) -> int:
    cfg = effective_config(args, {"codec.path": ""})
    out = Path(cfg["run.out_dir"])
    echo_config(cfg, out)
    ds = obtain_dataset(cfg, out)
    images = ds.load_images()
    codec = obtain_codec(cfg, images, out)
    scores = evaluate_codec(codec, [im for i, im in enumerate(images) if is_holdout(i)])
    print(f"held-out PSNR mean {sum(scores) / len(scores):.3f} dB")
    if args.diffusion_decoder:
        dec = train_diffusion_decoder(
            codec, images, C.schedule_config(cfg), steps=cfg["decoder.train_steps"],
            seed=C.derive_seed(cfg["run.seed"], "decoder_train"),
        )
        print(f"decoder -> {save_decoder(out / 'decoder.ckpt', dec)}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    extra: dict[str, str] = {}
    if args.phase:
        extra["trainer.phase"] = args.phase
    if args.steps is not None:
        extra["trainer.steps"] = str(args.steps)
    if args.base:
        extra["trainer.base_checkpoint"] = args.base
    if args.codec:
        extra["codec.path"] = args.codec
    if args.data:
        extra["data.root"] = args.data
    cfg = effective_config(args, extra)
    tc = train_config(cfg)
    out = Path(cfg["run.out_dir"])
    echo_config(cfg, out)
    if tc.phase == "adapter":
        base = tc.base_checkpoint
        if not base or not Path(base).is_file():
            raise FileNotFoundError(f"adapter phase needs a base checkpoint (trainer.base_checkpoint); got {base!r}")
        read_manifest(base)
    ds = obtain_dataset(cfg, out)
    codec = obtain_codec(cfg, ds.load_images(), out)
    seed = cfg["run.seed"]
    if tc.phase == "base":
        base_hw = cfg["backbone.base_latent_hw"]
        bank = latent_bank(cfg, ds, codec, (base_hw,))
        model = build_base_model(C.backbone_config(cfg), C.derive_seed(seed, "init"))
        buckets: tuple = (base_hw,)
    else:
        bank = latent_bank(cfg, ds, codec, tc.resolution_buckets)
        model = build_adapter_model(tc.base_checkpoint, C.adapter_config(cfg), C.derive_seed(seed, "init"))
        buckets = tc.resolution_buckets
    trainer = Trainer(model, tc, C.schedule_config(cfg), log_path=out / f"{tc.phase}_log.jsonl")
    start = time.perf_counter()
    state = trainer.fit(BatchSampler(bank, tc.batch_size, seed, buckets))
    ckpt = save_model(
        out / f"{tc.phase}.ckpt", model,
        meta={"effective_config": C.dump(cfg), "config_hash": C.config_hash(cfg), "steps": state.step,
              "skipped_steps": state.skipped, "codec": str(out / "codec.ckpt") if not cfg["codec.path"] else cfg["codec.path"]},
    )
    print(f"trained {state.step} steps ({state.skipped} skipped) in {time.perf_counter() - start:.1f}s")
    print(f"checkpoint -> {ckpt}")
    return EXIT_OK


def _codec_for(cfg: dict[str, Any], ckpt: str) -> Autoencoder:
    path = cfg["codec.path"] or read_manifest(ckpt).get("meta", {}).get("codec", "")
    if not path:
        raise ConfigError("no codec given (codec.path) and none recorded in the checkpoint")
    return load_codec(path)


def cmd_sample(args: argparse.Namespace) -> int:
    extra: dict[str, str] = {}
    if args.cfg is not None:
        extra["sampler.cfg_weight"] = str(args.cfg)
    if args.steps is not None:
        extra["sampler.steps"] = str(args.steps)
    if args.codec:
        extra["codec.path"] = args.codec
    cfg = effective_config(args, extra)
    out = Path(cfg["run.out_dir"])
    echo_config(cfg, out)
    model = load_model(args.checkpoint)
    decoder = load_decoder(args.decoder) if args.decoder else None
    if cfg["decoder.kind"] == "diffusion" and decoder is None:
        raise ConfigError("decoder.kind=diffusion needs --decoder PATH")
    pipe = Pipeline(model, _codec_for(cfg, args.checkpoint), C.schedule_config(cfg), C.sampler_config(cfg),
                    decoder, C.config_hash(cfg))
    sizes = args.size or ["128x128"]
    requests = []
    for raw in sizes:
        hw = C.parse_value("backbone.base_latent_hw", raw)
        requests.append(GenerationRequest(
            label=args.label, target_image_hw=hw, seed=cfg["run.seed"],
            guidance=not args.no_guidance, san=not args.no_san, t_extract=args.t_extract,
        ))
    for req in requests:  # validate all sizes before spending time on any
        pipe.target_latent_hw(req)
    for req in requests:
        h, w = req.target_image_hw
        path = out / f"sample_{h}x{w}_label{req.label}_seed{req.seed}.png"
        res = pipe.end_to_end(req, path)
        t = res.timings
        print(f"{path}  lr {t['lr_seconds']:.2f}s  hr {t['hr_seconds']:.2f}s  "
              f"decode {t['decode_seconds']:.2f}s  total {t['total_seconds']:.2f}s", flush=True)
    return EXIT_OK


def param_report(model: GuidedDenoiser) -> dict[str, Any]:
    part = partition_parameters(model)
    params = dict(model.named_parameters())
    modules: dict[str, int] = defaultdict(int)
    for name, p in params.items():
        parts = name.split(".")
        depth = 3 if parts[0] == "adapter" else 2
        key = ".".join(parts[:depth]) if len(parts) > depth else ".".join(parts[:-1])
        modules[key] += p.numel()
    frozen = sum(params[n].numel() for n in part.frozen_names)
    trainable = sum(params[n].numel() for n in part.trainable_names)
    return {
        "frozen": frozen,
        "trainable": trainable,
        "fraction": trainable / (frozen + trainable),
        "modules": dict(sorted(modules.items())),
    }


def cmd_report_params(args: argparse.Namespace) -> int:
    if args.checkpoint:
        manifest = read_manifest(args.checkpoint)
        model = model_from_config(manifest["config"])
        source = args.checkpoint
    else:
        cfg = effective_config(args)
        model = GuidedDenoiser(C.backbone_config(cfg), C.adapter_config(cfg))
        source = f"preset {cfg['run.preset']}"
    rep = param_report(model)
    if args.json:
        print(json.dumps({"source": source, **rep}))
        return EXIT_OK
    print(f"source     {source}")
    print(f"frozen     {rep['frozen']}")
    print(f"trainable  {rep['trainable']}")
    print(f"fraction   {rep['fraction']:.6f}")
    for name, n in rep["modules"].items():
        print(f"  {name:<32} {n}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    extra: dict[str, str] = {}
    if args.codec:
        extra["codec.path"] = args.codec
    if args.data:
        extra["data.root"] = args.data
    cfg = effective_config(args, extra)
    out = Path(cfg["run.out_dir"])
    echo_config(cfg, out)
    base = args.base or cfg["trainer.base_checkpoint"]
    if not base or not Path(base).is_file():
        raise FileNotFoundError(f"ablation needs a base checkpoint; got {base!r}")
    ds = obtain_dataset(cfg, out)
    codec = _codec_for(cfg, base)
    tc = train_config(cfg, "adapter")
    tc = TrainConfig(**{**tc.__dict__, "steps": cfg["ablation.steps"], "batch_size": cfg["ablation.batch_size"],
                        "log_every": 0})
    bank = latent_bank(cfg, ds, codec, tc.resolution_buckets)
    variants = ablation_grid(cfg["ablation.t_extract"], cfg["ablation.upsampler"], cfg["ablation.san"],
                             cfg["ablation.widths"])
    report = out / "ablation.jsonl"

    def show(row: dict) -> None:
        if row["status"] == "ok":
            print(f"{row['variant']:<36} trainable {row['trainable_params']:>10}  "
                  f"first {row['first_window_loss']:.4f}  final {row['final_window_loss']:.4f}  "
                  f"{row['seconds']:.1f}s", flush=True)
        else:
            print(f"{row['variant']:<36} FAILED {row['error']}", flush=True)

    rows = run_ablation(variants, base, bank, C.inr_config(cfg), tc, report, cfg["ablation.window"], show)
    print(f"report -> {report} ({sum(r['status'] == 'ok' for r in rows)}/{len(rows)} ok)")
    return EXIT_OK


def cmd_eval_codec(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    codec = load_codec(args.codec)
    ds = load_dataset(args.data)
    names = [n for i, (n, _) in enumerate(ds.entries) if is_holdout(i) or args.all]
    images = ds.load_images()
    subset = [im for i, im in enumerate(images) if is_holdout(i) or args.all]
    if not subset:
        raise InputError(f"no held-out images in {args.data} (every tenth image is held out); use --all")
    scores = evaluate_codec(codec, subset)
    for name, s in zip(names, scores):
        print(f"{name}\t{'inf' if math.isinf(s) else f'{s:.3f}'}")
    finite = [s for s in scores if math.isfinite(s)]
    mean = sum(scores) / len(scores) if scores else float("nan")
    print(f"images {len(scores)}  mean {mean:.3f} dB  min {min(scores):.3f} dB  "
          f"(finite {len(finite)})  seed {cfg['run.seed']}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=sorted(C.PRESETS), help="named starting configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="run seed (run.seed)")
    p.add_argument("--out", help="output directory (run.out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascadeguide", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="render the synthetic labeled dataset")
    _common(p)
    p.add_argument("out_data", help="dataset directory")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train-codec", help="train the toy autoencoder")
    _common(p)
    p.add_argument("--diffusion-decoder", action="store_true", help="also train the refining decoder")
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("train", help="train the base network or the adapter")
    _common(p)
    p.add_argument("--phase", choices=("base", "adapter"))
    p.add_argument("--steps", type=int)
    p.add_argument("--base", help="phase-1 checkpoint (adapter phase)")
    p.add_argument("--codec", help="codec checkpoint; trained on the fly if absent")
    p.add_argument("--data", help="dataset directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images at one or more sizes")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="adapter checkpoint")
    p.add_argument("--codec", help="codec checkpoint (default: the one recorded in the checkpoint)")
    p.add_argument("--decoder", help="diffusion decoder checkpoint")
    p.add_argument("--size", action="append", help="image size HxW, repeatable")
    p.add_argument("--label", type=int, default=1)
    p.add_argument("--cfg", type=float, help="CFG weight (sampler.cfg_weight)")
    p.add_argument("--steps", type=int, help="DDIM steps (sampler.steps)")
    p.add_argument("--t-extract", type=float, default=0.05)
    p.add_argument("--no-guidance", action="store_true")
    p.add_argument("--no-san", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("report-params", help="frozen/trainable parameter counts")
    _common(p)
    p.add_argument("--checkpoint", help="read the model layout from this checkpoint")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report_params)

    p = sub.add_parser("ablate", help="train every ablation variant from one base checkpoint")
    _common(p)
    p.add_argument("--base", help="phase-1 checkpoint")
    p.add_argument("--codec")
    p.add_argument("--data")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval-codec", help="held-out reconstruction PSNR")
    _common(p)
    p.add_argument("--codec", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--all", action="store_true", help="evaluate every image, not only the held-out split")
    p.set_defaults(func=cmd_eval_codec)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

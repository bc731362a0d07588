"""Flat namespaced run configuration and seed derivation.

Config files are UTF-8 text with one ``key = value`` per line; ``#`` starts a
comment. Keys are namespaced by module (``backbone.channels``,
``trainer.lr``, ``sampler.steps``...). Command-line overrides win over the
file, unknown keys are rejected, and every effective value is echoed to the
run log.

Seeds: every random stream is derived from the single run seed as
``derive_seed(seed, name)`` = first 8 bytes (big-endian) of
``sha256(f"{seed}/{name}")``, masked to 63 bits.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any

import torch

from .backbone import AdapterConfig, BackboneConfig
from .codec import CodecConfig
from .errors import ConfigError
from .inr import InrConfig
from .sampler import SamplerConfig
from .schedule import NoiseSchedule


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def generator(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, name))


def _hw(v: str) -> tuple[int, int]:
    parts = v.lower().replace(" ", "").split("x")
    if len(parts) == 1:
        return (int(parts[0]), int(parts[0]))
    if len(parts) != 2:
        raise ValueError(v)
    return (int(parts[0]), int(parts[1]))


def _int_tuple(v: str) -> tuple[int, ...]:
    return tuple(int(p) for p in v.replace(" ", "").split(",") if p)


def _hw_list(v: str) -> tuple[tuple[int, int], ...]:
    return tuple(_hw(p) for p in v.replace(" ", "").split(",") if p)


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


def _t_extract(v: str) -> float | str:
    low = v.strip().lower()
    return "sync" if low == "sync" else float(low)


def _fmt(key: str, v: Any) -> str:
    """Inverse of the key's parser, so dumped configs read back identically."""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if SCHEMA.get(key, (None, None))[1] is _hw:
            return f"{v[0]}x{v[1]}"
        return ",".join(f"{x[0]}x{x[1]}" if isinstance(x, tuple) else _fmt(key, x) for x in v)
    return str(v)


# key -> (default, parser)
SCHEMA: dict[str, tuple[Any, Any]] = {
    "run.seed": (0, int),
    "run.out_dir": ("runs", str),
    "run.preset": ("desk", str),
    "backbone.base_latent_hw": ((16, 16), _hw),
    "backbone.latent_channels": (4, int),
    "backbone.channels": (96, int),
    "backbone.num_attention_blocks": (2, int),
    "backbone.hook_levels": ((0, 1), _int_tuple),
    "backbone.cond_vocab": (3, int),
    "backbone.embed_dim": (16, int),
    "backbone.num_heads": (4, int),
    "backbone.groups": (8, int),
    "adapter.upsampler": ("inr", str),
    "adapter.san": (True, _bool),
    "adapter.guidance": (True, _bool),
    "adapter.time_embedding": ("shared", str),
    "inr.reduced_dim": (32, int),
    "inr.num_learnable_tokens": (24, int),
    "inr.fusion_depth": (1, int),
    "inr.num_heads": (4, int),
    "inr.mlp_hidden": ((32,), _int_tuple),
    "inr.out_channels": (16, int),
    "inr.fourier_bands": (4, int),
    "inr.max_tokens": (4096, int),
    "schedule.offset": (0.008, float),
    "schedule.clip_min": (1e-5, float),
    "sampler.steps": (20, int),
    "sampler.cfg_weight": (4.0, float),
    "sampler.eta": (0.0, float),
    "sampler.guidance_on_uncond": (True, _bool),
    "decoder.kind": ("ae", str),
    "decoder.steps": (10, int),
    "decoder.cfg_weight": (1.1, float),
    "decoder.train_steps": (400, int),
    "trainer.phase": ("base", str),
    "trainer.lr": (1e-4, float),
    "trainer.weight_decay": (1e-2, float),
    "trainer.batch_size": (16, int),
    "trainer.steps": (2000, int),
    "trainer.cond_dropout_p": (0.1, float),
    "trainer.t_extract": (0.05, _t_extract),
    "trainer.resolution_buckets": (((16, 16), (24, 24), (32, 32)), _hw_list),
    "trainer.base_checkpoint": ("", str),
    "trainer.log_every": (100, int),
    "codec.spatial_factor": (4, int),
    "codec.latent_channels": (4, int),
    "codec.hidden": (32, int),
    "codec.steps": (1500, int),
    "codec.batch_size": (16, int),
    "codec.lr": (2e-3, float),
    "codec.path": ("", str),
    "data.root": ("", str),
    "data.synthetic": (True, _bool),
    "data.num_classes": (2, int),
    "data.per_class": (500, int),
    "data.sizes": ((64, 128, 192), _int_tuple),
    "ablation.steps": (60, int),
    "ablation.batch_size": (4, int),
    "ablation.t_extract": (("sync", 0.5, 0.05), None),
    "ablation.upsampler": (("inr", "bi_conv"), None),
    "ablation.san": ((True, False), None),
    "ablation.widths": ((512, 1024), _int_tuple),
    "ablation.window": (20, int),
}


def _parse_list(key: str, raw: str) -> tuple:
    items = [p.strip() for p in raw.split(",") if p.strip()]
    if key == "ablation.t_extract":
        return tuple(_t_extract(p) for p in items)
    if key == "ablation.san":
        return tuple(_bool(p) for p in items)
    return tuple(items)


def parse_value(key: str, raw: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    default, parser = SCHEMA[key]
    try:
        if parser is None:
            return _parse_list(key, raw)
        return parser(raw.strip())
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def defaults() -> dict[str, Any]:
    return {k: v for k, (v, _) in SCHEMA.items()}


def read_config_file(path: str | Path) -> dict[str, Any]:
    out: dict[str, Any] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


# Named starting points; values are raw strings, parsed like overrides.
PRESETS: dict[str, dict[str, str]] = {
    "desk": {},
    "smoke": {"backbone.channels": "32"},
    "tiny": {
        "backbone.base_latent_hw": "4x4",
        "backbone.channels": "8",
        "backbone.embed_dim": "8",
        "backbone.num_heads": "2",
        "backbone.groups": "4",
        "inr.reduced_dim": "8",
        "inr.num_heads": "2",
        "inr.num_learnable_tokens": "4",
        "inr.mlp_hidden": "8",
        "inr.out_channels": "8",
        "trainer.resolution_buckets": "4x4,6x6,8x8",
    },
    "ours-512": {"inr.reduced_dim": "512"},
    "ours-1024": {"inr.reduced_dim": "1024"},
}


def resolve(
    file: str | Path | None = None,
    overrides: dict[str, str] | None = None,
    preset: str | None = None,
) -> dict[str, Any]:
    """Defaults, then preset, then config file, then overrides."""
    cfg = defaults()
    file_cfg = read_config_file(file) if file else {}
    overrides = dict(overrides or {})
    name = preset or overrides.get("run.preset") or file_cfg.get("run.preset") or "desk"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    for key, raw in PRESETS[name].items():
        cfg[key] = parse_value(key, raw)
    cfg["run.preset"] = name
    cfg.update(file_cfg)
    for key, raw in (overrides or {}).items():
        cfg[key] = parse_value(key, raw)
    return cfg


def dump(cfg: dict[str, Any]) -> str:
    return "".join(f"{k} = {_fmt(k, cfg[k])}\n" for k in sorted(cfg))


def config_hash(cfg: dict[str, Any]) -> str:
    return hashlib.sha256(dump(cfg).encode()).hexdigest()[:16]


def _section(cfg: dict[str, Any], prefix: str) -> dict[str, Any]:
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def backbone_config(cfg: dict[str, Any]) -> BackboneConfig:
    return BackboneConfig(**_section(cfg, "backbone"))


def inr_config(cfg: dict[str, Any]) -> InrConfig:
    return InrConfig(in_channels=cfg["backbone.channels"], **_section(cfg, "inr"))


def adapter_config(cfg: dict[str, Any]) -> AdapterConfig:
    return AdapterConfig(inr=inr_config(cfg), **_section(cfg, "adapter"))


def schedule_config(cfg: dict[str, Any]) -> NoiseSchedule:
    return NoiseSchedule(**_section(cfg, "schedule"))


def sampler_config(cfg: dict[str, Any]) -> SamplerConfig:
    return SamplerConfig(**_section(cfg, "sampler"))


def codec_config(cfg: dict[str, Any]) -> CodecConfig:
    c = _section(cfg, "codec")
    return CodecConfig(spatial_factor=c["spatial_factor"], latent_channels=c["latent_channels"], hidden=c["hidden"])

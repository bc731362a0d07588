"""Latent denoiser with guidance hooks, fusion points and scale-aware norms.

The base network (frozen parameters, ``base.*``) is a single-scale stack of
``[ResBlock, AttentionBlock] * num_attention_blocks`` with stride 1, so any
latent at least as large as the base size can be denoised with the same
weights. The adapter (trainable parameters, ``adapter.*``) adds

* one guidance upsampler (INR hypernetwork or bilinear+conv) per hook level,
* one fusion + time-modulation module per hook level, applied right after the
  matching attention block,
* one scale-aware normalization per block, applied after the block's
  GroupNorm.

Every adapter branch is a zero-initialized residual, so a fresh adapter leaves
the base network's output unchanged.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError
from .inr import BilinearConvUpsampler, GuidanceINR, InrConfig
from .modulation import AffineModulation, GuidanceFusion, scale_embed, sinusoidal_embedding
from .schedule import NoiseSchedule, corrupt


@dataclass(frozen=True)
class BackboneConfig:
    base_latent_hw: tuple[int, int] = (16, 16)
    latent_channels: int = 4
    channels: int = 32
    num_attention_blocks: int = 2
    hook_levels: tuple[int, ...] = (0, 1)
    cond_vocab: int = 3
    embed_dim: int = 32
    num_heads: int = 4
    groups: int = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "base_latent_hw", tuple(int(v) for v in self.base_latent_hw))
        object.__setattr__(self, "hook_levels", tuple(int(v) for v in self.hook_levels))
        if len(self.base_latent_hw) != 2 or min(self.base_latent_hw) < 1:
            raise ConfigError("backbone.base_latent_hw must be two positive ints")
        if self.num_attention_blocks < 1:
            raise ConfigError("backbone.num_attention_blocks must be >= 1")
        if not self.hook_levels:
            raise ConfigError("backbone.hook_levels must be non-empty")
        if len(set(self.hook_levels)) != len(self.hook_levels) or not all(
            0 <= k < self.num_attention_blocks for k in self.hook_levels
        ):
            raise ConfigError(f"backbone.hook_levels {self.hook_levels} are not distinct valid block indices")
        if self.cond_vocab < 2:
            raise ConfigError("backbone.cond_vocab must be >= 2 (labels plus the null label)")
        if self.embed_dim % 2:
            raise ConfigError("backbone.embed_dim must be even")
        if self.channels % self.num_heads or self.channels % self.groups:
            raise ConfigError("backbone.channels must be divisible by num_heads and groups")

    @property
    def null_label(self) -> int:
        return 0


@dataclass(frozen=True)
class AdapterConfig:
    """Which trainable branches exist and how guidance is upsampled."""

    upsampler: str = "inr"  # "inr" | "bi_conv"
    san: bool = True
    guidance: bool = True
    time_embedding: str = "shared"  # "shared" | "own"
    inr: InrConfig = field(default_factory=InrConfig)

    def __post_init__(self) -> None:
        if self.upsampler not in ("inr", "bi_conv"):
            raise ConfigError(f"adapter.upsampler must be 'inr' or 'bi_conv', got {self.upsampler!r}")
        if self.time_embedding not in ("shared", "own"):
            raise ConfigError("adapter.time_embedding must be 'shared' or 'own'")


@dataclass
class GuidanceBundle:
    """Base-resolution feature maps, one per hook level, in level order."""

    levels: list[tuple[int, torch.Tensor]]
    extraction_t: float | torch.Tensor = 0.05

    def maps(self) -> list[torch.Tensor]:
        return [m for _, m in self.levels]


@dataclass
class ConditioningBundle:
    """Network inputs besides the noisy latent.

    ``scale_embedding`` switches scale-aware normalization on; ``guidance``
    holds the upsampled maps ``g'`` (one per hook level, at the latent size)
    and switches fusion on. Leaving both unset runs the base network only.
    """

    label_embedding: torch.Tensor
    time_embedding: torch.Tensor
    scale_embedding: Optional[torch.Tensor] = None
    guidance: Optional[list[torch.Tensor]] = None


@dataclass
class ParameterPartition:
    frozen_names: set[str]
    trainable_names: set[str]


def time_embedding(t: float | torch.Tensor, dim: int) -> torch.Tensor:
    return sinusoidal_embedding(t, dim)


Modulator = Callable[[torch.Tensor], torch.Tensor]


class ResBlock(nn.Module):
    def __init__(self, channels: int, embed_dim: int, groups: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.cond = nn.Linear(embed_dim, 2 * channels)
        self.conv1 = nn.Conv2d(channels, 2 * channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, 2 * channels)
        self.conv2 = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, c: torch.Tensor, after_norm: Modulator | None = None) -> torch.Tensor:
        h = self.norm1(x)
        if after_norm is not None:
            h = after_norm(h)
        scale, shift = self.cond(c)[:, :, None, None].chunk(2, dim=1)
        h = h * (1 + scale) + shift
        h = self.conv1(F.silu(h))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, embed_dim: int, groups: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.norm = nn.GroupNorm(groups, channels)
        self.cond = nn.Linear(embed_dim, 2 * channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.ff_norm = nn.GroupNorm(groups, channels)
        self.ff = nn.Sequential(
            nn.Conv2d(channels, 2 * channels, 1), nn.SiLU(), nn.Conv2d(2 * channels, channels, 1)
        )

    def forward(self, x: torch.Tensor, c: torch.Tensor, after_norm: Modulator | None = None) -> torch.Tensor:
        b, ch, hh, ww = x.shape
        h = self.norm(x)
        if after_norm is not None:
            h = after_norm(h)
        scale, shift = self.cond(c)[:, :, None, None].chunk(2, dim=1)
        h = h * (1 + scale) + shift
        tokens = h.flatten(2).transpose(1, 2)
        q, k, v = self.qkv(tokens).reshape(b, -1, 3, self.num_heads, ch // self.num_heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v)
        a = self.proj(a.transpose(1, 2).reshape(b, -1, ch))
        x = x + a.transpose(1, 2).reshape(b, ch, hh, ww)
        return x + self.ff(self.ff_norm(x))


class Backbone(nn.Module):
    """The frozen base denoiser."""

    def __init__(self, config: BackboneConfig) -> None:
        super().__init__()
        self.config = config
        c, e = config.channels, config.embed_dim
        self.label_embed = nn.Embedding(config.cond_vocab, e)
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.in_conv = nn.Conv2d(config.latent_channels, c, 3, padding=1)
        blocks: list[nn.Module] = []
        for _ in range(config.num_attention_blocks):
            blocks.append(ResBlock(c, e, config.groups))
            blocks.append(AttentionBlock(c, e, config.groups, config.num_heads))
        self.blocks = nn.ModuleList(blocks)
        self.out_norm = nn.GroupNorm(config.groups, c)
        self.out_conv = nn.Conv2d(c, config.latent_channels, 3, padding=1)


class Adapter(nn.Module):
    """Trainable additions: upsamplers and fusion per hook level, SAN per block."""

    def __init__(self, backbone: BackboneConfig, config: AdapterConfig) -> None:
        super().__init__()
        self.config = config
        c, e = backbone.channels, backbone.embed_dim
        if config.guidance:
            inr_cfg = config.inr
            if inr_cfg.in_channels != c:
                raise ConfigError(f"inr.in_channels ({inr_cfg.in_channels}) must equal backbone.channels ({c})")
            if config.upsampler == "inr":
                ups = [GuidanceINR(inr_cfg) for _ in backbone.hook_levels]
            else:
                ups = [BilinearConvUpsampler(c, inr_cfg.out_channels) for _ in backbone.hook_levels]
            self.upsamplers = nn.ModuleList(ups)
            self.fusion = nn.ModuleList(GuidanceFusion(c, inr_cfg.out_channels, e) for _ in backbone.hook_levels)
            if config.time_embedding == "own":
                self.time_embed = nn.Sequential(nn.Linear(e, e), nn.SiLU())
        if config.san:
            self.san = nn.ModuleList(AffineModulation(c, e) for _ in range(2 * backbone.num_attention_blocks))


class GuidedDenoiser(nn.Module):
    """Base denoiser plus optional adapter; the noise predictor of both branches."""

    def __init__(self, backbone: BackboneConfig, adapter: AdapterConfig | None = None) -> None:
        super().__init__()
        self.backbone_config = backbone
        self.adapter_config = adapter
        self.base = Backbone(backbone)
        self.adapter = Adapter(backbone, adapter) if adapter is not None else None

    @property
    def latent_channels(self) -> int:
        return self.backbone_config.latent_channels

    @property
    def embed_dim(self) -> int:
        return self.backbone_config.embed_dim

    @property
    def dtype(self) -> torch.dtype:
        return self.base.in_conv.weight.dtype

    # -- conditioning -------------------------------------------------------

    def condition(
        self,
        labels: torch.Tensor,
        t: float | torch.Tensor,
        scale: float | None = None,
        guidance: list[torch.Tensor] | None = None,
    ) -> ConditioningBundle:
        """Assemble a :class:`ConditioningBundle` for a batch of labels."""
        b = labels.shape[0]
        dim = self.embed_dim
        if isinstance(t, torch.Tensor) and t.ndim == 1:
            e_t = time_embedding(t.to(self.dtype), dim)
        else:
            e_t = time_embedding(float(t), dim).to(self.dtype).expand(b, dim)
        e_s = None
        if scale is not None:
            e_s = scale_embed(float(scale), dim).to(self.dtype).expand(b, dim)
        return ConditioningBundle(
            label_embedding=self.base.label_embed(labels),
            time_embedding=e_t,
            scale_embedding=e_s,
            guidance=guidance,
        )

    # -- forward ------------------------------------------------------------

    def _run_blocks(
        self,
        z: torch.Tensor,
        cond: ConditioningBundle,
        stop_after_level: int | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        cfg = self.backbone_config
        base = self.base
        for name, emb in (("label", cond.label_embedding), ("time", cond.time_embedding)):
            if emb.shape[-1] != cfg.embed_dim:
                raise InputError(f"{name} embedding width {emb.shape[-1]} != embed_dim {cfg.embed_dim}")
        c = base.time_mlp(cond.time_embedding) + cond.label_embedding

        use_san = cond.scale_embedding is not None and self.adapter is not None and hasattr(self.adapter, "san")
        guidance = cond.guidance
        if guidance is not None:
            if self.adapter is None or not hasattr(self.adapter, "fusion"):
                raise InputError("guidance given but the model has no fusion modules")
            if len(guidance) != len(cfg.hook_levels):
                raise InputError(f"expected {len(cfg.hook_levels)} guidance maps, got {len(guidance)}")
            for g in guidance:
                if tuple(g.shape[-2:]) != tuple(z.shape[-2:]):
                    raise InputError(
                        f"guidance map {tuple(g.shape[-2:])} does not match latent {tuple(z.shape[-2:])}"
                    )
            e_t = cond.time_embedding
            if hasattr(self.adapter, "time_embed"):
                e_t = self.adapter.time_embed(e_t)

        h = base.in_conv(z)
        hooked: list[torch.Tensor] = []
        for i, block in enumerate(base.blocks):
            after_norm = None
            if use_san:
                san = self.adapter.san[i]
                e_s = cond.scale_embedding
                after_norm = lambda f, san=san, e_s=e_s: san(f, e_s)  # noqa: E731
            h = block(h, c, after_norm)
            if isinstance(block, AttentionBlock):
                level = i // 2
                if level in cfg.hook_levels:
                    k = cfg.hook_levels.index(level)
                    hooked.append(h)
                    if guidance is not None:
                        h = self.adapter.fusion[k](h, guidance[k], e_t)
                if stop_after_level is not None and level >= stop_after_level:
                    break
        return h, hooked

    def predict_epsilon(self, z_t: torch.Tensor, cond: ConditioningBundle) -> torch.Tensor:
        h, _ = self._run_blocks(z_t, cond)
        return self.base.out_conv(F.silu(self.base.out_norm(h)))

    def forward(self, z_t: torch.Tensor, cond: ConditioningBundle) -> torch.Tensor:
        return self.predict_epsilon(z_t, cond)

    # -- guidance -----------------------------------------------------------

    def extract_guidance(
        self,
        z0_lr: torch.Tensor,
        labels: torch.Tensor,
        schedule: NoiseSchedule,
        t_extract: float | torch.Tensor = 0.05,
        generator: torch.Generator | None = None,
    ) -> GuidanceBundle:
        """Corrupt a clean base latent at ``t_extract`` and capture the hooked maps.

        Runs the base network only. ``t_extract`` may be a per-sample tensor.
        """
        cfg = self.backbone_config
        if tuple(z0_lr.shape[-2:]) != cfg.base_latent_hw:
            raise InputError(f"LR latent {tuple(z0_lr.shape[-2:])} is not at base size {cfg.base_latent_hw}")
        sample = corrupt(schedule, z0_lr, t_extract, generator)
        cond = self.condition(labels, t_extract)
        _, hooked = self._run_blocks(sample.z_t, cond, stop_after_level=max(cfg.hook_levels))
        return GuidanceBundle(levels=list(zip(cfg.hook_levels, hooked)), extraction_t=t_extract)

    def upsample_guidance(self, bundle: GuidanceBundle, target_hw: tuple[int, int]) -> list[torch.Tensor]:
        if self.adapter is None or not hasattr(self.adapter, "upsamplers"):
            raise InputError("model has no guidance upsamplers")
        return [up(m, tuple(target_hw)) for up, m in zip(self.adapter.upsamplers, bundle.maps())]


def partition_parameters(model: GuidedDenoiser) -> ParameterPartition:
    """Split parameter names into frozen base (``base.*``) and trainable adapter."""
    frozen, trainable = set(), set()
    for name, _ in model.named_parameters():
        if name.startswith("base."):
            frozen.add(name)
        elif name.startswith("adapter."):
            trainable.add(name)
        else:
            raise RuntimeError(f"parameter {name!r} is neither base nor adapter")
    return ParameterPartition(frozen_names=frozen, trainable_names=trainable)


def config_dict(model: GuidedDenoiser) -> dict:
    out = {"backbone": asdict(model.backbone_config)}
    out["adapter"] = asdict(model.adapter_config) if model.adapter_config is not None else None
    return out


def model_from_config(d: dict) -> GuidedDenoiser:
    bb = BackboneConfig(**d["backbone"])
    ad = None
    if d.get("adapter") is not None:
        a = dict(d["adapter"])
        a["inr"] = InrConfig(**a["inr"])
        ad = AdapterConfig(**a)
    return GuidedDenoiser(bb, ad)

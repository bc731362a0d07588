"""Continuous upsampling of guidance maps with a hypernetwork-predicted INR.

A guidance map ``(B, C, h, w)`` at the base latent size is flattened into
``h*w`` tokens, projected to ``reduced_dim`` and concatenated with a set of
learnable tokens. A few pre-norm self-attention layers mix the two groups;
afterwards each learnable token is mapped by a per-layer linear head to the
weights of a handful of output units of a small coordinate MLP. Evaluating
that MLP on a position grid of any size gives the upsampled guidance ``g'``.

Grid convention: cell centers, ``coord(i) = -1 + (2i + 1) / n``; the last axis
of ``PositionGrid.coords`` holds ``(row, col)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class InrConfig:
    in_channels: int = 32
    reduced_dim: int = 32
    num_learnable_tokens: int = 24
    fusion_depth: int = 1
    num_heads: int = 4
    mlp_hidden: tuple[int, ...] = (32,)
    out_channels: int = 16
    fourier_bands: int = 4
    max_tokens: int = 4096
    positional_encoding: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))
        for name in ("in_channels", "reduced_dim", "num_learnable_tokens", "out_channels", "num_heads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"inr.{name} must be positive")
        if self.fusion_depth < 0:
            raise ConfigError("inr.fusion_depth must be >= 0")
        if self.reduced_dim % self.num_heads:
            raise ConfigError("inr.reduced_dim must be divisible by inr.num_heads")
        if self.positional_encoding and self.reduced_dim % 4:
            raise ConfigError("inr.reduced_dim must be divisible by 4 for 2-D positional encodings")
        self.tokens_per_layer  # validates the token-to-slot assignment

    @property
    def pe_dim(self) -> int:
        return 2 + 4 * self.fourier_bands

    @property
    def mlp_layout(self) -> tuple[int, ...]:
        return (self.pe_dim, *self.mlp_hidden, self.out_channels)

    @property
    def tokens_per_layer(self) -> tuple[int, ...]:
        """Learnable tokens owned by each MLP layer.

        Tokens are split across layers in proportion to output width so every
        token predicts the same number of output units and no head row is
        left without an owner slot.
        """
        outs = self.mlp_layout[1:]
        total = sum(outs)
        counts = []
        for out in outs:
            n, rem = divmod(out * self.num_learnable_tokens, total)
            if rem or n == 0 or out % n:
                raise ConfigError(
                    f"num_learnable_tokens={self.num_learnable_tokens} cannot be split evenly "
                    f"over MLP output widths {outs}"
                )
            counts.append(n)
        return tuple(counts)


@dataclass
class ImplicitFunctionWeights:
    """Per-sample coordinate-MLP parameters; ``weights[l]`` is ``(B, out, in)``."""

    weights: list[torch.Tensor] = field(default_factory=list)
    biases: list[torch.Tensor] = field(default_factory=list)

    def check_finite(self) -> None:
        for t in (*self.weights, *self.biases):
            if not torch.isfinite(t).all():
                raise InputError("implicit function weights contain non-finite values")


@dataclass
class PositionGrid:
    height: int
    width: int
    coords: torch.Tensor  # (height, width, 2), (row, col)


def cell_centers(n: int) -> torch.Tensor:
    # (2i + 1 - n) / n from exact integers: a coarse grid and a 3x finer grid
    # give bit-identical coordinates where they coincide
    i = torch.arange(n, dtype=torch.float64)
    return (2 * i + 1 - n) / n


def make_grid(height: int, width: int, dtype: torch.dtype | None = None) -> PositionGrid:
    if height <= 0 or width <= 0:
        raise InputError(f"grid size must be positive, got {height}x{width}")
    rows, cols = torch.meshgrid(cell_centers(height), cell_centers(width), indexing="ij")
    coords = torch.stack([rows, cols], dim=-1).to(dtype or torch.get_default_dtype())
    return PositionGrid(height, width, coords)


def fourier_features(coords: torch.Tensor, bands: int) -> torch.Tensor:
    """``[coords, sin(2^k pi c), cos(2^k pi c)]`` for ``k < bands``."""
    freqs = (2.0 ** torch.arange(bands, dtype=coords.dtype)) * math.pi
    ang = coords.unsqueeze(-1) * freqs  # (..., 2, bands)
    ang = ang.flatten(-2)
    return torch.cat([coords, torch.sin(ang), torch.cos(ang)], dim=-1)


def positional_tokens(height: int, width: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Fixed 2-D sinusoidal encodings, ``(height * width, dim)`` in raster order."""
    coords = make_grid(height, width, torch.float64).coords.reshape(-1, 2)
    m = dim // 4
    freqs = math.pi * torch.exp(torch.linspace(0.0, math.log(64.0), m, dtype=torch.float64))
    ang = coords.unsqueeze(-1) * freqs  # (N, 2, m)
    pe = torch.cat([torch.sin(ang[:, 0]), torch.cos(ang[:, 0]), torch.sin(ang[:, 1]), torch.cos(ang[:, 1])], -1)
    return pe.to(dtype)


class SelfAttentionLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 2) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(self.norm1(x)).reshape(b, n, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v)
        x = x + self.proj(a.transpose(1, 2).reshape(b, n, d))
        return x + self.mlp(self.norm2(x))


class GuidanceINR(nn.Module):
    """Hypernetwork for one guidance level."""

    def __init__(self, config: InrConfig) -> None:
        super().__init__()
        self.config = config
        d = config.reduced_dim
        self.reduce = nn.Linear(config.in_channels, d)
        self.learnable_tokens = nn.Parameter(torch.randn(config.num_learnable_tokens, d) * 0.02)
        self.layers = nn.ModuleList(SelfAttentionLayer(d, config.num_heads) for _ in range(config.fusion_depth))
        self.norm = nn.LayerNorm(d)
        layout = config.mlp_layout
        self.heads = nn.ModuleList()
        for fan_in, out, n in zip(layout[:-1], layout[1:], config.tokens_per_layer):
            self.heads.append(nn.Linear(d, (out // n) * (fan_in + 1)))

    def reduce_tokens(self, guidance_map: torch.Tensor) -> torch.Tensor:
        """``(B, C, h, w)`` -> ``(B, h*w, reduced_dim)`` in row-major raster order."""
        if guidance_map.ndim != 4 or guidance_map.shape[1] != self.config.in_channels:
            raise ConfigError(
                f"guidance map must be (B, {self.config.in_channels}, h, w), got {tuple(guidance_map.shape)}"
            )
        tokens = guidance_map.flatten(2).transpose(1, 2)
        return self.reduce(tokens)

    def predict_weights(self, tokens: torch.Tensor, grid_hw: tuple[int, int] | None = None) -> ImplicitFunctionWeights:
        """Mix guidance tokens with the learnable tokens and read out MLP weights.

        ``grid_hw`` is the spatial layout of ``tokens`` and is needed when
        positional encodings are enabled.
        """
        cfg = self.config
        b, n, d = tokens.shape
        if d != cfg.reduced_dim:
            raise InputError(f"token width {d} != reduced_dim {cfg.reduced_dim}")
        if n > cfg.max_tokens:
            raise InputError(f"{n} guidance tokens exceeds max_tokens={cfg.max_tokens}")
        if cfg.positional_encoding:
            if grid_hw is None or grid_hw[0] * grid_hw[1] != n:
                raise InputError("grid_hw matching the token count is required with positional encodings")
            tokens = tokens + positional_tokens(*grid_hw, d, tokens.dtype)
        learn = self.learnable_tokens.unsqueeze(0).expand(b, -1, -1)
        x = torch.cat([tokens, learn], dim=1)
        for layer in self.layers:
            x = layer(x)
        x = self.norm(x[:, n:])

        out = ImplicitFunctionWeights()
        layout = cfg.mlp_layout
        start = 0
        for head, fan_in, units, count in zip(self.heads, layout[:-1], layout[1:], cfg.tokens_per_layer):
            raw = head(x[:, start:start + count]).reshape(b, units, fan_in + 1)
            start += count
            out.weights.append(raw[..., :fan_in] / math.sqrt(fan_in))
            out.biases.append(raw[..., fan_in])
        return out

    def query(self, weights: ImplicitFunctionWeights, grid: PositionGrid) -> torch.Tensor:
        """Evaluate the coordinate MLP at every grid point -> ``(B, out, h, w)``."""
        weights.check_finite()
        coords = grid.coords.to(weights.weights[0].dtype)
        h = fourier_features(coords.reshape(-1, 2), self.config.fourier_bands)
        h = h.unsqueeze(0).expand(weights.weights[0].shape[0], -1, -1)
        last = len(weights.weights) - 1
        for i, (w, bias) in enumerate(zip(weights.weights, weights.biases)):
            h = torch.baddbmm(bias.unsqueeze(1), h, w.transpose(1, 2))
            if i < last:
                h = F.silu(h)
        return h.transpose(1, 2).reshape(h.shape[0], -1, grid.height, grid.width)

    def forward(self, guidance_map: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
        tokens = self.reduce_tokens(guidance_map)
        weights = self.predict_weights(tokens, tuple(guidance_map.shape[-2:]))
        grid = make_grid(*target_hw, dtype=guidance_map.dtype)
        return self.query(weights, grid)


class BilinearConvUpsampler(nn.Module):
    """Baseline: bilinear interpolation followed by a small conv stack.

    ``out = skip(x_up) + body(x_up)``; the skip is a 1x1 conv, so setting it to
    the identity and zeroing the body's last conv passes the interpolation
    through unchanged.
    """

    def __init__(self, in_channels: int, out_channels: int, hidden: int | None = None) -> None:
        super().__init__()
        hidden = hidden or in_channels
        self.skip = nn.Conv2d(in_channels, out_channels, 1)
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, out_channels, 3, padding=1),
        )

    def forward(self, guidance_map: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
        h, w = guidance_map.shape[-2:]
        if target_hw[0] < h or target_hw[1] < w:
            raise InputError(f"cannot downscale guidance from {h}x{w} to {target_hw[0]}x{target_hw[1]}")
        x = F.interpolate(guidance_map, size=tuple(target_hw), mode="bilinear", align_corners=False)
        return self.skip(x) + self.body(x)


def bilinear_conv_upsample(
    module: BilinearConvUpsampler, guidance_map: torch.Tensor, target_hw: tuple[int, int]
) -> torch.Tensor:
    return module(guidance_map, target_hw)

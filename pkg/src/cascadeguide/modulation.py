"""Conditioning algebra for the high-resolution branch.

Three residual operations live here, all exact identities at initialization:

* guidance fusion, ``f' = Linear(concat(f, g')) + f``
* time modulation of the fused feature, ``f'' = Norm(f') * L1(e_t) + L2(e_t) + f'``
* scale-aware normalization, ``f' = Norm(f) * L1(e_s) + L2(e_s) + f``

The last two are the same module driven by different conditioning vectors.
"""

from __future__ import annotations

import math
from typing import Union

import torch
from torch import nn

from .errors import ConfigError, DomainError, InputError

# Continuous t in [0, 1] is stretched onto the range classic discrete-step
# embeddings were tuned for, so low frequencies still vary over [0, 1].
TIME_SCALE = 1000.0
MAX_PERIOD = 10000.0


def sinusoidal_embedding(x: Union[float, torch.Tensor], dim: int) -> torch.Tensor:
    """Sin/cos embedding over a geometric frequency ladder.

    Frequency ``k`` is ``MAX_PERIOD ** (-k / (dim / 2))`` applied to
    ``TIME_SCALE * x``; the output is ``[sin(...), cos(...)]`` so every
    (sin, cos) pair has unit norm.

    Args:
        x: Scalar or tensor of shape ``(B,)``.
        dim: Even embedding width.

    Returns:
        Tensor of shape ``(dim,)`` for scalar input, ``(B, dim)`` otherwise.
    """
    if dim <= 0 or dim % 2:
        raise ConfigError(f"embedding dim must be positive and even, got {dim}")
    scalar = not isinstance(x, torch.Tensor)
    xt = torch.as_tensor(x, dtype=torch.float64 if scalar else None)
    if not xt.is_floating_point():
        xt = xt.to(torch.get_default_dtype())
    half = dim // 2
    freqs = torch.exp(
        -math.log(MAX_PERIOD) * torch.arange(half, dtype=torch.float64) / half
    ).to(xt.dtype)
    angles = (TIME_SCALE * xt.reshape(-1, 1)) * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if scalar:
        return emb[0].to(torch.get_default_dtype())
    return emb.reshape(*xt.shape, dim)


def scale_value(n_high: int, n_low: int) -> float:
    """``log_{n_high}(n_low)``: 1 at the base size, shrinking as the target grows."""
    if n_low < 2:
        raise DomainError(f"n_low must be >= 2, got {n_low}")
    if n_high < n_low:
        raise DomainError(f"n_high ({n_high}) < n_low ({n_low}): only upscaling is supported")
    if n_high == n_low:
        return 1.0
    return math.log(n_low) / math.log(n_high)


def scale_embed(s: Union[float, torch.Tensor], dim: int) -> torch.Tensor:
    if isinstance(s, torch.Tensor):
        if s.numel() and (s.min() <= 0 or s.max() > 1):
            raise DomainError("scale value must lie in (0, 1]")
    elif not 0.0 < s <= 1.0:
        raise DomainError(f"scale value must lie in (0, 1], got {s}")
    return sinusoidal_embedding(s, dim)


def channel_norm(f: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Layer norm over the channel axis of ``(B, C, H, W)``, no learned affine."""
    mu = f.mean(dim=1, keepdim=True)
    var = f.var(dim=1, unbiased=False, keepdim=True)
    return (f - mu) / torch.sqrt(var + eps)


class AffineModulation(nn.Module):
    """``Norm(f) * L1(e) + L2(e) + f`` with both linears zero-initialized.

    Used for time modulation of fused guidance (``e = e_t``) and for
    scale-aware normalization (``e = e_s``).
    """

    def __init__(self, channels: int, embed_dim: int) -> None:
        super().__init__()
        self.channels = channels
        self.embed_dim = embed_dim
        self.scale = nn.Linear(embed_dim, channels)
        self.shift = nn.Linear(embed_dim, channels)
        for lin in (self.scale, self.shift):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def factors(self, e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if e.shape[-1] != self.embed_dim:
            raise InputError(f"conditioning width {e.shape[-1]} != {self.embed_dim}")
        return self.scale(e), self.shift(e)

    def forward(self, f: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        if f.shape[1] != self.channels:
            raise InputError(f"feature has {f.shape[1]} channels, expected {self.channels}")
        a, b = self.factors(e)
        if a.ndim == 1:
            a, b = a.unsqueeze(0), b.unsqueeze(0)
        return channel_norm(f) * a[:, :, None, None] + b[:, :, None, None] + f


def time_modulate(mod: AffineModulation, f: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
    return mod(f, e_t)


def scale_aware_norm(mod: AffineModulation, f: torch.Tensor, e_s: torch.Tensor) -> torch.Tensor:
    return mod(f, e_s)


class GuidanceFusion(nn.Module):
    """Fuse upsampled guidance into a feature map, then modulate by time.

    The concat-linear is a 1x1 convolution over channels; it is zero-initialized
    so that the fused feature equals the input at the start of fine-tuning.
    """

    def __init__(self, channels: int, guide_channels: int, embed_dim: int) -> None:
        super().__init__()
        self.proj = nn.Conv2d(channels + guide_channels, channels, kernel_size=1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.time_mod = AffineModulation(channels, embed_dim)

    def fuse(self, f: torch.Tensor, g_prime: torch.Tensor) -> torch.Tensor:
        if f.shape[-2:] != g_prime.shape[-2:]:
            raise InputError(
                f"guidance spatial shape {tuple(g_prime.shape[-2:])} != feature {tuple(f.shape[-2:])}"
            )
        if g_prime.shape[0] != f.shape[0]:
            g_prime = g_prime.expand(f.shape[0], *g_prime.shape[1:])
        return self.proj(torch.cat([f, g_prime], dim=1)) + f

    def forward(self, f: torch.Tensor, g_prime: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        return self.time_mod(self.fuse(f, g_prime), e_t)


def fuse_guidance(fusion: GuidanceFusion, f: torch.Tensor, g_prime: torch.Tensor) -> torch.Tensor:
    return fusion.fuse(f, g_prime)


__all__ = [
    "AffineModulation",
    "GuidanceFusion",
    "channel_norm",
    "fuse_guidance",
    "scale_aware_norm",
    "scale_embed",
    "scale_value",
    "sinusoidal_embedding",
    "time_modulate",
]

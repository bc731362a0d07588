"""Continuous-time variance schedule and the forward corruption process.

Time runs over ``[0, 1]``; ``t = 0`` is clean data and ``t = 1`` is (nearly)
pure noise. The corruption is

    z_t = sqrt(alpha_bar(t)) * z_0 + sqrt(1 - alpha_bar(t)) * eps,  eps ~ N(0, I)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import torch

from .errors import DomainError, InputError

TimeLike = Union[float, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine schedule with a small offset, normalized so alpha_bar(0) = 1.

    The floor is applied affinely, ``1 - (1 - clip_min) * (1 - raw)``, rather
    than with a hard clamp, so the schedule stays strictly decreasing all the
    way to ``t = 1``.
    """

    kind: str = "cosine"
    offset: float = 0.008
    clip_min: float = 1e-5

    def __post_init__(self) -> None:
        if self.kind != "cosine":
            raise DomainError(f"unsupported schedule kind {self.kind!r}")
        if not 0.0 < self.offset:
            raise DomainError("offset must be positive")
        if not 0.0 < self.clip_min <= 1e-3:
            raise DomainError("clip_min must lie in (0, 1e-3]")


@dataclass
class CorruptionSample:
    z_t: torch.Tensor
    epsilon: torch.Tensor
    t: TimeLike


def _check_time(t: TimeLike) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() and (not torch.isfinite(t).all() or t.min() < 0 or t.max() > 1):
            raise DomainError("t must lie in [0, 1]")
    elif not (0.0 <= t <= 1.0):
        raise DomainError(f"t must lie in [0, 1], got {t}")


def alpha_bar(schedule: NoiseSchedule, t: TimeLike) -> TimeLike:
    """Signal retention coefficient at continuous time ``t``.

    Returns a Python float for float input and a tensor (same dtype) otherwise.
    """
    _check_time(t)
    s = schedule.offset
    norm = math.cos(s / (1 + s) * math.pi / 2) ** 2
    if isinstance(t, torch.Tensor):
        t64 = t.to(torch.float64)
        raw = torch.cos((t64 + s) / (1 + s) * (math.pi / 2)) ** 2 / norm
        return (1.0 - (1.0 - schedule.clip_min) * (1.0 - raw)).to(t.dtype)
    raw = math.cos((t + s) / (1 + s) * math.pi / 2) ** 2 / norm
    # written as 1 - (...) so that t = 0 gives exactly 1.0
    return 1.0 - (1.0 - schedule.clip_min) * (1.0 - raw)


def _broadcast_time(t: TimeLike, like: torch.Tensor) -> TimeLike:
    if isinstance(t, torch.Tensor) and t.ndim == 1 and like.ndim > 1:
        return t.to(like.dtype).view(-1, *([1] * (like.ndim - 1)))
    return t


def corrupt(
    schedule: NoiseSchedule,
    z0: torch.Tensor,
    t: TimeLike,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> CorruptionSample:
    """Draw ``z_t ~ q(z_t | z_0)``.

    ``t`` may be a float or a per-sample tensor of shape ``(B,)``. If ``noise``
    is given it is used as ``eps`` instead of drawing from ``generator``.
    """
    if not torch.isfinite(z0).all():
        raise InputError("z0 contains non-finite values")
    if noise is None:
        noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
    elif noise.shape != z0.shape:
        raise InputError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.shape)}")
    ab = _broadcast_time(alpha_bar(schedule, t), z0)
    if isinstance(ab, torch.Tensor):
        z_t = ab.sqrt() * z0 + (1 - ab).sqrt() * noise
    else:
        z_t = math.sqrt(ab) * z0 + math.sqrt(1 - ab) * noise
    return CorruptionSample(z_t=z_t, epsilon=noise, t=t)

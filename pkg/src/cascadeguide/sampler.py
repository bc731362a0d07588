"""DDIM sampling over continuous time with classifier-free guidance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

import torch

from .errors import ConfigError, DomainError, InputError
from .schedule import NoiseSchedule, alpha_bar

T_MAX = 1.0 - 1e-3


def uniform_t_schedule(steps: int, t_max: float = T_MAX) -> list[float]:
    if steps < 1:
        raise ConfigError("sampler.steps must be >= 1")
    return [t_max * (1.0 - i / steps) for i in range(steps + 1)]


@dataclass
class SamplerConfig:
    steps: int = 20
    cfg_weight: float = 4.0
    eta: float = 0.0
    t_schedule: list[float] = field(default_factory=list)
    guidance_on_uncond: bool = True

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError("sampler.steps must be >= 1")
        if not self.t_schedule:
            self.t_schedule = uniform_t_schedule(self.steps)
        ts = self.t_schedule
        if len(ts) != self.steps + 1 or ts[-1] != 0.0:
            raise ConfigError("t_schedule must have steps + 1 entries ending at 0")
        if any(b >= a for a, b in zip(ts, ts[1:])) or ts[0] > 1.0:
            raise ConfigError("t_schedule must be strictly decreasing within (0, 1]")
        if self.eta < 0:
            raise ConfigError("sampler.eta must be >= 0")


class NoisePredictor(Protocol):
    latent_channels: int

    def condition(self, labels, t, scale=None, guidance=None): ...

    def predict_epsilon(self, z_t: torch.Tensor, cond) -> torch.Tensor: ...


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise InputError(f"shape mismatch {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    return eps_uncond + w * (eps_cond - eps_uncond)


def ddim_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: float,
    t_prev: float,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """One DDIM update from ``t`` to ``t_prev`` through the predicted clean latent."""
    if not 0.0 <= t_prev < t <= 1.0:
        raise DomainError(f"need 0 <= t_prev < t <= 1, got t={t}, t_prev={t_prev}")
    ab = alpha_bar(schedule, t)
    ab_prev = alpha_bar(schedule, t_prev)
    z0_hat = (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    if eta == 0.0:
        return math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps_hat
    sigma = eta * math.sqrt((1 - ab_prev) / (1 - ab)) * math.sqrt(1 - ab / ab_prev)
    direction = math.sqrt(max(1 - ab_prev - sigma**2, 0.0)) * eps_hat
    noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
    return math.sqrt(ab_prev) * z0_hat + direction + sigma * noise


def guided_epsilon(
    model: NoisePredictor,
    z: torch.Tensor,
    t: float,
    labels: torch.Tensor,
    cfg_weight: float,
    scale: float | None = None,
    guidance: list[torch.Tensor] | None = None,
    guidance_on_uncond: bool = True,
    null_label: int = 0,
) -> torch.Tensor:
    """Conditional and null-label predictions in one batched call, then CFG."""
    b = z.shape[0]
    if cfg_weight == 1.0:
        return model.predict_epsilon(z, model.condition(labels, t, scale, guidance))
    null = torch.full_like(labels, null_label)
    if guidance is not None and not guidance_on_uncond:
        eps_c = model.predict_epsilon(z, model.condition(labels, t, scale, guidance))
        eps_u = model.predict_epsilon(z, model.condition(null, t, scale, None))
        return cfg_combine(eps_c, eps_u, cfg_weight)
    g2 = None
    if guidance is not None:
        g2 = [torch.cat([g.expand(b, *g.shape[1:])] * 2) for g in guidance]
    eps = model.predict_epsilon(torch.cat([z, z]), model.condition(torch.cat([labels, null]), t, scale, g2))
    return cfg_combine(eps[:b], eps[b:], cfg_weight)


@torch.no_grad()
def sample(
    model: NoisePredictor,
    labels: torch.Tensor,
    config: SamplerConfig,
    target_hw: tuple[int, int],
    schedule: NoiseSchedule,
    guidance: Optional[list[torch.Tensor]] = None,
    scale: float | None = None,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
    trajectory: list[torch.Tensor] | None = None,
) -> torch.Tensor:
    """Run DDIM from pure noise along ``config.t_schedule``.

    If ``trajectory`` is a list, every intermediate latent is appended to it.
    """
    shape = (labels.shape[0], model.latent_channels, *target_hw)
    z = torch.randn(shape, generator=generator, dtype=dtype)
    if trajectory is not None:
        trajectory.append(z.clone())
    ts = config.t_schedule
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps = guided_epsilon(
            model, z, t, labels, config.cfg_weight, scale, guidance, config.guidance_on_uncond
        )
        z = ddim_step(z, eps, t, t_prev, schedule, config.eta, generator)
        if trajectory is not None:
            trajectory.append(z.clone())
    return z

import math

import pytest
import torch

from cascadeguide.errors import ConfigError, DomainError, InputError
from cascadeguide.sampler import T_MAX, SamplerConfig, cfg_combine, ddim_step, guided_epsilon, sample, uniform_t_schedule
from cascadeguide.schedule import NoiseSchedule, alpha_bar, corrupt

SCHED = NoiseSchedule()


class GaussianOracle:
    """Exact noise predictor for unit-Gaussian data: eps*(z, t) = z * sqrt(1 - abar(t))."""

    latent_channels = 1

    def condition(self, labels, t, scale=None, guidance=None):
        return t

    def predict_epsilon(self, z, t):
        return z * math.sqrt(1 - alpha_bar(SCHED, t))


class Recorder:
    latent_channels = 2

    def __init__(self):
        self.calls = []

    def condition(self, labels, t, scale=None, guidance=None):
        return (labels, t, scale, guidance)

    def predict_epsilon(self, z, cond):
        labels, t, scale, guidance = cond
        self.calls.append((labels.clone(), guidance is not None))
        return z * 0 + labels.view(-1, 1, 1, 1).to(z.dtype)


def test_uniform_schedule():
    ts = uniform_t_schedule(4)
    assert len(ts) == 5 and ts[0] == T_MAX and ts[-1] == 0.0
    assert all(a > b for a, b in zip(ts, ts[1:]))


def test_config_defaults_and_validation():
    cfg = SamplerConfig()
    assert (cfg.steps, cfg.cfg_weight, cfg.eta) == (20, 4.0, 0.0)
    with pytest.raises(ConfigError):
        SamplerConfig(steps=0)
    with pytest.raises(ConfigError):
        SamplerConfig(steps=2, t_schedule=[0.5, 0.6, 0.0])
    with pytest.raises(ConfigError):
        SamplerConfig(steps=2, t_schedule=[0.9, 0.5, 0.1])


def test_cfg_combine():
    c, u = torch.tensor([2.0]), torch.tensor([1.0])
    assert cfg_combine(c, u, 4.0).item() == 5.0
    assert cfg_combine(c, u, 1.0).item() == 2.0
    assert cfg_combine(c, u, 0.0).item() == 1.0
    with pytest.raises(InputError):
        cfg_combine(torch.zeros(2), torch.zeros(3), 1.0)


def test_ddim_exact_inversion():
    gen = torch.Generator().manual_seed(0)
    z0 = torch.randn(50, 3, dtype=torch.float64, generator=gen)
    eps = torch.randn(50, 3, dtype=torch.float64, generator=gen)
    for t in (0.1, 0.5, 0.95):
        zt = corrupt(SCHED, z0, t, noise=eps).z_t
        rec = ddim_step(zt, eps, t, 0.0, SCHED)
        torch.testing.assert_close(rec, z0, rtol=1e-10, atol=1e-10)


def test_ddim_step_domain():
    z = torch.zeros(1)
    with pytest.raises(DomainError):
        ddim_step(z, z, 0.3, 0.5, SCHED)
    with pytest.raises(DomainError):
        ddim_step(z, z, 0.3, 0.3, SCHED)


def test_ddim_eta_adds_noise_only_when_positive():
    z = torch.randn(4, dtype=torch.float64)
    e = torch.randn(4, dtype=torch.float64)
    a = ddim_step(z, e, 0.6, 0.3, SCHED, eta=0.0)
    b = ddim_step(z, e, 0.6, 0.3, SCHED, eta=1.0, generator=torch.Generator().manual_seed(0))
    assert not torch.allclose(a, b)


def test_guided_epsilon_batches_cond_and_null():
    rec = Recorder()
    z = torch.zeros(2, 2, 3, 3)
    labels = torch.tensor([1, 2])
    out = guided_epsilon(rec, z, 0.5, labels, 4.0)
    assert len(rec.calls) == 1 and rec.calls[0][0].tolist() == [1, 2, 0, 0]
    # eps_u = 0, eps_c = label -> w * label
    assert out[:, 0, 0, 0].tolist() == [4.0, 8.0]


def test_guided_epsilon_weight_one_skips_null():
    rec = Recorder()
    guided_epsilon(rec, torch.zeros(1, 2, 2, 2), 0.5, torch.tensor([1]), 1.0)
    assert rec.calls[0][0].tolist() == [1]


def test_guidance_on_uncond_switch():
    rec = Recorder()
    g = [torch.zeros(1, 4, 2, 2)]
    guided_epsilon(rec, torch.zeros(1, 2, 2, 2), 0.5, torch.tensor([1]), 4.0, guidance=g, guidance_on_uncond=False)
    assert [c[1] for c in rec.calls] == [True, False]


def test_sample_deterministic_and_trajectory():
    cfg = SamplerConfig(steps=5)
    traj = []
    a = sample(GaussianOracle(), torch.zeros(8, dtype=torch.long), cfg, (2, 2), SCHED,
               generator=torch.Generator().manual_seed(1), trajectory=traj)
    b = sample(GaussianOracle(), torch.zeros(8, dtype=torch.long), cfg, (2, 2), SCHED,
               generator=torch.Generator().manual_seed(1))
    assert torch.equal(a, b) and len(traj) == 6


def test_gaussian_oracle_shrink_matches_closed_form():
    # exact eps* makes each DDIM step a rotation by the angle increment scaled
    # by cos of it; the product over steps has a closed form
    steps = 10
    cfg = SamplerConfig(steps=steps, cfg_weight=1.0)
    z = sample(GaussianOracle(), torch.zeros(1, dtype=torch.long), cfg, (1, 1), SCHED, dtype=torch.float64,
               generator=torch.Generator().manual_seed(0))
    z_start = torch.randn((1, 1, 1, 1), generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    phis = [math.acos(math.sqrt(alpha_bar(SCHED, t))) for t in cfg.t_schedule]
    factor = 1.0
    for a, b in zip(phis, phis[1:]):
        factor *= math.cos(a - b)
    torch.testing.assert_close(z, z_start * factor, rtol=1e-10, atol=0)

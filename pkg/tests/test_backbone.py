import itertools

import pytest
import torch

from cascadeguide.backbone import (
    AdapterConfig,
    BackboneConfig,
    GuidedDenoiser,
    config_dict,
    model_from_config,
    partition_parameters,
)
from cascadeguide.errors import ConfigError, InputError
from cascadeguide.modulation import scale_value
from cascadeguide.schedule import NoiseSchedule

from conftest import perturb_adapter, tiny_adapter, tiny_backbone

SCHED = NoiseSchedule()


def linear(i, o):
    return i * o + o


def conv(i, o, k):
    return i * o * k * k + o


def group_norm(c):
    return 2 * c


def hand_count_tiny():
    """Independent enumeration for C=8, E=8, vocab 3, 2 attention blocks, 2 hooks."""
    c, e, lat, vocab = 8, 8, 4, 3
    res = group_norm(c) + linear(e, 2 * c) + conv(c, 2 * c, 3) + group_norm(2 * c) + conv(2 * c, c, 3)
    attn = (group_norm(c) + linear(e, 2 * c) + linear(c, 3 * c) + linear(c, c)
            + group_norm(c) + conv(c, 2 * c, 1) + conv(2 * c, c, 1))
    base = (vocab * e + 2 * linear(e, e) + conv(lat, c, 3) + 2 * (res + attn)
            + group_norm(c) + conv(c, lat, 3))
    d, tokens, pe, hidden, out = 8, 4, 2 + 4 * 4, 8, 8
    layer = 2 * d + linear(d, 3 * d) + linear(d, d) + 2 * d + linear(d, 2 * d) + linear(2 * d, d)
    # 4 tokens over output widths (8, 8): 2 tokens per layer, 4 units each
    heads = linear(d, 4 * (pe + 1)) + linear(d, 4 * (hidden + 1))
    inr = linear(c, d) + tokens * d + layer + 2 * d + heads
    modulation = 2 * linear(e, c)
    fusion = conv(c + out, c, 1) + modulation
    adapter = 2 * inr + 2 * fusion + 4 * modulation
    return base, adapter


def counts(model):
    part = partition_parameters(model)
    params = dict(model.named_parameters())
    return (sum(params[n].numel() for n in part.frozen_names),
            sum(params[n].numel() for n in part.trainable_names))


def test_hand_enumeration(tiny_model):
    assert hand_count_tiny() == (7300, 4592)
    assert counts(tiny_model) == (7300, 4592)


def test_partition_is_complete_and_disjoint(tiny_model):
    part = partition_parameters(tiny_model)
    names = {n for n, _ in tiny_model.named_parameters()}
    assert part.frozen_names | part.trainable_names == names
    assert not part.frozen_names & part.trainable_names
    assert all(n.startswith("base.") for n in part.frozen_names)


def test_flags_never_change_base_shapes():
    ref = {k: v.shape for k, v in GuidedDenoiser(tiny_backbone()).base.state_dict().items()}
    for up, san, guid, te in itertools.product(("inr", "bi_conv"), (True, False), (True, False), ("shared", "own")):
        m = GuidedDenoiser(tiny_backbone(), tiny_adapter(upsampler=up, san=san, guidance=guid, time_embedding=te))
        assert {k: v.shape for k, v in m.base.state_dict().items()} == ref


def _inputs(model, b=2, hw=(6, 6), seed=0):
    gen = torch.Generator().manual_seed(seed)
    z_lr = torch.randn(b, 4, 4, 4, generator=gen)
    z = torch.randn(b, 4, *hw, generator=gen)
    labels = torch.tensor([1, 2])[:b]
    bundle = model.extract_guidance(z_lr, labels, SCHED, 0.05, gen)
    g = model.upsample_guidance(bundle, hw)
    s = scale_value(hw[0] * hw[1], 16)
    return z, labels, g, s


def test_zero_init_transparency(tiny_model):
    with torch.no_grad():
        z, labels, g, s = _inputs(tiny_model)
        plain = tiny_model(z, tiny_model.condition(labels, 0.4))
        guided = tiny_model(z, tiny_model.condition(labels, 0.4, s, g))
    assert torch.equal(plain, guided)


def test_adapter_changes_output_once_trained(tiny_model):
    perturb_adapter(tiny_model)
    with torch.no_grad():
        z, labels, g, s = _inputs(tiny_model)
        plain = tiny_model(z, tiny_model.condition(labels, 0.4))
        guided = tiny_model(z, tiny_model.condition(labels, 0.4, s, g))
    assert not torch.allclose(plain, guided)


def test_base_call_ignores_adapter(tiny_model):
    z = torch.randn(2, 4, 4, 4)
    labels = torch.tensor([1, 2])
    with torch.no_grad():
        before = tiny_model(z, tiny_model.condition(labels, 0.3))
        perturb_adapter(tiny_model)
        after = tiny_model(z, tiny_model.condition(labels, 0.3))
    assert torch.equal(before, after)


def test_guidance_bundle_shape(tiny_model):
    bundle = tiny_model.extract_guidance(torch.randn(3, 4, 4, 4), torch.tensor([1, 1, 2]), SCHED, 0.05)
    assert [lvl for lvl, _ in bundle.levels] == [0, 1]
    assert all(m.shape == (3, 8, 4, 4) for m in bundle.maps())


def test_guidance_is_captured_before_fusion(tiny_model):
    perturb_adapter(tiny_model)
    z, labels, g, s = _inputs(tiny_model)
    with torch.no_grad():
        _, plain = tiny_model._run_blocks(z, tiny_model.condition(labels, 0.4))
        _, fused = tiny_model._run_blocks(z, tiny_model.condition(labels, 0.4, None, g))
    assert torch.equal(plain[0], fused[0])  # first hook precedes every fusion
    assert not torch.equal(plain[1], fused[1])


def test_extraction_per_sample_times(tiny_model):
    t = torch.tensor([0.05, 0.7])
    bundle = tiny_model.extract_guidance(torch.randn(2, 4, 4, 4), torch.tensor([1, 2]), SCHED, t)
    assert bundle.maps()[0].shape == (2, 8, 4, 4)


def test_extraction_requires_base_size(tiny_model):
    with pytest.raises(InputError):
        tiny_model.extract_guidance(torch.randn(1, 4, 6, 6), torch.tensor([1]), SCHED)


def test_guidance_errors(tiny_model):
    z = torch.randn(1, 4, 6, 6)
    cond = tiny_model.condition(torch.tensor([1]), 0.5, None, [torch.zeros(1, 8, 5, 5)] * 2)
    with pytest.raises(InputError):
        tiny_model(z, cond)
    cond = tiny_model.condition(torch.tensor([1]), 0.5, None, [torch.zeros(1, 8, 6, 6)])
    with pytest.raises(InputError):
        tiny_model(z, cond)
    base_only = GuidedDenoiser(tiny_backbone())
    with pytest.raises(InputError):
        base_only(z, base_only.condition(torch.tensor([1]), 0.5, None, [torch.zeros(1, 8, 6, 6)] * 2))


def test_bi_conv_and_own_time_embedding_run():
    m = GuidedDenoiser(tiny_backbone(), tiny_adapter(upsampler="bi_conv", time_embedding="own"))
    z, labels, g, s = _inputs(m)
    assert m(z, m.condition(labels, 0.2, s, g)).shape == z.shape


def test_config_round_trip(tiny_model):
    clone = model_from_config(config_dict(tiny_model))
    assert clone.backbone_config == tiny_model.backbone_config
    assert clone.adapter_config == tiny_model.adapter_config


@pytest.mark.parametrize("kw", [
    {"hook_levels": (0, 0)}, {"hook_levels": (2,)}, {"cond_vocab": 1}, {"embed_dim": 7}, {"channels": 10},
])
def test_invalid_backbone_config(kw):
    with pytest.raises(ConfigError):
        tiny_backbone(**kw)


def test_inr_width_must_match_backbone():
    with pytest.raises(ConfigError):
        GuidedDenoiser(tiny_backbone(channels=16), tiny_adapter())


def test_invalid_adapter_flags():
    with pytest.raises(ConfigError):
        tiny_adapter(upsampler="nearest")
    with pytest.raises(ConfigError):
        tiny_adapter(time_embedding="none")

import pytest
import torch

from cascadeguide.backbone import GuidedDenoiser
from cascadeguide.codec import Autoencoder, CodecConfig
from cascadeguide.errors import ConfigError, DomainError, InputError
from cascadeguide.modulation import scale_value
from cascadeguide.pipeline import GenerationRequest, Pipeline, read_sidecar, sidecar_path
from cascadeguide.sampler import SamplerConfig, sample
from cascadeguide.config import generator
from cascadeguide.schedule import NoiseSchedule

from conftest import perturb_adapter, tiny_adapter, tiny_backbone

FAST = SamplerConfig(steps=4)


def _pipe(model=None, **kw):
    torch.manual_seed(0)
    codec = Autoencoder(CodecConfig(hidden=8)).eval()
    if model is None:
        model = GuidedDenoiser(tiny_backbone(), tiny_adapter(**kw))
    return Pipeline(model, codec, NoiseSchedule(), FAST, config_hash="abc")


def test_generate_lr_shapes_and_determinism():
    pipe = _pipe()
    req = GenerationRequest(label=1, target_image_hw=(32, 32), seed=4)
    z, bundle = pipe.generate_lr(req)
    z2, bundle2 = pipe.generate_lr(req)
    assert z.shape == (1, 4, 4, 4) and len(bundle.levels) == 2
    assert torch.equal(z, z2) and all(torch.equal(a, b) for a, b in zip(bundle.maps(), bundle2.maps()))


def test_lr_guidance_uses_training_extraction_path(monkeypatch):
    pipe = _pipe()
    seen = {}
    original = pipe.model.extract_guidance

    def spy(z0, labels, schedule, t, gen=None):
        seen["t"] = t
        seen["z0"] = z0
        return original(z0, labels, schedule, t, gen)

    monkeypatch.setattr(pipe.model, "extract_guidance", spy)
    z, _ = pipe.generate_lr(GenerationRequest(label=1, target_image_hw=(32, 32)))
    assert seen["t"] == 0.05 and torch.equal(seen["z0"], z)


def test_multiple_resolutions_from_one_model():
    pipe = _pipe()
    req = GenerationRequest(label=2, target_image_hw=(16, 16))
    _, bundle = pipe.generate_lr(req)
    for hw in ((32, 32), (48, 48), (48, 32)):
        r = GenerationRequest(label=2, target_image_hw=hw)
        z = pipe.generate_hr(bundle, r)
        assert z.shape == (1, 4, hw[0] // 4, hw[1] // 4)


def test_zero_adapter_without_guidance_matches_base_sampling():
    pipe = _pipe()
    req = GenerationRequest(label=1, target_image_hw=(32, 32), seed=9, guidance=False)
    _, bundle = pipe.generate_lr(req)
    hr = pipe.generate_hr(bundle, req)
    base = sample(pipe.model, torch.tensor([1]), FAST, (8, 8), NoiseSchedule(),
                  generator=generator(9, "hr_noise"))
    assert torch.equal(hr, base)


def test_scale_descriptor():
    pipe = _pipe()
    for hw in ((16, 16), (32, 32), (48, 32)):
        req = GenerationRequest(label=1, target_image_hw=hw)
        h, w = hw[0] // 4, hw[1] // 4
        assert pipe.scale_for(req) == scale_value(h * w, 16)


def test_stage_isolation(monkeypatch, tmp_path):
    pipe = _pipe()
    req = GenerationRequest(label=1, target_image_hw=(32, 32))
    _, bundle = pipe.generate_lr(req)

    def forbidden(*a, **k):
        raise AssertionError("HR stage re-entered LR sampling")

    monkeypatch.setattr(pipe, "generate_lr", forbidden)
    monkeypatch.setattr(pipe.model, "extract_guidance", forbidden)
    pipe.generate_hr(bundle, req)


def test_upsampler_flag_must_match_checkpoint():
    pipe = _pipe(upsampler="bi_conv")
    req = GenerationRequest(label=1, target_image_hw=(32, 32), upsampler="inr")
    _, bundle = pipe.generate_lr(req)
    with pytest.raises(ConfigError):
        pipe.generate_hr(bundle, req)


def test_upsampler_swap_changes_only_hr_stage():
    torch.manual_seed(0)
    inr_model = GuidedDenoiser(tiny_backbone(), tiny_adapter())
    bi_model = GuidedDenoiser(tiny_backbone(), tiny_adapter(upsampler="bi_conv"))
    bi_model.base.load_state_dict(inr_model.base.state_dict())
    perturb_adapter(inr_model)
    perturb_adapter(bi_model)
    req = GenerationRequest(label=1, target_image_hw=(32, 32), seed=1)
    a, b = _pipe(inr_model), _pipe(bi_model)
    za, ga = a.generate_lr(req)
    zb, gb = b.generate_lr(req)
    assert torch.equal(za, zb)
    assert not torch.equal(a.generate_hr(ga, req), b.generate_hr(gb, req))


def test_request_validation():
    pipe = _pipe()
    with pytest.raises(InputError):
        pipe.target_latent_hw(GenerationRequest(label=1, target_image_hw=(30, 32)))
    with pytest.raises(DomainError):
        pipe.target_latent_hw(GenerationRequest(label=1, target_image_hw=(8, 32)))
    with pytest.raises(InputError):
        pipe.generate_lr(GenerationRequest(label=0, target_image_hw=(32, 32)))
    with pytest.raises(DomainError):
        GenerationRequest(label=1, target_image_hw=(32, 32), t_extract=2.0)


def test_end_to_end_png_and_sidecar(tmp_path):
    pipe = _pipe()
    req = GenerationRequest(label=1, target_image_hw=(32, 48), seed=2)
    res = pipe.end_to_end(req, tmp_path / "a.png")
    again = pipe.end_to_end(req, tmp_path / "b.png")
    from PIL import Image
    with Image.open(res.path) as im:
        assert im.size == (48, 32)
    assert res.path.read_bytes() == again.path.read_bytes()
    meta = read_sidecar(sidecar_path(res.path))
    assert meta["seed"] == "2" and meta["config_hash"] == "abc" and "total_seconds" in meta
    assert {"lr_seconds", "hr_seconds", "decode_seconds"} <= set(res.timings)


def test_end_to_end_reports_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        _pipe().end_to_end(GenerationRequest(label=1, target_image_hw=(16, 16)), blocker / "out.png")

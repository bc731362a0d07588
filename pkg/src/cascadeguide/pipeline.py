"""Two-stage generation: LR latent -> guidance -> guided HR latent -> image.

The base-size latent is sampled with the frozen base network alone. Its final
clean latent is re-corrupted at ``t_extract`` and run through the base network
once more to capture the guidance maps, exactly as during adapter training.
The HR latent is then sampled with fusion and scale-aware normalization
active, and decoded to pixels.

Every random stream of a request is derived from ``request.seed``:
``lr_noise``, ``extract`` and ``hr_noise`` (and ``decoder`` when the
diffusion decoder is on).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import torch

from .backbone import GuidanceBundle, GuidedDenoiser
from .codec import Autoencoder, DiffusionDecoder, save_png
from .config import generator
from .errors import ConfigError, DomainError, InputError
from .modulation import scale_value
from .sampler import SamplerConfig, sample
from .schedule import NoiseSchedule


@dataclass
class GenerationRequest:
    label: int
    target_image_hw: tuple[int, int]
    seed: int = 0
    steps: Optional[int] = None
    cfg_weight: Optional[float] = None
    guidance: bool = True
    upsampler: Optional[str] = None  # must match the loaded adapter when set
    san: bool = True
    t_extract: float = 0.05

    def __post_init__(self) -> None:
        self.target_image_hw = tuple(int(v) for v in self.target_image_hw)
        if len(self.target_image_hw) != 2 or min(self.target_image_hw) < 1:
            raise InputError(f"target size must be two positive ints, got {self.target_image_hw}")
        if not 0.0 <= self.t_extract <= 1.0:
            raise DomainError(f"t_extract must lie in [0, 1], got {self.t_extract}")
        if self.upsampler not in (None, "inr", "bi_conv"):
            raise ConfigError(f"upsampler must be 'inr' or 'bi_conv', got {self.upsampler!r}")


@dataclass
class GenerationResult:
    path: Path
    timings: dict[str, float] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)


class Pipeline:
    """Holds read-only models; each request owns its random streams."""

    def __init__(
        self,
        model: GuidedDenoiser,
        codec: Autoencoder,
        schedule: NoiseSchedule = NoiseSchedule(),
        sampler: SamplerConfig | None = None,
        decoder: DiffusionDecoder | None = None,
        config_hash: str = "",
    ) -> None:
        if model.latent_channels != codec.config.latent_channels:
            raise ConfigError(
                f"model expects {model.latent_channels} latent channels, codec gives {codec.config.latent_channels}"
            )
        self.model = model.eval()
        self.codec = codec.eval()
        self.schedule = schedule
        self.sampler = sampler or SamplerConfig()
        self.decoder = decoder
        self.config_hash = config_hash

    # -- helpers ------------------------------------------------------------

    def _sampler_for(self, request: GenerationRequest) -> SamplerConfig:
        if request.steps is None and request.cfg_weight is None:
            return self.sampler
        return SamplerConfig(
            steps=request.steps or self.sampler.steps,
            cfg_weight=self.sampler.cfg_weight if request.cfg_weight is None else request.cfg_weight,
            eta=self.sampler.eta,
            guidance_on_uncond=self.sampler.guidance_on_uncond,
        )

    def target_latent_hw(self, request: GenerationRequest) -> tuple[int, int]:
        f = self.codec.config.spatial_factor
        h, w = request.target_image_hw
        if h % f or w % f:
            raise InputError(f"target {h}x{w} is not divisible by the codec factor {f}")
        lat = (h // f, w // f)
        base = self.model.backbone_config.base_latent_hw
        if lat[0] < base[0] or lat[1] < base[1]:
            raise DomainError(f"target latent {lat[0]}x{lat[1]} is smaller than the base latent {base[0]}x{base[1]}")
        return lat

    def _labels(self, request: GenerationRequest) -> torch.Tensor:
        vocab = self.model.backbone_config.cond_vocab
        if not 1 <= request.label < vocab:
            raise InputError(f"label {request.label} outside 1..{vocab - 1}")
        return torch.tensor([request.label], dtype=torch.long)

    # -- stages -------------------------------------------------------------

    def generate_lr(self, request: GenerationRequest) -> tuple[torch.Tensor, GuidanceBundle]:
        """Sample the base-size latent and extract guidance from it."""
        labels = self._labels(request)
        base_hw = self.model.backbone_config.base_latent_hw
        z0_lr = sample(
            self.model, labels, self._sampler_for(request), base_hw, self.schedule,
            generator=generator(request.seed, "lr_noise"), dtype=self.model.dtype,
        )
        with torch.no_grad():
            bundle = self.model.extract_guidance(
                z0_lr, labels, self.schedule, request.t_extract, generator(request.seed, "extract")
            )
        return z0_lr, bundle

    def scale_for(self, request: GenerationRequest) -> float:
        h, w = self.target_latent_hw(request)
        bh, bw = self.model.backbone_config.base_latent_hw
        return scale_value(h * w, bh * bw)

    def generate_hr(self, guidance: GuidanceBundle, request: GenerationRequest) -> torch.Tensor:
        """Sample the HR latent with fusion and scale-aware normalization active."""
        target = self.target_latent_hw(request)
        base_hw = self.model.backbone_config.base_latent_hw
        for _, m in guidance.levels:
            if tuple(m.shape[-2:]) != tuple(base_hw):
                raise InputError(f"guidance map {tuple(m.shape[-2:])} is not at base size {base_hw}")
        adapter_cfg = self.model.adapter_config
        if request.upsampler is not None and (adapter_cfg is None or adapter_cfg.upsampler != request.upsampler):
            have = adapter_cfg.upsampler if adapter_cfg else "none"
            raise ConfigError(f"request asks for upsampler {request.upsampler!r}; checkpoint has {have!r}")
        g_prime = None
        if request.guidance and adapter_cfg is not None and adapter_cfg.guidance:
            with torch.no_grad():
                g_prime = self.model.upsample_guidance(guidance, target)
        scale = self.scale_for(request) if request.san else None
        return sample(
            self.model, self._labels(request), self._sampler_for(request), target, self.schedule,
            guidance=g_prime, scale=scale, generator=generator(request.seed, "hr_noise"),
            dtype=self.model.dtype,
        )

    @torch.no_grad()
    def decode(self, latent: torch.Tensor, request: GenerationRequest) -> torch.Tensor:
        image = self.codec.decode(latent.to(torch.float32))
        if self.decoder is not None:
            image = self.decoder.refine(image, self.schedule, generator=generator(request.seed, "decoder"))
        return image[0]

    def end_to_end(self, request: GenerationRequest, out_path: str | Path) -> GenerationResult:
        """Run both stages, decode and write the PNG plus a ``.meta`` sidecar."""
        out_path = Path(out_path)
        self.target_latent_hw(request)  # fail fast before any sampling
        timings: dict[str, float] = {}
        t0 = time.perf_counter()
        _, bundle = self.generate_lr(request)
        t1 = time.perf_counter()
        z_hr = self.generate_hr(bundle, request)
        t2 = time.perf_counter()
        image = self.decode(z_hr, request)
        t3 = time.perf_counter()
        try:
            save_png(image, out_path)
        except OSError as exc:
            raise OSError(f"cannot write {out_path}: {exc}") from exc
        t4 = time.perf_counter()
        timings.update(lr_seconds=t1 - t0, hr_seconds=t2 - t1, decode_seconds=t3 - t2,
                       write_seconds=t4 - t3, total_seconds=t4 - t0)
        meta = {
            "image": out_path.name,
            "seed": request.seed,
            "label": request.label,
            "size": f"{request.target_image_hw[0]}x{request.target_image_hw[1]}",
            "scale": self.scale_for(request),
            "guidance": request.guidance,
            "san": request.san,
            "upsampler": self.model.adapter_config.upsampler if self.model.adapter_config else "none",
            "t_extract": request.t_extract,
            "steps": self._sampler_for(request).steps,
            "cfg_weight": self._sampler_for(request).cfg_weight,
            "decoder": "diffusion" if self.decoder is not None else "ae",
            "config_hash": self.config_hash,
            **{k: f"{v:.4f}" for k, v in timings.items()},
        }
        write_sidecar(sidecar_path(out_path), meta)
        return GenerationResult(out_path, timings, meta)


def sidecar_path(image_path: str | Path) -> Path:
    p = Path(image_path)
    return p.with_name(p.name + ".meta")


def write_sidecar(path: Path, meta: dict[str, Any]) -> Path:
    try:
        path.write_text("".join(f"{k} = {v}\n" for k, v in meta.items()), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write metadata {path}: {exc}") from exc
    return path


def read_sidecar(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = (p.strip() for p in line.split("=", 1))
            out[k] = v
    return out


def with_overrides(request: GenerationRequest, **changes: Any) -> GenerationRequest:
    return replace(request, **changes)

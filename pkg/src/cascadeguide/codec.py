"""Toy image <-> latent codec standing in for the cascade's compact space.

A deterministic convolutional autoencoder with a per-side downscale of
``spatial_factor`` (default 4) and ``latent_channels`` output channels; with
the defaults a 64x64 RGB image becomes a 4x16x16 latent (12:1 compression).
Latents are multiplied by a fixed ``latent_scale`` (set from data after
training) so the diffusion model sees roughly unit-variance inputs.

An optional pixel-space diffusion decoder refines the autoencoder output
(10 DDIM steps, CFG 1.1 by default); it is off unless requested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .errors import ConfigError, InputError
from .modulation import sinusoidal_embedding
from .sampler import SamplerConfig, sample
from .schedule import NoiseSchedule, corrupt


@dataclass(frozen=True)
class CodecConfig:
    spatial_factor: int = 4
    latent_channels: int = 4
    hidden: int = 32

    def __post_init__(self) -> None:
        f = self.spatial_factor
        if f < 1 or f & (f - 1):
            raise ConfigError("codec.spatial_factor must be a power of 2")
        if self.latent_channels < 1:
            raise ConfigError("codec.latent_channels must be positive")
        if self.compression_ratio <= 1:
            raise ConfigError("codec compression ratio must exceed 1")

    @property
    def compression_ratio(self) -> float:
        return 3 * self.spatial_factor**2 / self.latent_channels


class Autoencoder(nn.Module):
    def __init__(self, config: CodecConfig) -> None:
        super().__init__()
        self.config = config
        h = config.hidden
        n_down = int(math.log2(config.spatial_factor))
        enc: list[nn.Module] = [nn.Conv2d(3, h, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            enc += [nn.Conv2d(h, h, 4, stride=2, padding=1), nn.SiLU(), nn.Conv2d(h, h, 3, padding=1), nn.SiLU()]
        enc.append(nn.Conv2d(h, config.latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*enc)
        dec: list[nn.Module] = [nn.Conv2d(config.latent_channels, h, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(h, h, 3, padding=1), nn.SiLU(),
                    nn.Conv2d(h, h, 3, padding=1), nn.SiLU()]
        dec.append(nn.Conv2d(h, 3, 3, padding=1))
        self.decoder = nn.Sequential(*dec)
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` in [0, 1] -> ``(B, C, H/f, W/f)``."""
        f = self.config.spatial_factor
        if image.ndim != 4 or image.shape[1] != 3:
            raise InputError(f"expected (B, 3, H, W) images, got {tuple(image.shape)}")
        if image.shape[-2] % f or image.shape[-1] % f:
            raise InputError(f"image size {tuple(image.shape[-2:])} not divisible by spatial factor {f}")
        return self.encoder(image * 2 - 1) * self.latent_scale

    def decode_raw(self, latent: torch.Tensor) -> torch.Tensor:
        return (self.decoder(latent / self.latent_scale) + 1) / 2

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.ndim != 4 or latent.shape[1] != self.config.latent_channels:
            raise InputError(f"expected (B, {self.config.latent_channels}, h, w) latents, got {tuple(latent.shape)}")
        if not torch.isfinite(latent).all():
            raise InputError("latent contains non-finite values")
        return self.decode_raw(latent).clamp(0, 1)


def psnr(x: torch.Tensor | np.ndarray, y: torch.Tensor | np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` when equal."""
    x = torch.as_tensor(x, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=torch.float64)
    if x.shape != y.shape:
        raise InputError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = torch.mean((x - y) ** 2).item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def reconstruction_loss(x: torch.Tensor, y: torch.Tensor, edge_weight: float = 0.1) -> torch.Tensor:
    """MSE plus a penalty on mismatched horizontal/vertical differences."""
    mse = F.mse_loss(y, x)
    dx = F.mse_loss(y[..., :, 1:] - y[..., :, :-1], x[..., :, 1:] - x[..., :, :-1])
    dy = F.mse_loss(y[..., 1:, :] - y[..., :-1, :], x[..., 1:, :] - x[..., :-1, :])
    return mse + edge_weight * (dx + dy)


def train_codec(
    images: list[torch.Tensor],
    config: CodecConfig = CodecConfig(),
    steps: int = 1500,
    batch_size: int = 16,
    crop: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
    log_every: int = 0,
) -> Autoencoder:
    """Fit the autoencoder on random crops, then set ``latent_scale``.

    ``images`` are ``(3, H, W)`` tensors in [0, 1] of any size >= ``crop``.
    """
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    model = Autoencoder(config)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    for step in range(steps):
        batch = _random_crops(images, batch_size, crop, gen)
        loss = reconstruction_loss(batch, model.decode_raw(model.encode(batch)))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log_every and step % log_every == 0:
            print(f"codec step {step} loss {loss.item():.5f}")
    model.eval()
    with torch.no_grad():
        lat = torch.cat([model.encode(_random_crops(images, batch_size, crop, gen)) for _ in range(8)])
        model.latent_scale.fill_(1.0 / lat.std().item())
    model.requires_grad_(False)
    return model


def _random_crops(images: list[torch.Tensor], n: int, crop: int, gen: torch.Generator) -> torch.Tensor:
    out = []
    for _ in range(n):
        img = images[int(torch.randint(len(images), (1,), generator=gen))]
        _, h, w = img.shape
        if min(h, w) > crop and torch.rand((), generator=gen) < 0.5:
            # also show the codec whole images rescaled to the crop size
            out.append(F.interpolate(img[None], size=(crop, crop), mode="area")[0])
            continue
        top = int(torch.randint(h - crop + 1, (1,), generator=gen))
        left = int(torch.randint(w - crop + 1, (1,), generator=gen))
        out.append(img[:, top:top + crop, left:left + crop])
    return torch.stack(out)


@torch.no_grad()
def evaluate_codec(model: Autoencoder, images: list[torch.Tensor]) -> list[float]:
    f = model.config.spatial_factor
    scores = []
    for img in images:
        h, w = (img.shape[-2] // f) * f, (img.shape[-1] // f) * f
        x = img[None, :, :h, :w]
        scores.append(psnr(model.decode(model.encode(x)), x))
    return scores


# -- PNG I/O ----------------------------------------------------------------


def load_png(path: str | Path) -> torch.Tensor:
    """Read an 8-bit RGB PNG as a ``(3, H, W)`` float tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().clamp(0, 1).permute(1, 2, 0).to(torch.float64).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def save_png(image: torch.Tensor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")
    return path


# -- optional diffusion decoder -----------------------------------------------


class DiffusionDecoder(nn.Module):
    """Pixel-space denoiser conditioned on the autoencoder's reconstruction.

    Works on images mapped to [-1, 1]. The condition is the (upsampled)
    autoencoder output; an all-zero condition plays the role of the null label
    for classifier-free guidance.
    """

    latent_channels = 3

    def __init__(self, hidden: int = 32, embed_dim: int = 16) -> None:
        super().__init__()
        self.embed_dim = embed_dim
        self.time = nn.Sequential(nn.Linear(embed_dim, hidden), nn.SiLU())
        self.inp = nn.Conv2d(6, hidden, 3, padding=1)
        self.body = nn.Sequential(
            nn.SiLU(), nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
        )
        self.out = nn.Conv2d(hidden, 3, 3, padding=1)
        self._cond: torch.Tensor | None = None

    def condition(self, labels, t, scale=None, guidance=None):
        # ``labels`` is 1 for conditional rows, 0 for null rows
        return (labels, t)

    def predict_epsilon(self, z_t: torch.Tensor, cond) -> torch.Tensor:
        labels, t = cond
        ref = self._cond
        if ref.shape[0] != z_t.shape[0]:
            ref = ref.repeat(z_t.shape[0] // ref.shape[0], 1, 1, 1)
        ref = ref * labels.to(ref.dtype).view(-1, 1, 1, 1)
        if isinstance(t, torch.Tensor) and t.ndim == 1:
            e = sinusoidal_embedding(t.to(z_t.dtype), self.embed_dim)
        else:
            e = sinusoidal_embedding(float(t), self.embed_dim).to(z_t.dtype).expand(z_t.shape[0], -1)
        h = self.inp(torch.cat([z_t, ref], dim=1)) + self.time(e)[:, :, None, None]
        return self.out(self.body(h))

    @torch.no_grad()
    def refine(
        self,
        ae_image: torch.Tensor,
        schedule: NoiseSchedule,
        config: SamplerConfig | None = None,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        config = config or SamplerConfig(steps=10, cfg_weight=1.1)
        self._cond = ae_image * 2 - 1
        try:
            labels = torch.ones(ae_image.shape[0], dtype=torch.long)
            x = sample(self, labels, config, tuple(ae_image.shape[-2:]), schedule,
                       generator=generator, dtype=ae_image.dtype)
        finally:
            self._cond = None
        return ((x + 1) / 2).clamp(0, 1)


def train_diffusion_decoder(
    codec: Autoencoder,
    images: list[torch.Tensor],
    schedule: NoiseSchedule,
    steps: int = 500,
    batch_size: int = 8,
    crop: int = 64,
    lr: float = 1e-3,
    cond_dropout_p: float = 0.1,
    seed: int = 0,
) -> DiffusionDecoder:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    dec = DiffusionDecoder()
    opt = torch.optim.AdamW(dec.parameters(), lr=lr)
    for _ in range(steps):
        x = _random_crops(images, batch_size, crop, gen)
        with torch.no_grad():
            ref = codec.decode(codec.encode(x))
        x0 = x * 2 - 1
        t = torch.rand(batch_size, generator=gen)
        cs = corrupt(schedule, x0, t, gen)
        keep = (torch.rand(batch_size, generator=gen) >= cond_dropout_p).long()
        dec._cond = ref * 2 - 1
        eps = dec.predict_epsilon(cs.z_t, (keep, t))
        loss = F.mse_loss(eps, cs.epsilon)
        opt.zero_grad()
        loss.backward()
        opt.step()
    dec._cond = None
    dec.requires_grad_(False)
    return dec.eval()


# -- checkpoints ----------------------------------------------------------------


def save_codec(path: str | Path, model: Autoencoder, meta: dict | None = None) -> Path:
    from dataclasses import asdict

    from .checkpoint import save_checkpoint

    return save_checkpoint(path, model, {"codec": asdict(model.config)}, meta=meta)


def load_codec(path: str | Path) -> Autoencoder:
    from .checkpoint import CheckpointError, load_checkpoint

    manifest, state = load_checkpoint(path)
    if "codec" not in manifest["config"]:
        raise CheckpointError(f"{path} is not a codec checkpoint")
    model = Autoencoder(CodecConfig(**manifest["config"]["codec"]))
    model.load_state_dict(state)
    model.requires_grad_(False)
    return model.eval()


def save_decoder(path: str | Path, decoder: "DiffusionDecoder") -> Path:
    from .checkpoint import save_checkpoint

    hidden = decoder.inp.out_channels
    return save_checkpoint(path, decoder, {"decoder": {"hidden": hidden, "embed_dim": decoder.embed_dim}})


def load_decoder(path: str | Path) -> "DiffusionDecoder":
    from .checkpoint import CheckpointError, load_checkpoint

    manifest, state = load_checkpoint(path)
    if "decoder" not in manifest["config"]:
        raise CheckpointError(f"{path} is not a diffusion-decoder checkpoint")
    dec = DiffusionDecoder(**manifest["config"]["decoder"])
    dec.load_state_dict(state)
    dec.requires_grad_(False)
    return dec.eval()

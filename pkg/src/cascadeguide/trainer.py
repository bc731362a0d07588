"""Two-phase training and the ablation runner.

Phase ``base`` trains the base denoiser at the base latent size. Phase
``adapter`` loads a base checkpoint, freezes it, and trains only the adapter
on multi-resolution batches: each step picks one resolution bucket, extracts
guidance from the base-size latent corrupted at ``t_extract``, corrupts the
high-resolution latent at a uniformly drawn ``t`` and regresses the noise.

The denoising loss is the mean squared error over batch and elements.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Union

import torch
import torch.nn.functional as F

from .backbone import AdapterConfig, BackboneConfig, GuidedDenoiser, partition_parameters
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import Autoencoder
from .config import generator
from .errors import ConfigError, InputError, NumericError
from .inr import InrConfig
from .modulation import scale_value
from .schedule import NoiseSchedule, corrupt

TExtract = Union[float, str]


@dataclass
class TrainConfig:
    phase: str = "base"
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 16
    steps: int = 2000
    cond_dropout_p: float = 0.1
    t_extract: TExtract = 0.05
    seed: int = 0
    resolution_buckets: tuple[tuple[int, int], ...] = ((16, 16), (24, 24), (32, 32))
    base_checkpoint: str = ""
    log_every: int = 0

    def __post_init__(self) -> None:
        if self.phase not in ("base", "adapter"):
            raise ConfigError(f"trainer.phase must be 'base' or 'adapter', got {self.phase!r}")
        if not 0.0 <= self.cond_dropout_p <= 0.5:
            raise ConfigError("trainer.cond_dropout_p must lie in [0, 0.5]")
        if self.t_extract != "sync" and not (isinstance(self.t_extract, (int, float)) and 0 <= self.t_extract <= 1):
            raise ConfigError("trainer.t_extract must be 'sync' or a time in [0, 1]")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("trainer.batch_size must be >= 1 and trainer.steps >= 0")
        self.resolution_buckets = tuple(tuple(int(v) for v in b) for b in self.resolution_buckets)


# -- data -----------------------------------------------------------------------


def resize(images: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    if tuple(images.shape[-2:]) == tuple(hw):
        return images
    return F.interpolate(images, size=tuple(hw), mode="bilinear", align_corners=False, antialias=True).clamp(0, 1)


@torch.no_grad()
def encode_pair(
    images: torch.Tensor, codec: Autoencoder, hr_latent_hw: tuple[int, int], base_latent_hw: tuple[int, int]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Images -> (HR latent at ``hr_latent_hw``, base latent of the downsampled image)."""
    f = codec.config.spatial_factor
    hr = resize(images, (hr_latent_hw[0] * f, hr_latent_hw[1] * f))
    lr = resize(hr, (base_latent_hw[0] * f, base_latent_hw[1] * f))
    return codec.encode(hr), codec.encode(lr)


class LatentBank:
    """Pre-encoded latents for every image at the base size and each bucket.

    The codec is frozen, so encoding once up front is equivalent to encoding
    inside every step and much cheaper.
    """

    def __init__(
        self,
        images: list[torch.Tensor],
        labels: list[int],
        codec: Autoencoder,
        base_latent_hw: tuple[int, int],
        buckets: Iterable[tuple[int, int]] = (),
        chunk: int = 32,
    ) -> None:
        if len(images) != len(labels) or not images:
            raise InputError("need one label per image and at least one image")
        self.labels = torch.tensor(labels, dtype=torch.long)
        self.base_latent_hw = tuple(base_latent_hw)
        self.buckets = tuple(tuple(b) for b in buckets) or (self.base_latent_hw,)
        f = codec.config.spatial_factor
        base_img = (base_latent_hw[0] * f, base_latent_hw[1] * f)
        self.base: torch.Tensor
        self.hr: dict[tuple[int, int], torch.Tensor] = {}
        with torch.no_grad():
            lr_parts, hr_parts = [], {b: [] for b in self.buckets}
            for i in range(0, len(images), chunk):
                group = images[i:i + chunk]
                for b in self.buckets:
                    img_hw = (b[0] * f, b[1] * f)
                    batch = torch.stack([resize(im[None], img_hw)[0] for im in group])
                    hr_parts[b].append(codec.encode(batch))
                    if b == self.buckets[0]:
                        lr_img = resize(batch, base_img)
                        lr_parts.append(codec.encode(lr_img))
                if not self.buckets:
                    pass
            self.base = torch.cat(lr_parts)
            self.hr = {b: torch.cat(v) for b, v in hr_parts.items()}

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class Batch:
    z_hr: torch.Tensor
    z_lr: torch.Tensor
    labels: torch.Tensor
    bucket: tuple[int, int]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for t in (self.z_hr, self.z_lr, self.labels):
            h.update(t.detach().contiguous().cpu().numpy().tobytes())
        return h.hexdigest()[:16]


class BatchSampler:
    """Seed-deterministic batches; one resolution bucket per batch."""

    def __init__(self, bank: LatentBank, batch_size: int, seed: int, buckets: Iterable[tuple[int, int]] | None = None):
        self.bank = bank
        self.batch_size = batch_size
        self.buckets = tuple(tuple(b) for b in (buckets or bank.buckets))
        missing = [b for b in self.buckets if b not in bank.hr]
        if missing:
            raise ConfigError(f"latent bank has no bucket(s) {missing}")
        self.gen = generator(seed, "data")

    def next(self) -> Batch:
        k = int(torch.randint(len(self.buckets), (1,), generator=self.gen))
        bucket = self.buckets[k]
        idx = torch.randint(len(self.bank), (self.batch_size,), generator=self.gen)
        return Batch(self.bank.hr[bucket][idx], self.bank.base[idx], self.bank.labels[idx], bucket)


# -- losses ---------------------------------------------------------------------


def drop_labels(labels: torch.Tensor, p: float, gen: torch.Generator, null_label: int = 0) -> torch.Tensor:
    if p <= 0:
        return labels
    drop = torch.rand(labels.shape, generator=gen) < p
    return torch.where(drop, torch.full_like(labels, null_label), labels)


def base_loss(
    model: GuidedDenoiser,
    z0: torch.Tensor,
    labels: torch.Tensor,
    schedule: NoiseSchedule,
    gen: torch.Generator,
) -> torch.Tensor:
    t = torch.rand(z0.shape[0], generator=gen, dtype=z0.dtype)
    cs = corrupt(schedule, z0, t, gen)
    eps_hat = model.predict_epsilon(cs.z_t, model.condition(labels, t))
    return F.mse_loss(eps_hat, cs.epsilon)


def adapter_loss(
    model: GuidedDenoiser,
    z_hr: torch.Tensor,
    z_lr: torch.Tensor,
    labels: torch.Tensor,
    schedule: NoiseSchedule,
    gen: torch.Generator,
    t_extract: TExtract = 0.05,
    cond_labels: torch.Tensor | None = None,
) -> torch.Tensor:
    """Noise-regression loss of the guided high-resolution branch.

    ``labels`` condition the guidance pass; ``cond_labels`` (after CFG
    dropout) condition the prediction and default to ``labels``. With
    ``t_extract='sync'`` the guidance is corrupted at the same ``t`` as the HR
    latent; otherwise at the fixed time, with an independent noise draw.
    """
    b = z_hr.shape[0]
    t = torch.rand(b, generator=gen, dtype=z_hr.dtype)
    cfg = model.backbone_config
    use_guidance = model.adapter is not None and model.adapter_config.guidance
    guidance = None
    hr_hw = tuple(z_hr.shape[-2:])
    if use_guidance:
        te = t if t_extract == "sync" else float(t_extract)
        with torch.no_grad():
            bundle = model.extract_guidance(z_lr, labels, schedule, te, gen)
        guidance = model.upsample_guidance(bundle, hr_hw)
    cs = corrupt(schedule, z_hr, t, gen)
    s = scale_value(hr_hw[0] * hr_hw[1], cfg.base_latent_hw[0] * cfg.base_latent_hw[1])
    cond = model.condition(labels if cond_labels is None else cond_labels, t, s, guidance)
    eps_hat = model.predict_epsilon(cs.z_t, cond)
    return F.mse_loss(eps_hat, cs.epsilon)


def loss(
    images: torch.Tensor,
    labels: torch.Tensor,
    model: GuidedDenoiser,
    codec: Autoencoder,
    schedule: NoiseSchedule,
    gen: torch.Generator,
    t_extract: TExtract = 0.05,
) -> torch.Tensor:
    """Adapter-phase loss straight from a batch of HR images.

    Each image is encoded as-is (HR latent) and after downsampling to the base
    image size (base latent).
    """
    f = codec.config.spatial_factor
    h, w = images.shape[-2:]
    if h % f or w % f:
        raise InputError(f"image size {h}x{w} not divisible by codec factor {f}")
    z_hr, z_lr = encode_pair(images, codec, (h // f, w // f), model.backbone_config.base_latent_hw)
    return adapter_loss(model, z_hr, z_lr, labels, schedule, gen, t_extract)


# -- training -------------------------------------------------------------------


@dataclass
class TrainState:
    step: int = 0
    skipped: int = 0
    losses: list[float] = field(default_factory=list)
    first_batch: str = ""


class Trainer:
    """Single-writer training loop for either phase."""

    def __init__(
        self,
        model: GuidedDenoiser,
        config: TrainConfig,
        schedule: NoiseSchedule = NoiseSchedule(),
        log_path: str | Path | None = None,
    ) -> None:
        self.model = model
        self.config = config
        self.schedule = schedule
        self.state = TrainState()
        self.noise_gen = generator(config.seed, "noise")
        self.dropout_gen = generator(config.seed, "cond_dropout")
        part = partition_parameters(model)
        params = dict(model.named_parameters())
        if config.phase == "adapter":
            if model.adapter is None:
                raise ConfigError("adapter phase needs a model with an adapter")
            for n in part.frozen_names:
                params[n].requires_grad_(False)
            names = sorted(part.trainable_names)
        else:
            if model.adapter is not None:
                for n in part.trainable_names:
                    params[n].requires_grad_(False)
            names = sorted(part.frozen_names)
        for n in names:
            params[n].requires_grad_(True)
        self.param_names = names
        self.optimizer = torch.optim.AdamW(
            [params[n] for n in names], lr=config.lr, weight_decay=config.weight_decay
        )
        self.log_path = Path(log_path) if log_path else None
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("")

    def compute_loss(self, batch: Batch, cond_labels: torch.Tensor) -> torch.Tensor:
        if self.config.phase == "base":
            return base_loss(self.model, batch.z_lr, cond_labels, self.schedule, self.noise_gen)
        return adapter_loss(
            self.model, batch.z_hr, batch.z_lr, batch.labels, self.schedule, self.noise_gen,
            self.config.t_extract, cond_labels,
        )

    def train_step(self, batch: Batch) -> float:
        """One optimizer step; returns the loss (NaN if the step was skipped)."""
        if not self.state.first_batch:
            self.state.first_batch = batch.fingerprint()
        cond_labels = drop_labels(batch.labels, self.config.cond_dropout_p, self.dropout_gen)
        value = self.compute_loss(batch, cond_labels)
        if not torch.isfinite(value):
            raise NumericError(
                f"non-finite loss {value.item()} at step {self.state.step} "
                f"(phase={self.config.phase}, bucket={batch.bucket})"
            )
        self.optimizer.zero_grad(set_to_none=True)
        value.backward()
        grads_ok = all(
            p.grad is None or torch.isfinite(p.grad).all() for g in self.optimizer.param_groups for p in g["params"]
        )
        skipped = not grads_ok
        if skipped:
            self.state.skipped += 1
            self.optimizer.zero_grad(set_to_none=True)
        else:
            self.optimizer.step()
        loss_value = value.item()
        self.state.losses.append(loss_value)
        self._log(loss_value, skipped, batch.bucket)
        self.state.step += 1
        return loss_value

    def _log(self, loss_value: float, skipped: bool, bucket: tuple[int, int]) -> None:
        step = self.state.step
        if self.log_path:
            rec = {"step": step, "phase": self.config.phase, "loss": loss_value, "lr": self.config.lr,
                   "skipped": skipped, "bucket": f"{bucket[0]}x{bucket[1]}"}
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        every = self.config.log_every
        if every and step % every == 0:
            recent = self.state.losses[-every:]
            print(f"[{self.config.phase}] step {step} loss {sum(recent) / len(recent):.4f}", flush=True)

    def fit(self, sampler: BatchSampler, steps: int | None = None) -> TrainState:
        self.model.train()
        for _ in range(self.config.steps if steps is None else steps):
            self.train_step(sampler.next())
        self.model.eval()
        return self.state


# -- model construction and checkpoints -------------------------------------------


def build_base_model(backbone: BackboneConfig, seed: int) -> GuidedDenoiser:
    torch.manual_seed(seed)
    return GuidedDenoiser(backbone, None)


def build_adapter_model(base_ckpt: str | Path, adapter: AdapterConfig, seed: int) -> GuidedDenoiser:
    """Fresh adapter on top of a phase-1 checkpoint's base weights."""
    path = Path(base_ckpt)
    if not path.is_file():
        raise FileNotFoundError(f"adapter phase needs a base checkpoint; not found: {path}")
    manifest, state = load_checkpoint(path)
    backbone = BackboneConfig(**manifest["config"]["backbone"])
    torch.manual_seed(seed)
    model = GuidedDenoiser(backbone, adapter)
    base_state = {k: v for k, v in state.items() if k.startswith("base.")}
    missing = [k for k in model.state_dict() if k.startswith("base.") and k not in base_state]
    if missing:
        raise ConfigError(f"base checkpoint lacks {len(missing)} base tensors, e.g. {missing[0]}")
    model.load_state_dict(base_state, strict=False)
    return model


def save_model(path: str | Path, model: GuidedDenoiser, meta: dict[str, Any] | None = None) -> Path:
    from .backbone import config_dict

    part = partition_parameters(model)
    return save_checkpoint(path, model, config_dict(model), frozen=part.frozen_names, meta=meta)


def load_model(path: str | Path) -> GuidedDenoiser:
    from .backbone import model_from_config

    manifest, state = load_checkpoint(path)
    model = model_from_config(manifest["config"])
    model.load_state_dict(state)
    model.requires_grad_(False)
    return model.eval()


def trainable_count(model: GuidedDenoiser) -> tuple[int, int]:
    part = partition_parameters(model)
    params = dict(model.named_parameters())
    frozen = sum(params[n].numel() for n in part.frozen_names)
    trainable = sum(params[n].numel() for n in part.trainable_names)
    return frozen, trainable


# -- ablation -----------------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    t_extract: TExtract
    upsampler: str
    san: bool
    width: int

    @property
    def name(self) -> str:
        t = "t=tH" if self.t_extract == "sync" else f"t={self.t_extract}"
        return f"{t}|{self.upsampler}|san={'on' if self.san else 'off'}|w={self.width}"


def ablation_grid(
    t_extracts: Iterable[TExtract] = ("sync", 0.5, 0.05),
    upsamplers: Iterable[str] = ("inr", "bi_conv"),
    sans: Iterable[bool] = (True, False),
    widths: Iterable[int] = (512, 1024),
) -> list[Variant]:
    return [Variant(t, u, s, w) for t in t_extracts for u in upsamplers for s in sans for w in widths]


def _window_mean(xs: list[float], n: int, last: bool) -> float:
    xs = [x for x in xs if math.isfinite(x)]
    if not xs:
        return float("nan")
    part = xs[-n:] if last else xs[:n]
    return sum(part) / len(part)


def run_ablation(
    variants: list[Variant],
    base_ckpt: str | Path,
    bank: LatentBank,
    inr_template: InrConfig,
    config: TrainConfig,
    report_path: str | Path | None = None,
    window: int = 20,
    on_variant: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Train every variant from the same base checkpoint and seed.

    Returns one record per variant; failures are recorded, not raised.
    """
    rows = []
    report = Path(report_path) if report_path else None
    if report:
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text("")
    for v in variants:
        row: dict[str, Any] = {"variant": v.name, **asdict(v)}
        start = time.perf_counter()
        try:
            inr = replace(inr_template, reduced_dim=v.width)
            adapter = AdapterConfig(upsampler=v.upsampler, san=v.san, inr=inr)
            model = build_adapter_model(base_ckpt, adapter, config.seed)
            frozen, trainable = trainable_count(model)
            cfg = replace(config, phase="adapter", t_extract=v.t_extract)
            trainer = Trainer(model, cfg)
            state = trainer.fit(BatchSampler(bank, cfg.batch_size, cfg.seed, cfg.resolution_buckets))
            row.update(
                status="ok",
                frozen_params=frozen,
                trainable_params=trainable,
                trainable_fraction=trainable / (frozen + trainable),
                first_window_loss=_window_mean(state.losses, window, last=False),
                final_window_loss=_window_mean(state.losses, window, last=True),
                skipped_steps=state.skipped,
                first_batch=state.first_batch,
                losses=state.losses,
            )
        except Exception as exc:  # record and keep going
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        row["seconds"] = time.perf_counter() - start
        rows.append(row)
        if report:
            with open(report, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
        if on_variant:
            on_variant(row)
    return rows

"""Joint optimization: discriminator step, then encoder + both decoders through
the three distortion branches.

All randomness for step ``k`` comes from ``np.random.default_rng([seed, k])``
and batch order from a per-epoch permutation, so a run resumed from a
checkpoint replays exactly the same batches and distortions.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .data import AnnotatedImage, assign_messages, generate_synthetic_dataset
from .errors import NonFiniteLossError, ValidationError
from .geometry import crop_resample, paste_unclamped
from .metrics import psnr
from .models import ModelBundle, ModelConfig, bits_to_signal, harden, load_checkpoint, save_checkpoint
from .noise_pool import COVERAGE, sample_branch

log = logging.getLogger(__name__)

LOG_FIELDS = (
    "step", "loss_total", "loss_d", "loss_adv", "loss_en", "loss_tr", "loss_lo_com", "loss_lo_mal",
    "ber_tr", "ber_lo_com", "ber_lo_mal", "psnr_probe",
)


@dataclass
class DataConfig:
    count: int = 512
    canvas: tuple = (128, 128)
    faces_per_image: tuple = (1, 3)
    size_mean: float = 40.0
    size_spread: float = 12.0
    seed: int = 1234

    def __post_init__(self):
        self.canvas = tuple(self.canvas)
        self.faces_per_image = tuple(self.faces_per_image)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 4e-4
    betas: tuple = (0.9, 0.999)
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    device: str = "cpu"
    max_steps: int | None = None
    checkpoint_every: int = 250
    log_every: int = 50
    probe_size: int = 8
    quantize: bool = True
    compose_prob: float = 0.5
    swap_coverage: tuple = COVERAGE
    reduction: str = "mean"

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = L.LossWeights(**self.loss_weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        for name in ("epochs", "batch_size", "checkpoint_every", "log_every"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValidationError("max_steps must be >= 0")
        self.betas = tuple(self.betas)
        self.swap_coverage = tuple(self.swap_coverage)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


def full_config(**overrides) -> TrainConfig:
    """Full-scale settings: 64x64 patches, 15-bit payload, batch 64, 100 epochs."""
    cfg = dict(
        epochs=100, batch_size=64, learning_rate=4e-4,
        model=ModelConfig(patch_size=(64, 64), message_length=15, base_channels=32, depth=4),
        data=DataConfig(count=20000, canvas=(1024, 700), faces_per_image=(1, 8), size_mean=64.0, size_spread=24.0),
    )
    cfg.update(overrides)
    return TrainConfig(**cfg)


def desk_config(**overrides) -> TrainConfig:
    """CPU-sized settings: 128x128 canvases with 1-3 faces, 32x32 patches, batch 8."""
    cfg = dict(
        epochs=32, batch_size=8, max_steps=2000,
        model=ModelConfig(patch_size=(32, 32), message_length=15, base_channels=16, depth=3, disc_channels=8),
        data=DataConfig(),
    )
    cfg.update(overrides)
    return TrainConfig(**cfg)


def load_config(path) -> TrainConfig:
    """Read a JSON or YAML config; ``preset: desk|full`` picks the base values."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        obj = yaml.safe_load(text) or {}
    else:
        obj = json.loads(text)
    preset = obj.pop("preset", "desk")
    base = {"desk": desk_config, "full": full_config}.get(preset)
    if base is None:
        raise ValidationError(f"unknown preset {preset!r}")
    merged = base().to_dict()
    for key, value in obj.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return TrainConfig.from_dict(merged)


@dataclass
class Batch:
    images: torch.Tensor  # B x 3 x H x W
    boxes: list  # per image list of FaceBox
    bits: np.ndarray  # (sum N) x L

    @property
    def counts(self):
        return [len(b) for b in self.boxes]


@dataclass
class StepStats:
    step: int
    losses: dict
    total: float
    loss_d: float
    ber_tr: float
    ber_lo_com: float
    ber_lo_mal: float
    omega_size: int
    mal_active: bool

    def row(self, psnr_probe=float("nan")) -> dict:
        return {
            "step": self.step, "loss_total": self.total, "loss_d": self.loss_d,
            **{f"loss_{k}": v for k, v in self.losses.items()},
            "ber_tr": self.ber_tr, "ber_lo_com": self.ber_lo_com, "ber_lo_mal": self.ber_lo_mal,
            "psnr_probe": psnr_probe,
        }


class Trainer:
    """Owns the networks, both Adam optimizers and the step counter."""

    def __init__(self, config: TrainConfig, bundle: ModelBundle | None = None):
        self.config = config
        self.device = torch.device(config.device)
        if bundle is None:
            torch.manual_seed(config.seed)
            bundle = ModelBundle(config.model)
        self.bundle = bundle.to(self.device)
        self.opt_g = torch.optim.Adam(self.bundle.generator_parameters(), lr=config.learning_rate, betas=config.betas)
        self.opt_d = torch.optim.Adam(self.bundle.discriminator.parameters(), lr=config.learning_rate, betas=config.betas)
        self.step = 0

    # -- state -----------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.bundle, {
            "step": self.step,
            "train_config": self.config.to_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
        })

    @classmethod
    def restore(cls, path, config: TrainConfig | None = None) -> "Trainer":
        bundle, payload = load_checkpoint(path)
        config = config or TrainConfig.from_dict(payload["train_config"])
        trainer = cls(config, bundle)
        trainer.opt_g.load_state_dict(payload["opt_g"])
        trainer.opt_d.load_state_dict(payload["opt_d"])
        trainer.step = int(payload["step"])
        return trainer

    # -- one step --------------------------------------------------------

    def encode_images(self, images, boxes, signal, patch_size):
        """Crop, embed and paste every image; returns (covers, stegos, encoded images)."""
        covers, stegos, encoded = [], [], []
        offset = 0
        for img, bxs in zip(images, boxes):
            n = len(bxs)
            cover = crop_resample(img, bxs, patch_size).data
            stego = self.bundle.encoder(cover, signal[offset:offset + n]) if n else cover
            en = paste_unclamped(img, stego - cover, bxs).clamp(0.0, 1.0)
            if self.config.quantize:
                en = en + (torch.round(en * 255) / 255 - en).detach()
            covers.append(cover)
            stegos.append(stego)
            encoded.append(en)
            offset += n
        return torch.cat(covers), torch.cat(stegos), encoded

    def train_step(self, batch: Batch, rng: np.random.Generator) -> StepStats:
        cfg = self.config
        w = cfg.loss_weights
        patch = cfg.model.patch_size
        b = self.bundle
        b.train()
        images = batch.images.to(self.device)
        signal = torch.as_tensor(bits_to_signal(batch.bits), dtype=images.dtype, device=self.device)

        cover, stego, encoded = self.encode_images(images, batch.boxes, signal, patch)

        # (a) discriminator on detached stego patches
        for p in b.discriminator.parameters():
            p.requires_grad_(True)
        self.opt_d.zero_grad(set_to_none=True)
        loss_d = L.loss_discriminator(b.discriminator(cover), b.discriminator(stego.detach()))
        if not torch.isfinite(loss_d):
            raise NonFiniteLossError("discriminator", float(loss_d))
        loss_d.backward()
        self.opt_d.step()

        # (b) generator side through the three branches
        for p in b.discriminator.parameters():
            p.requires_grad_(False)
        branch_patches = {"arbitrary": [], "common": [], "malicious": []}
        omega = set()
        offset = 0
        for en, bxs in zip(encoded, batch.boxes):
            for branch in ("arbitrary", "common", "malicious"):
                out = sample_branch(en, bxs, rng, branch, cfg.compose_prob, coverage=cfg.swap_coverage)
                branch_patches[branch].append(crop_resample(out.image, bxs, patch).data)
                if branch == "malicious":
                    omega |= {offset + i for i in L.build_omega_fake(bxs, out.forged_boxes, w.tau)}
            offset += len(bxs)
        noised = {k: torch.cat(v) for k, v in branch_patches.items()}

        m_tr = b.tracer(noised["arbitrary"])
        m_lo_com = b.localizer(noised["common"])
        m_lo_mal = b.localizer(noised["malicious"])
        lo_mal, active = L.loss_localizer_malicious(m_lo_mal, omega, cfg.reduction)
        comps = {
            "adv": L.loss_adversarial(b.discriminator(cover), b.discriminator(stego)),
            "en": L.loss_en(stego, cover, cfg.reduction),
            "tr": L.loss_tracer(m_tr, signal, cfg.reduction),
            "lo_com": L.loss_localizer_common(m_lo_com, signal, cfg.reduction),
            "lo_mal": lo_mal,
        }
        for name, value in comps.items():
            if not torch.isfinite(value):
                raise NonFiniteLossError(name, float(value.detach()))
        total = L.loss_total(comps, w)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        for p in b.discriminator.parameters():
            p.requires_grad_(True)

        bits = batch.bits
        idx = sorted(omega)
        stats = StepStats(
            step=self.step,
            losses={k: float(v.detach()) for k, v in comps.items()},
            total=float(total.detach()),
            loss_d=float(loss_d.detach()),
            ber_tr=_ber(harden(m_tr), bits),
            ber_lo_com=_ber(harden(m_lo_com), bits),
            ber_lo_mal=_ber(harden(m_lo_mal)[idx], bits[idx]) if idx else float("nan"),
            omega_size=len(idx),
            mal_active=active,
        )
        self.step += 1
        return stats


def _ber(a, b) -> float:
    a = np.asarray(a)
    if a.size == 0:
        return float("nan")
    return float(np.mean(a != np.asarray(b)))


class ImageSet:
    """Dataset records with pixels materialized as one float tensor per image."""

    def __init__(self, records):
        self.records = list(records)
        self.images = [rec.tensor() for rec in self.records]
        self.boxes = [rec.boxes for rec in self.records]

    def __len__(self):
        return len(self.records)

    def batch(self, indices, bits) -> Batch:
        images = torch.stack([self.images[i] for i in indices])
        return Batch(images, [self.boxes[i] for i in indices], bits)


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return max(1, math.ceil(n_images / batch_size))


def total_steps(config: TrainConfig, n_images: int) -> int:
    steps = config.epochs * steps_per_epoch(n_images, config.batch_size)
    if config.max_steps is not None:
        steps = min(steps, config.max_steps)
    return steps


def batch_for_step(data: ImageSet, config: TrainConfig, step: int, rng: np.random.Generator) -> Batch:
    per_epoch = steps_per_epoch(len(data), config.batch_size)
    epoch, pos = divmod(step, per_epoch)
    order = np.random.default_rng([config.seed, epoch, 7]).permutation(len(data))
    idx = order[pos * config.batch_size:(pos + 1) * config.batch_size].tolist()
    n_faces = sum(len(data.boxes[i]) for i in idx)
    bits = assign_messages(None, n_faces, rng, length=config.model.message_length).bits
    return data.batch(idx, bits)


def step_rng(config: TrainConfig, step: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, step])


def probe_psnr(trainer: Trainer, data: ImageSet, config: TrainConfig) -> float:
    """Mean per-image PSNR of encoded vs cover on the first ``probe_size`` images."""
    n = min(config.probe_size, len(data))
    if n == 0:
        return float("nan")
    rng = np.random.default_rng([config.seed, 99991])
    idx = list(range(n))
    n_faces = sum(len(data.boxes[i]) for i in idx)
    batch = data.batch(idx, assign_messages(None, n_faces, rng, length=config.model.message_length).bits)
    signal = torch.as_tensor(bits_to_signal(batch.bits), dtype=batch.images.dtype)
    trainer.bundle.eval()
    with torch.no_grad():
        _, _, encoded = trainer.encode_images(batch.images, batch.boxes, signal, config.model.patch_size)
    return float(np.mean([psnr(en, img) for en, img in zip(encoded, batch.images)]))


def train(dataset, config: TrainConfig, out_dir=None, resume: bool = True, callback=None):
    """Run the full optimization.

    ``dataset`` is a list of :class:`AnnotatedImage`. With ``out_dir`` the run
    writes ``checkpoint.pt`` every ``checkpoint_every`` steps plus ``log.csv``,
    and resumes from an existing checkpoint when ``resume`` is set.
    Returns ``(bundle, log_rows)``.
    """
    data = ImageSet(dataset)
    if len(data) == 0:
        raise ValidationError("training dataset is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt = out_dir / "checkpoint.pt" if out_dir else None
    log_path = out_dir / "log.csv" if out_dir else None
    rows = []
    if ckpt is not None and resume and ckpt.exists():
        trainer = Trainer.restore(ckpt, config)
        if log_path.exists():
            with open(log_path) as fh:
                rows = [
                    {k: float(v) if k != "step" else int(v) for k, v in r.items()}
                    for r in csv.DictReader(fh)
                    if int(r["step"]) < trainer.step
                ]
        log.info("resumed from %s at step %d", ckpt, trainer.step)
    else:
        trainer = Trainer(config)
    n_steps = total_steps(config, len(data))

    def flush():
        if log_path is None:
            return
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            writer.writerows(rows)

    while trainer.step < n_steps:
        step = trainer.step
        rng = step_rng(config, step)
        batch = batch_for_step(data, config, step, rng)
        stats = trainer.train_step(batch, rng)
        last = trainer.step == n_steps
        if step % config.log_every == 0 or last:
            row = stats.row(probe_psnr(trainer, data, config))
            rows.append(row)
            log.info("step %d total %.5f en %.2e tr %.4f psnr %.2f ber_tr %.3f ber_lo %.3f/%.3f",
                     step, stats.total, stats.losses["en"], stats.losses["tr"], row["psnr_probe"],
                     stats.ber_tr, stats.ber_lo_com, stats.ber_lo_mal)
            if callback is not None:
                callback(row)
        if ckpt is not None and (trainer.step % config.checkpoint_every == 0 or last):
            trainer.save(ckpt)
            flush()
    flush()
    trainer.bundle.eval()
    return trainer.bundle, rows


def build_dataset(config: TrainConfig, count: int | None = None, seed: int | None = None, split="train"):
    d = config.data
    rng = np.random.default_rng(d.seed if seed is None else seed)
    return generate_synthetic_dataset(
        d.count if count is None else count, d.canvas, d.faces_per_image, rng,
        size_mean=d.size_mean, size_spread=d.size_spread, split=split,
    )

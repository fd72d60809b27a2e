"""Steganography kernel, the twin message decoders and the patch discriminator."""
from __future__ import annotations

import copy
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .geometry import PatchBatch

SIGNAL_AMPLITUDE = 0.1
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    patch_size: tuple = (64, 64)
    message_length: int = 15
    base_channels: int = 16
    depth: int = 3
    disc_channels: int = 16
    epsilon: float = 0.05  # bound on |S - C| per pixel

    def __post_init__(self):
        self.patch_size = tuple(int(s) for s in self.patch_size)
        if self.message_length < 1:
            raise ValidationError("message_length must be >= 1")
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")
        for s in self.patch_size:
            if s % max(2 ** self.depth, 4):
                raise ValidationError(f"patch size {self.patch_size} must be divisible by max(2**depth, 4)")
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")


@dataclass
class MessageMatrix:
    """Per-face payload bits, their +-0.1 signal and the identity each row belongs to."""

    bits: np.ndarray
    identities: list = field(default_factory=list)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 2:
            raise ValidationError(f"bits must be N x L, got shape {self.bits.shape}")
        if self.bits.size and self.bits.max() > 1:
            raise ValidationError("bits must be 0/1")
        if not self.identities:
            self.identities = [None] * self.bits.shape[0]
        if len(self.identities) != self.bits.shape[0]:
            raise ValidationError("one identity per message row is required")

    @classmethod
    def empty(cls, length: int) -> "MessageMatrix":
        return cls(np.zeros((0, length), dtype=np.uint8))

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    @property
    def length(self) -> int:
        return self.bits.shape[1]

    @property
    def signal(self) -> np.ndarray:
        return bits_to_signal(self.bits)

    def signal_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.as_tensor(self.signal, dtype=dtype, device=device)


def bits_to_signal(bits) -> np.ndarray:
    bits = np.asarray(bits)
    return np.where(bits == 1, SIGNAL_AMPLITUDE, -SIGNAL_AMPLITUDE)


def harden(estimate) -> np.ndarray:
    """Bit decision at the midpoint 0 of the +-0.1 alphabet; ties go to 1."""
    if isinstance(estimate, torch.Tensor):
        estimate = estimate.detach().cpu().numpy()
    return (np.asarray(estimate) >= 0).astype(np.uint8)


def conv_block(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
    )


def init_weights(module: nn.Module) -> None:
    """He init matched to the LeakyReLU slope; the default init shrinks
    activations layer by layer and starves the message channel of gradient."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=0.2, nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)


class UNet(nn.Module):
    """Plain U-Net trunk; returns ``base`` feature maps at input resolution.

    No batch statistics are used anywhere, so every patch is processed
    independently of the others in the batch.
    """

    def __init__(self, in_ch, base=16, depth=3):
        super().__init__()
        chans = [base * 2 ** i for i in range(depth + 1)]
        self.inc = conv_block(in_ch, chans[0])
        self.downs = nn.ModuleList(conv_block(chans[i], chans[i + 1]) for i in range(depth))
        self.ups = nn.ModuleList(conv_block(chans[i + 1] + chans[i], chans[i]) for i in reversed(range(depth)))
        init_weights(self)

    def forward(self, x, bottleneck=None):
        skips = []
        x = self.inc(x)
        for down in self.downs:
            skips.append(x)
            x = down(F.avg_pool2d(x, 2))
        if bottleneck is not None:
            x = x + bottleneck
        for up in self.ups:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = up(torch.cat([x, skip], dim=1))
        return x


class StegoEncoder(nn.Module):
    """Cover patch + message -> stego patch with a tanh-bounded residual.

    The message enters twice: broadcast as extra input planes, and through a
    linear projection added to the U-Net bottleneck. The second path gives
    each bit its own spatial layout, which the decoders pick up far sooner
    than anything that has to emerge from constant planes.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.message_length = cfg.message_length
        self.epsilon = cfg.epsilon
        self.trunk = UNet(3 + cfg.message_length, cfg.base_channels, cfg.depth)
        h, w = cfg.patch_size
        self.bottleneck_shape = (cfg.base_channels * 2 ** cfg.depth, h >> cfg.depth, w >> cfg.depth)
        self.message_proj = nn.Linear(cfg.message_length, int(np.prod(self.bottleneck_shape)))
        init_weights(self.message_proj)
        self.residual_head = nn.Conv2d(cfg.base_channels, 3, 1)
        nn.init.zeros_(self.residual_head.weight)
        nn.init.zeros_(self.residual_head.bias)

    def residual(self, cover, signal):
        n, _, h, w = cover.shape
        # unit-scale inputs: centred pixels and the message as +-1
        unit = signal / SIGNAL_AMPLITUDE
        planes = unit.view(n, self.message_length, 1, 1).expand(n, self.message_length, h, w)
        bottleneck = self.message_proj(unit).view(n, *self.bottleneck_shape)
        feats = self.trunk(torch.cat([2 * cover - 1, planes], dim=1), bottleneck)
        return self.epsilon * torch.tanh(self.residual_head(feats))

    def forward(self, cover, signal):
        return (cover + self.residual(cover, signal)).clamp(0.0, 1.0)


class MessageDecoder(nn.Module):
    """U-Net trunk, average pool onto a coarse grid, linear head to ``L`` raw estimates.

    The grid keeps coarse position. A fully global pool is translation
    invariant, so the sign of a bit could only be carried relative to the
    cover content, and that does not train at small budgets.
    """

    GRID_STRIDE = 4

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.trunk = UNet(3, cfg.base_channels, cfg.depth)
        h, w = cfg.patch_size
        cells = (h // self.GRID_STRIDE) * (w // self.GRID_STRIDE)
        self.head = nn.Linear(cfg.base_channels * cells, cfg.message_length)

    def forward(self, patches):
        feats = self.trunk(2 * patches - 1)
        return self.head(F.avg_pool2d(feats, self.GRID_STRIDE).flatten(1))


class PatchDiscriminator(nn.Module):
    """One realness score per patch; strided convs then global pooling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.disc_channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.head = nn.Linear(4 * c, 1)

    def forward(self, patches):
        return self.head(self.features(patches).mean(dim=(2, 3))).squeeze(1)


class ModelBundle(nn.Module):
    """The four trainable networks plus the architecture they were built from."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.config = cfg or ModelConfig()
        self.encoder = StegoEncoder(self.config)
        self.tracer = MessageDecoder(self.config)
        self.localizer = MessageDecoder(self.config)
        self.discriminator = PatchDiscriminator(self.config)

    def generator_parameters(self):
        return [*self.encoder.parameters(), *self.tracer.parameters(), *self.localizer.parameters()]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _check_patches(patches: PatchBatch, cfg_patch=None):
    if patches.data.dim() != 4 or patches.data.shape[1] != 3:
        raise ValidationError(f"expected N x 3 x h x w patches, got {tuple(patches.data.shape)}")
    if cfg_patch is not None and tuple(patches.patch_size) != tuple(cfg_patch):
        raise ValidationError(f"patches are {patches.patch_size}, networks expect {tuple(cfg_patch)}")


def encode_patches(cover: PatchBatch, messages: MessageMatrix, encoder: StegoEncoder) -> PatchBatch:
    _check_patches(cover)
    if len(cover) != messages.n:
        raise ValidationError(f"{len(cover)} cover patches but {messages.n} messages")
    if messages.n and messages.length != encoder.message_length:
        raise ValidationError(f"messages have L={messages.length}, encoder expects {encoder.message_length}")
    if len(cover) == 0:
        return PatchBatch(cover.data.clone(), [], cover.patch_size)
    signal = messages.signal_tensor(cover.data.dtype, cover.data.device)
    return PatchBatch(encoder(cover.data, signal), list(cover.source_boxes), cover.patch_size)


def decode_patches(patches: PatchBatch, decoder: MessageDecoder) -> torch.Tensor:
    _check_patches(patches)
    if len(patches) == 0:
        return patches.data.new_zeros((0, decoder.head.out_features))
    return decoder(patches.data)


def discriminate(patches: PatchBatch, discriminator: PatchDiscriminator) -> torch.Tensor:
    _check_patches(patches)
    if len(patches) == 0:
        return patches.data.new_zeros((0,))
    return discriminator(patches.data)


def save_checkpoint(path, bundle: ModelBundle, extra: dict | None = None) -> None:
    """Write all four parameter sets plus the architecture config to one archive."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(bundle.config),
        "encoder": bundle.encoder.state_dict(),
        "tracer": bundle.tracer.state_dict(),
        "localizer": bundle.localizer.state_dict(),
        "discriminator": bundle.discriminator.state_dict(),
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, map_location="cpu"):
    """Returns ``(bundle, payload)``; ``payload`` holds any extra training state."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except (pickle.UnpicklingError, EOFError, RuntimeError) as exc:
        raise ValidationError(f"not a readable checkpoint: {path} ({exc})") from exc
    version = payload.get("version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version!r}")
    bundle = ModelBundle(ModelConfig(**payload["model_config"]))
    for name in ("encoder", "tracer", "localizer", "discriminator"):
        getattr(bundle, name).load_state_dict(payload[name])
    return bundle, payload


def clone_bundle(bundle: ModelBundle) -> ModelBundle:
    return copy.deepcopy(bundle)

"""Training objectives: embedding fidelity, relativistic LSGAN pair, decoding
terms, the selective forged-face term and their weighted total.

Squared norms default to element means so magnitudes do not depend on the
number of faces or the payload length; ``reduction="sum"`` gives raw sums.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError
from .geometry import PatchBatch, iou

COMPONENTS = ("adv", "en", "tr", "lo_com", "lo_mal")


@dataclass
class LossWeights:
    adv: float = 1e-3
    en: float = 1.0
    tr: float = 10.0
    lo_com: float = 10.0
    lo_mal: float = 10.0
    tau: float = 0.5

    def __post_init__(self):
        for name in COMPONENTS:
            if getattr(self, name) < 0:
                raise ValidationError(f"loss weight {name} must be >= 0")
        if not (0.0 < self.tau <= 1.0):
            raise ValidationError(f"tau must lie in (0, 1], got {self.tau}")

    def as_tuple(self):
        return tuple(getattr(self, name) for name in COMPONENTS)


def _data(x):
    return x.data if isinstance(x, PatchBatch) else x


def _squared(diff: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return (diff ** 2).mean()
    if reduction == "sum":
        return (diff ** 2).sum()
    raise ValidationError(f"unknown reduction {reduction!r}")


def _aligned(a, b, what):
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_en(stego, cover, reduction: str = "mean") -> torch.Tensor:
    s, c = _data(stego), _data(cover)
    _aligned(s, c, "loss_en")
    return _squared(s - c, reduction)


def _scores(real, fake):
    real = torch.as_tensor(real)
    fake = torch.as_tensor(fake)
    if real.numel() == 0 or fake.numel() == 0:
        raise ValidationError("relativistic losses need at least one real and one fake score")
    return real.reshape(-1), fake.reshape(-1)


def loss_discriminator(scores_real, scores_fake) -> torch.Tensor:
    """Relativistic average LSGAN objective for the discriminator."""
    real, fake = _scores(scores_real, scores_fake)
    return ((real - fake.mean() + 1) ** 2).mean() + ((fake - real.mean() - 1) ** 2).mean()


def loss_adversarial(scores_real, scores_fake) -> torch.Tensor:
    """Same relativistic form with the margins swapped, for the encoder."""
    real, fake = _scores(scores_real, scores_fake)
    return ((real - fake.mean() - 1) ** 2).mean() + ((fake - real.mean() + 1) ** 2).mean()


def loss_tracer(m_tr, m_en, reduction: str = "mean") -> torch.Tensor:
    _aligned(m_tr, m_en, "loss_tracer")
    return _squared(m_tr - m_en, reduction)


def loss_localizer_common(m_lo, m_en, reduction: str = "mean") -> torch.Tensor:
    _aligned(m_lo, m_en, "loss_localizer_common")
    return _squared(m_lo - m_en, reduction)


def build_omega_fake(face_boxes, forged_boxes, tau: float) -> set:
    """Indices of faces overlapping some forged box with IoU strictly above ``tau``."""
    if not (0.0 < tau <= 1.0):
        raise ValidationError(f"tau must lie in (0, 1], got {tau}")
    forged = [np.asarray(f, dtype=np.float64) for f in forged_boxes]
    omega = set()
    for i, box in enumerate(face_boxes):
        p = box.p if hasattr(box, "p") else np.asarray(box, dtype=np.float64)
        if any(iou(p, f) > tau for f in forged):
            omega.add(i)
    return omega


def loss_localizer_malicious(m_lo_mal: torch.Tensor, omega_fake, reduction: str = "mean"):
    """Pull decoded rows of forged faces toward the zero vector.

    Returns ``(value, active)``. ``reduction="mean"`` averages the per-row mean
    square over the forged set; ``"sum"`` averages per-row squared norms.
    Rows outside the set are never read, so they get exactly zero gradient.
    """
    idx = sorted(int(i) for i in omega_fake)
    n = m_lo_mal.shape[0]
    if any(i < 0 or i >= n for i in idx):
        raise ValidationError(f"omega_fake indices {idx} out of range for {n} rows")
    if not idx:
        return m_lo_mal.new_zeros(()), False
    rows = m_lo_mal[torch.as_tensor(idx, dtype=torch.long, device=m_lo_mal.device)]
    if reduction == "mean":
        per_row = (rows ** 2).mean(dim=1)
    elif reduction == "sum":
        per_row = (rows ** 2).sum(dim=1)
    else:
        raise ValidationError(f"unknown reduction {reduction!r}")
    return per_row.mean(), True


def loss_total(components: dict, weights: LossWeights) -> torch.Tensor:
    missing = [c for c in COMPONENTS if c not in components]
    if missing:
        raise ValidationError(f"missing loss components: {missing}")
    total = 0.0
    for name in COMPONENTS:
        total = total + getattr(weights, name) * components[name]
    return total

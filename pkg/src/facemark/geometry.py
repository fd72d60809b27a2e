"""Face boxes, IoU and the differentiable crop / paste pair.

Pixel ``j`` covers the half-open interval ``[j, j + 1)`` with its center at
``j + 0.5``. Box coordinates are continuous and never rounded here; rounding
only happens when a mask is rasterized (see :func:`rasterize_boxes`).

Both resampling directions are separable linear maps, so a crop is
``Ry @ I @ Rx^T`` and a paste is ``Py @ R @ Px^T``. That keeps them exact on
grid-aligned boxes and trivially differentiable with respect to pixel values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ValidationError

DEFAULT_PATCH = (64, 64)


def _as_box(box) -> np.ndarray:
    arr = np.asarray(box, dtype=np.float64).reshape(-1)
    if arr.shape != (4,):
        raise ValidationError(f"box must have 4 coordinates, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"box has non-finite coordinates: {arr.tolist()}")
    if not (arr[0] < arr[2] and arr[1] < arr[3]):
        raise ValidationError(f"degenerate box (min >= max): {arr.tolist()}")
    return arr


def to_absolute(box_norm, image_w: int, image_h: int) -> np.ndarray:
    """Scale a normalized ``[x_min, y_min, x_max, y_max]`` box to pixels."""
    v = _as_box(box_norm)
    if v.min() < 0.0 or v.max() > 1.0:
        raise ValidationError(f"normalized box outside [0, 1]: {v.tolist()}")
    if image_w <= 0 or image_h <= 0:
        raise ValidationError(f"image dims must be positive, got {image_w}x{image_h}")
    return v * np.array([image_w, image_h, image_w, image_h], dtype=np.float64)


def to_normalized(box_abs, image_w: int, image_h: int) -> np.ndarray:
    p = _as_box(box_abs)
    if image_w <= 0 or image_h <= 0:
        raise ValidationError(f"image dims must be positive, got {image_w}x{image_h}")
    v = p / np.array([image_w, image_h, image_w, image_h], dtype=np.float64)
    if v.min() < 0.0 or v.max() > 1.0:
        raise ValidationError(f"absolute box outside the {image_w}x{image_h} image: {p.tolist()}")
    return v


@dataclass(frozen=True)
class FaceBox:
    """One face region, stored in normalized form together with the image size."""

    v: tuple
    image_w: int
    image_h: int

    def __post_init__(self):
        # to_absolute validates ordering, range and image dims
        to_absolute(self.v, self.image_w, self.image_h)
        object.__setattr__(self, "v", tuple(float(c) for c in self.v))

    @classmethod
    def from_absolute(cls, p, image_w: int, image_h: int) -> "FaceBox":
        return cls(tuple(to_normalized(p, image_w, image_h)), image_w, image_h)

    @property
    def p(self) -> np.ndarray:
        return to_absolute(self.v, self.image_w, self.image_h)

    @property
    def width(self) -> float:
        p = self.p
        return float(p[2] - p[0])

    @property
    def height(self) -> float:
        p = self.p
        return float(p[3] - p[1])


def iou(box_a, box_b) -> float:
    a = _as_box(box_a)
    b = _as_box(box_b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return float(inter / (area_a + area_b - inter))


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU, shape ``(len(boxes_a), len(boxes_b))``."""
    out = np.zeros((len(boxes_a), len(boxes_b)), dtype=np.float64)
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou(a, b)
    return out


def rasterize_boxes(boxes, image_w: int, image_h: int) -> np.ndarray:
    """Binary ``H x W`` mask covering every box, rounded outward (floor min, ceil max)."""
    mask = np.zeros((image_h, image_w), dtype=np.uint8)
    for box in boxes:
        b = _as_box(box)
        x0 = max(0, math.floor(b[0]))
        y0 = max(0, math.floor(b[1]))
        x1 = min(image_w, math.ceil(b[2]))
        y1 = min(image_h, math.ceil(b[3]))
        mask[y0:y1, x0:x1] = 1
    return mask


@dataclass
class PatchBatch:
    """``N x 3 x h x w`` face patches plus the boxes they were sampled from."""

    data: torch.Tensor
    source_boxes: list = field(default_factory=list)
    patch_size: tuple = DEFAULT_PATCH

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValidationError(f"patch data must be N x C x h x w, got {tuple(self.data.shape)}")
        if self.data.shape[0] != len(self.source_boxes):
            raise ValidationError(
                f"{self.data.shape[0]} patches but {len(self.source_boxes)} source boxes"
            )
        if tuple(self.data.shape[-2:]) != tuple(self.patch_size):
            raise ValidationError(
                f"patch data is {tuple(self.data.shape[-2:])}, expected {tuple(self.patch_size)}"
            )

    def __len__(self):
        return self.data.shape[0]


def _check_inside(box: FaceBox, image_w: int, image_h: int) -> None:
    if box.image_w != image_w or box.image_h != image_h:
        raise ValidationError(
            f"box refers to a {box.image_w}x{box.image_h} image, got {image_w}x{image_h}"
        )


def sample_matrix(lo: float, hi: float, n_out: int, n_in: int, dtype=torch.float32, device=None):
    """Bilinear weights taking ``n_in`` source pixels to ``n_out`` samples over ``[lo, hi)``.

    Sample ``u`` sits at continuous coordinate ``lo + (u + 0.5) * (hi - lo) / n_out``;
    source indices are clamped at the image border (edge replication).
    """
    u = np.arange(n_out, dtype=np.float64)
    s = lo + (u + 0.5) * (hi - lo) / n_out - 0.5
    s = np.clip(s, 0.0, n_in - 1)
    i0 = np.floor(s).astype(np.int64)
    frac = s - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return torch.as_tensor(m, dtype=dtype, device=device)


def paste_matrix(lo: float, hi: float, n_patch: int, n_img: int, dtype=torch.float32, device=None):
    """Inverse map: weights taking a ``n_patch`` patch back onto ``n_img`` image pixels.

    Only pixels whose center falls in ``[lo, hi)`` receive a value; each one
    bilinearly reads the patch at its own position, clamped to the patch edge.
    """
    j = np.arange(n_img, dtype=np.float64)
    c = j + 0.5
    inside = (c >= lo) & (c < hi)
    u = (c - lo) * n_patch / (hi - lo) - 0.5
    u = np.clip(u, 0.0, n_patch - 1)
    u0 = np.floor(u).astype(np.int64)
    frac = u - u0
    u1 = np.minimum(u0 + 1, n_patch - 1)
    m = np.zeros((n_img, n_patch), dtype=np.float64)
    rows = np.nonzero(inside)[0]
    np.add.at(m, (rows, u0[rows]), 1.0 - frac[rows])
    np.add.at(m, (rows, u1[rows]), frac[rows])
    return torch.as_tensor(m, dtype=dtype, device=device)


def crop_matrices(boxes: Sequence[FaceBox], image_h: int, image_w: int, patch_size, dtype, device):
    h, w = patch_size
    ry = [sample_matrix(b.p[1], b.p[3], h, image_h, dtype, device) for b in boxes]
    rx = [sample_matrix(b.p[0], b.p[2], w, image_w, dtype, device) for b in boxes]
    return torch.stack(ry), torch.stack(rx)


def crop_resample(image: torch.Tensor, boxes: Sequence[FaceBox], patch_size=DEFAULT_PATCH) -> PatchBatch:
    """Sample every face box of a ``3 x H x W`` image into a fixed-size patch."""
    if image.dim() != 3:
        raise ValidationError(f"image must be C x H x W, got {tuple(image.shape)}")
    h, w = (int(patch_size[0]), int(patch_size[1]))
    if h <= 0 or w <= 0:
        raise ValidationError(f"patch size must be positive, got {patch_size}")
    _, H, W = image.shape
    boxes = list(boxes)
    if not boxes:
        empty = image.new_zeros((0, image.shape[0], h, w))
        return PatchBatch(empty, [], (h, w))
    for b in boxes:
        _check_inside(b, W, H)
    ry, rx = crop_matrices(boxes, H, W, (h, w), image.dtype, image.device)
    data = torch.einsum("nyH,cHW,nxW->ncyx", ry, image, rx)
    return PatchBatch(data.clamp(0.0, 1.0), boxes, (h, w))


def residual_image(residual: torch.Tensor, boxes: Sequence[FaceBox], image_h: int, image_w: int) -> torch.Tensor:
    """Sum of every patch residual mapped back to its box, shape ``C x H x W``."""
    n, c, h, w = residual.shape
    if n == 0:
        return residual.new_zeros((c, image_h, image_w))
    py = torch.stack([paste_matrix(b.p[1], b.p[3], h, image_h, residual.dtype, residual.device) for b in boxes])
    px = torch.stack([paste_matrix(b.p[0], b.p[2], w, image_w, residual.dtype, residual.device) for b in boxes])
    return torch.einsum("nHy,ncyx,nWx->cHW", py, residual, px)


def paste_residual(image: torch.Tensor, stego: PatchBatch, cover: PatchBatch) -> torch.Tensor:
    """``clamp(I + sum_i H^-1(S_i - C_i, p_i), 0, 1)``; untouched pixels stay bit-identical."""
    if stego.data.shape != cover.data.shape:
        raise ValidationError(
            f"stego {tuple(stego.data.shape)} and cover {tuple(cover.data.shape)} batches differ"
        )
    if list(stego.source_boxes) != list(cover.source_boxes):
        raise ValidationError("stego and cover batches refer to different boxes")
    if image.dim() != 3 or (len(stego) > 0 and image.shape[0] != stego.data.shape[1]):
        raise ValidationError(f"image shape {tuple(image.shape)} does not match the patches")
    _, H, W = image.shape
    for b in cover.source_boxes:
        _check_inside(b, W, H)
    return paste_unclamped(image, stego.data - cover.data, cover.source_boxes).clamp(0.0, 1.0)


def paste_unclamped(image: torch.Tensor, residual: torch.Tensor, boxes: Sequence[FaceBox]) -> torch.Tensor:
    if residual.shape[0] == 0:
        return image.clone()
    return image + residual_image(residual, boxes, image.shape[1], image.shape[2])

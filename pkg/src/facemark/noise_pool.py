"""Benign and malicious distortions applied to encoded images.

Every distortion maps a ``3 x H x W`` tensor in [0, 1] to another one and keeps
gradients flowing back to the input. JPEG is non-differentiable, so its
backward pass is the identity (straight-through). The malicious branch is a
face-replacement surrogate: donor content is blended into an elliptical face
region inside a sub-box of each chosen face, and that sub-box becomes the
ground-truth forged box.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ValidationError
from .geometry import FaceBox, rasterize_boxes

COMMON_KINDS = ("jpeg", "gaussian_blur", "saturation", "hue", "gaussian_noise")
KINDS = ("identity",) + COMMON_KINDS + ("malicious_swap",)
BRANCHES = ("arbitrary", "common", "malicious")

JPEG_QUALITY = (50, 95)
BLUR_KERNELS = (3, 5)
BLUR_SIGMA = (0.5, 1.5)
COLOR_FACTOR = (0.2, 0.3)
NOISE_SIGMA = (0.005, 0.05)


@dataclass
class DistortionOutcome:
    image: torch.Tensor
    kind: str
    params: dict = field(default_factory=dict)
    forged_boxes: list = field(default_factory=list)
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown distortion kind {self.kind!r}")
        if self.mask is None:
            self.mask = rasterize_boxes(self.forged_boxes, self.image.shape[-1], self.image.shape[-2])

    def to_record(self) -> str:
        """One audit line: ``kind<TAB>params-json<TAB>forged-boxes-json``."""
        boxes = [[float(c) for c in b] for b in self.forged_boxes]
        return "\t".join([self.kind, json.dumps(self.params, sort_keys=True), json.dumps(boxes)])


def parse_record(line: str) -> tuple:
    kind, params, boxes = line.rstrip("\n").split("\t")
    if kind not in KINDS:
        raise ValidationError(f"unknown distortion kind {kind!r}")
    return kind, json.loads(params), json.loads(boxes)


# -- common distortions ---------------------------------------------------------

def _check_range(name, value, lo, hi):
    if not (lo <= value <= hi):
        raise ValidationError(f"{name}={value} outside [{lo}, {hi}]")


def validate_params(kind: str, params: dict) -> None:
    if kind == "identity":
        return
    try:
        if kind == "jpeg":
            q = params["quality"]
            if int(q) != q:
                raise ValidationError(f"JPEG quality must be an integer, got {q}")
            _check_range("quality", q, *JPEG_QUALITY)
        elif kind == "gaussian_blur":
            if params["kernel"] not in BLUR_KERNELS:
                raise ValidationError(f"blur kernel must be one of {BLUR_KERNELS}, got {params['kernel']}")
            _check_range("sigma", params["sigma"], *BLUR_SIGMA)
        elif kind in ("saturation", "hue"):
            _check_range("f", params["f"], *COLOR_FACTOR)
            if params.get("sign", 1) not in (1, -1):
                raise ValidationError("sign must be +1 or -1")
        elif kind == "gaussian_noise":
            _check_range("sigma", params["sigma"], *NOISE_SIGMA)
            if "seed" not in params:
                raise ValidationError("gaussian_noise needs a 'seed' parameter")
        else:
            raise ValidationError(f"{kind!r} is not a common distortion")
    except KeyError as exc:
        raise ValidationError(f"missing parameter {exc} for {kind}") from exc


def _straight_through(x, y):
    return x + (y - x).detach()


def jpeg(image: torch.Tensor, quality: int) -> torch.Tensor:
    arr = image.detach().clamp(0, 1).mul(255).round().to(torch.uint8).permute(1, 2, 0).cpu().numpy()
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        out = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    out = torch.as_tensor(out, dtype=image.dtype, device=image.device).permute(2, 0, 1)
    return _straight_through(image, out)


def gaussian_kernel1d(kernel: int, sigma: float, dtype=torch.float32):
    x = torch.arange(kernel, dtype=torch.float64) - (kernel - 1) / 2
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def gaussian_blur(image: torch.Tensor, kernel: int, sigma: float) -> torch.Tensor:
    c = image.shape[0]
    k = gaussian_kernel1d(kernel, sigma, image.dtype).to(image.device)
    pad = kernel // 2
    x = F.pad(image[None], (pad, pad, pad, pad), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, kernel), groups=c)
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, kernel, 1), groups=c)
    return x[0]


# full-range BT.601 luma/chroma
_RGB2YCC = torch.tensor([[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]], dtype=torch.float64)
_YCC2RGB = torch.linalg.inv(_RGB2YCC)


def _chroma_transform(image, matrix2x2):
    fwd = _RGB2YCC.to(image.dtype).to(image.device)
    inv = _YCC2RGB.to(image.dtype).to(image.device)
    ycc = torch.einsum("ij,jhw->ihw", fwd, image)
    chroma = torch.einsum("ij,jhw->ihw", matrix2x2.to(image.dtype).to(image.device), ycc[1:])
    out = torch.einsum("ij,jhw->ihw", inv, torch.cat([ycc[:1], chroma]))
    return out.clamp(0.0, 1.0)


def saturation(image, f: float, sign: int = 1):
    """Scale chroma by ``1 + sign * f``; luma untouched."""
    s = 1.0 + sign * f
    return _chroma_transform(image, torch.tensor([[s, 0.0], [0.0, s]], dtype=torch.float64))


def hue(image, f: float, sign: int = 1):
    """Rotate the chroma plane by ``sign * f`` of a full turn."""
    a = 2 * math.pi * f * sign
    rot = torch.tensor([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]], dtype=torch.float64)
    return _chroma_transform(image, rot)


def gaussian_noise(image, sigma: float, seed: int):
    gen = np.random.default_rng(seed)
    noise = torch.as_tensor(gen.standard_normal(image.shape), dtype=image.dtype, device=image.device)
    return (image + sigma * noise).clamp(0.0, 1.0)


def apply_common(image: torch.Tensor, kind: str, params: dict | None = None) -> DistortionOutcome:
    params = dict(params or {})
    validate_params(kind, params)
    if kind == "identity":
        out = image
    elif kind == "jpeg":
        out = jpeg(image, params["quality"])
    elif kind == "gaussian_blur":
        out = gaussian_blur(image, params["kernel"], params["sigma"])
    elif kind == "saturation":
        out = saturation(image, params["f"], params.get("sign", 1))
    elif kind == "hue":
        out = hue(image, params["f"], params.get("sign", 1))
    else:
        out = gaussian_noise(image, params["sigma"], params["seed"])
    return DistortionOutcome(out, kind, params, [])


# -- malicious surrogate ----------------------------------------------------------

FEATHER_PX = 2.0
COVERAGE = (0.8, 0.95)


def procedural_donor(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    from .data import render_face

    return render_face(rng, h, w)


def _forged_subbox(rng, box: FaceBox, coverage):
    """Integer-aligned sub-box covering ``coverage`` of each side of the face box."""
    x0, y0, x1, y1 = box.p
    lo_x, lo_y, hi_x, hi_y = math.ceil(x0), math.ceil(y0), math.floor(x1), math.floor(y1)
    fw = max(4, int(round(rng.uniform(*coverage) * (hi_x - lo_x))))
    fh = max(4, int(round(rng.uniform(*coverage) * (hi_y - lo_y))))
    fw, fh = min(fw, hi_x - lo_x), min(fh, hi_y - lo_y)
    fx = lo_x + int(rng.integers(0, hi_x - lo_x - fw + 1))
    fy = lo_y + int(rng.integers(0, hi_y - lo_y - fh + 1))
    return [float(fx), float(fy), float(fx + fw), float(fy + fh)]


def _ellipse_alpha(h: int, w: int, feather: float) -> np.ndarray:
    """Soft elliptical mask inscribed in an ``h x w`` box; zero on the box border."""
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5 - w / 2) / (w / 2)
    v = (yy + 0.5 - h / 2) / (h / 2)
    r = np.sqrt(u ** 2 + v ** 2)
    # distance inside the ellipse measured in pixels along the short half-axis
    depth = (1.0 - r) * min(h, w) / 2
    return np.clip(depth / feather, 0.0, 1.0)


def apply_malicious(image: torch.Tensor, face_boxes, donor_source=None, rng: np.random.Generator | None = None,
                    replace: str = "random", coverage=COVERAGE, feather: float = FEATHER_PX) -> DistortionOutcome:
    """Replace a random non-empty subset of faces with donor content.

    ``donor_source`` is ``None`` (procedural faces), a callable
    ``(rng, h, w) -> h x w x 3 array``, or a list of donor arrays/tensors used
    in turn. ``replace`` is ``"random"`` or ``"all"``.
    """
    face_boxes = list(face_boxes)
    if not face_boxes:
        raise ValidationError("malicious manipulation needs at least one face box")
    if replace not in ("random", "all"):
        raise ValidationError(f"replace must be 'random' or 'all', got {replace!r}")
    rng = rng if rng is not None else np.random.default_rng()
    n = len(face_boxes)
    if replace == "all":
        chosen = list(range(n))
    else:
        chosen = []
        while not chosen:
            chosen = [i for i in range(n) if rng.random() < 0.5]

    _, H, W = image.shape
    canvas = torch.zeros_like(image)
    alpha_full = torch.zeros((1, H, W), dtype=image.dtype, device=image.device)
    forged = []
    for k, i in enumerate(chosen):
        fb = _forged_subbox(rng, face_boxes[i], coverage)
        x0, y0, x1, y1 = (int(c) for c in fb)
        h, w = y1 - y0, x1 - x0
        if donor_source is None:
            donor = procedural_donor(rng, h, w)
        elif callable(donor_source):
            donor = donor_source(rng, h, w)
        else:
            donor = donor_source[k % len(donor_source)]
        donor = torch.as_tensor(donor, dtype=image.dtype, device=image.device)
        if donor.dim() == 3 and donor.shape[-1] == 3 and donor.shape[0] != 3:
            donor = donor.permute(2, 0, 1)
        if tuple(donor.shape[-2:]) != (h, w):
            donor = F.interpolate(donor[None], size=(h, w), mode="bilinear", align_corners=False)[0]
        canvas[:, y0:y1, x0:x1] = donor
        alpha_full[:, y0:y1, x0:x1] = torch.as_tensor(_ellipse_alpha(h, w, feather), dtype=image.dtype)
        forged.append(fb)
    # alpha is exactly 0 outside the forged boxes, so those pixels pass through unchanged
    out = image * (1 - alpha_full) + alpha_full * canvas
    params = {"replaced": chosen, "coverage": list(coverage), "feather": feather}
    return DistortionOutcome(out.clamp(0.0, 1.0), "malicious_swap", params, forged)


# -- branch sampler -----------------------------------------------------------

def sample_common_params(kind: str, rng: np.random.Generator) -> dict:
    if kind == "identity":
        return {}
    if kind == "jpeg":
        return {"quality": int(rng.integers(JPEG_QUALITY[0], JPEG_QUALITY[1] + 1))}
    if kind == "gaussian_blur":
        return {"kernel": int(rng.choice(BLUR_KERNELS)), "sigma": float(rng.uniform(*BLUR_SIGMA))}
    if kind in ("saturation", "hue"):
        return {"f": float(rng.uniform(*COLOR_FACTOR)), "sign": int(rng.choice([-1, 1]))}
    if kind == "gaussian_noise":
        return {"sigma": float(rng.uniform(*NOISE_SIGMA)), "seed": int(rng.integers(0, 2 ** 31))}
    raise ValidationError(f"{kind!r} is not a common distortion")


def sample_branch(image, face_boxes, rng: np.random.Generator, branch: str,
                  compose_prob: float = 0.5, donor_source=None, coverage=COVERAGE) -> DistortionOutcome:
    """Draw and apply one distortion from the named pool.

    arbitrary: uniform over identity, every common kind and the swap.
    common: uniform over identity and every common kind.
    malicious: the swap, preceded by one common kind with ``compose_prob``.
    Images without faces fall back to a benign draw in the swap cases.
    """
    if branch not in BRANCHES:
        raise ValidationError(f"unknown branch {branch!r}")
    face_boxes = list(face_boxes)
    benign = ("identity",) + COMMON_KINDS
    if branch == "arbitrary":
        kind = KINDS[int(rng.integers(len(KINDS)))]
    elif branch == "common":
        kind = benign[int(rng.integers(len(benign)))]
    else:
        kind = "malicious_swap"
    if kind == "malicious_swap" and not face_boxes:
        kind = benign[int(rng.integers(len(benign)))]
    if kind != "malicious_swap":
        return apply_common(image, kind, sample_common_params(kind, rng))

    pre = None
    if branch == "malicious" and rng.random() < compose_prob:
        pre_kind = COMMON_KINDS[int(rng.integers(len(COMMON_KINDS)))]
        pre_params = sample_common_params(pre_kind, rng)
        image = apply_common(image, pre_kind, pre_params).image
        pre = {"kind": pre_kind, "params": pre_params}
    out = apply_malicious(image, face_boxes, donor_source, rng, coverage=coverage)
    if pre is not None:
        out.params["pre"] = pre
    return out

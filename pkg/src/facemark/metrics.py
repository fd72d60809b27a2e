"""Image quality, bit error rates and the box-level localization protocol."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .geometry import iou

PSNR_CAP = 100.0
DEFAULT_THETA_BER = 0.10


def ber(bits_a, bits_b) -> float:
    a = np.asarray(bits_a, dtype=np.uint8).reshape(-1)
    b = np.asarray(bits_b, dtype=np.uint8).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"bit vectors differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        return 0.0
    return float(np.count_nonzero(a != b)) / a.size


def _np(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    """PSNR in dB on [0, 1] images; identical inputs return ``cap``."""
    a, b = _np(a), _np(b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-windowed SSIM over valid windows, averaged over windows and channels.

    Inputs are ``C x H x W`` (or ``H x W``) on the [0, 1] scale.
    """
    a = torch.as_tensor(_np(a))
    b = torch.as_tensor(_np(b))
    if a.dim() == 2:
        a, b = a[None], b[None]
    c = a.shape[0]
    if min(a.shape[-2:]) < window:
        window = min(a.shape[-2:]) | 1
        if window > min(a.shape[-2:]):
            window -= 2
    w = torch.as_tensor(_gaussian_window(window, sigma))[None, None].expand(c, 1, window, window)

    def filt(x):
        return F.conv2d(x[None], w, groups=c)[0]

    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def flag_forged(localizer_bits, reference_bits, theta_ber: float = DEFAULT_THETA_BER):
    """A face is flagged when its localizer payload disagrees with the reference by more than ``theta_ber``."""
    if not (0.0 < theta_ber < 1.0):
        raise ValueError(f"theta_ber must lie in (0, 1), got {theta_ber}")
    score = ber(localizer_bits, reference_bits)
    return score > theta_ber, score


def match_flags(flagged_boxes, gt_boxes, iou_match: float = 0.5):
    """Greedy one-to-one matching by descending IoU; returns (TP, FP, FN)."""
    pairs = []
    for i, fb in enumerate(flagged_boxes):
        for j, gb in enumerate(gt_boxes):
            v = iou(fb, gb)
            if v > iou_match:
                pairs.append((v, i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_f, used_g = set(), set()
    for _, i, j in pairs:
        if i in used_f or j in used_g:
            continue
        used_f.add(i)
        used_g.add(j)
    tp = len(used_f)
    return tp, len(flagged_boxes) - tp, len(gt_boxes) - tp


def f1_from_counts(tp: int, fp: int, fn: int):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall


def localization_f1(flagged_faces, gt_forged_boxes, iou_match: float = 0.5):
    """``flagged_faces`` holds ``(box, flag, score)`` per detected face."""
    boxes = [box for box, flag, _ in flagged_faces if flag]
    tp, fp, fn = match_flags(boxes, list(gt_forged_boxes), iou_match)
    return f1_from_counts(tp, fp, fn)


def localization_auc(scores_with_labels) -> float:
    """ROC area as the Mann-Whitney statistic; tied scores count one half.

    Returns NaN when either class is absent.
    """
    items = list(scores_with_labels)
    if not items:
        return float("nan")
    scores = np.asarray([s for s, _ in items], dtype=np.float64)
    labels = np.asarray([bool(l) for _, l in items])
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


@dataclass
class FaceResult:
    box: list
    traced_bits: list
    matched_identity: str | None = None
    tracer_ber: float | None = None
    localizer_ber: float | None = None
    score: float = 0.0
    forged_flag: bool = False
    is_forged: bool = False


@dataclass
class ForensicReport:
    image: str
    distortion: str
    psnr: float
    ssim: float
    faces: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    forged_boxes: list = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ForensicReport":
        obj = dict(obj)
        obj["faces"] = [FaceResult(**f) for f in obj.get("faces", [])]
        return cls(**obj)

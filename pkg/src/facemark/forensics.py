"""Inference-side pipeline: embed identities, trace them, flag swapped faces,
and run the distortion sweep that produces the per-image reports and the
aggregate table.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import IdentityRegistry, assign_messages, to_uint8, write_png
from .errors import ValidationError
from .geometry import crop_resample, iou, paste_unclamped
from .metrics import (
    DEFAULT_THETA_BER, FaceResult, ForensicReport, ber, f1_from_counts, flag_forged,
    localization_auc, match_flags, psnr, ssim,
)
from .models import MessageMatrix, ModelBundle, harden
from .noise_pool import COMMON_KINDS, apply_common, apply_malicious, sample_branch

IOU_MATCH = 0.5
SUMMARY_FIELDS = (
    "distortion", "images", "faces", "psnr", "ssim", "ber_tr", "ber_lo", "f1", "precision", "recall", "auc",
)

# name, kind, params
DEFAULT_SUITE = (
    ("identity", "identity", {}),
    ("jpeg_q50", "jpeg", {"quality": 50}),
    ("jpeg_q75", "jpeg", {"quality": 75}),
    ("blur_k3_s0.5", "gaussian_blur", {"kernel": 3, "sigma": 0.5}),
    ("blur_k3_s1", "gaussian_blur", {"kernel": 3, "sigma": 1.0}),
    ("blur_k5_s1.5", "gaussian_blur", {"kernel": 5, "sigma": 1.5}),
    ("saturation_f0.2", "saturation", {"f": 0.2}),
    ("saturation_f0.3", "saturation", {"f": 0.3}),
    ("hue_f0.2", "hue", {"f": 0.2}),
    ("noise_s0.02", "gaussian_noise", {"sigma": 0.02}),
    ("malicious_swap", "malicious_swap", {}),
)


@torch.no_grad()
def embed_image(bundle: ModelBundle, image: torch.Tensor, boxes, messages: MessageMatrix) -> torch.Tensor:
    """Encoded image on the 8-bit grid, as it would be stored in a PNG."""
    boxes = list(boxes)
    if len(boxes) != messages.n:
        raise ValidationError(f"{len(boxes)} faces but {messages.n} messages")
    if not boxes:
        return image.clone()
    patch = bundle.config.patch_size
    bundle.eval()
    cover = crop_resample(image, boxes, patch).data
    stego = bundle.encoder(cover, messages.signal_tensor(image.dtype, image.device))
    encoded = paste_unclamped(image, stego - cover, boxes).clamp(0.0, 1.0)
    return torch.round(encoded * 255) / 255


@torch.no_grad()
def decode_faces(decoder, image: torch.Tensor, boxes, patch_size) -> np.ndarray:
    """Raw ``N x L`` estimates for the faces at ``boxes``."""
    boxes = list(boxes)
    if not boxes:
        return np.zeros((0, decoder.head.out_features))
    decoder.eval()
    return decoder(crop_resample(image, boxes, patch_size).data).cpu().numpy()


def trace(bundle: ModelBundle, image, boxes, registry: IdentityRegistry | None = None):
    """Hardened tracer bits per face and the nearest registry identity (or None)."""
    bits = harden(decode_faces(bundle.tracer, image, boxes, bundle.config.patch_size))
    identities = [registry.match(b)[0] if registry is not None else None for b in bits]
    return bits, identities


def reference_bits(tracer_bits, identities, registry: IdentityRegistry | None):
    """Registry codeword of the traced identity; the tracer bits themselves when unknown."""
    out = np.array(tracer_bits, dtype=np.uint8, copy=True)
    for i, ident in enumerate(identities):
        if ident is not None and registry is not None:
            out[i] = registry.codeword(ident)
    return out


def localize(bundle: ModelBundle, image, boxes, registry=None, theta_ber: float = DEFAULT_THETA_BER,
             tracer_bits=None, identities=None):
    """Per-face ``(flag, score, localizer_bits)``; scores are BERs against the reference payload."""
    if tracer_bits is None:
        tracer_bits, identities = trace(bundle, image, boxes, registry)
    ref = reference_bits(tracer_bits, identities, registry)
    lo_bits = harden(decode_faces(bundle.localizer, image, boxes, bundle.config.patch_size))
    results = [flag_forged(lo_bits[i], ref[i], theta_ber) for i in range(len(lo_bits))]
    return [(flag, score, lo_bits[i]) for i, (flag, score) in enumerate(results)]


def analyze(bundle: ModelBundle, image, boxes, registry=None, theta_ber: float = DEFAULT_THETA_BER,
            cover=None, truth_bits=None, forged_boxes=(), name: str = "", distortion: str = "",
            params: dict | None = None) -> ForensicReport:
    """Trace and localize every face of one image and score the outcome.

    ``truth_bits`` (embedded payloads) enable the BER columns; ``forged_boxes``
    gives the ground truth used for the flag counts and AUC labels; ``cover``
    enables PSNR/SSIM against the original.
    """
    boxes = list(boxes)
    forged_boxes = [[float(c) for c in f] for f in forged_boxes]
    tr_bits, identities = trace(bundle, image, boxes, registry)
    flags = localize(bundle, image, boxes, registry, theta_ber, tr_bits, identities)
    faces = []
    for i, box in enumerate(boxes):
        flag, score, lo_bits = flags[i]
        faces.append(FaceResult(
            box=[float(c) for c in box.p],
            traced_bits=[int(b) for b in tr_bits[i]],
            matched_identity=identities[i],
            tracer_ber=ber(tr_bits[i], truth_bits[i]) if truth_bits is not None else None,
            localizer_ber=ber(lo_bits, truth_bits[i]) if truth_bits is not None else score,
            score=score,
            forged_flag=bool(flag),
            is_forged=any(iou(box.p, f) > IOU_MATCH for f in forged_boxes),
        ))
    tp, fp, fn = match_flags([f.box for f in faces if f.forged_flag], forged_boxes, IOU_MATCH)
    quality = (psnr(image, cover), ssim(image, cover)) if cover is not None else (float("nan"), float("nan"))
    return ForensicReport(
        image=str(name), distortion=distortion, psnr=quality[0], ssim=quality[1], faces=faces,
        params=dict(params or {}), forged_boxes=forged_boxes, tp=tp, fp=fp, fn=fn,
    )


def attack(image, boxes, kind: str, params: dict | None, rng: np.random.Generator):
    """One named distortion; randomness not pinned by ``params`` comes from ``rng``."""
    params = dict(params or {})
    if kind == "malicious_swap":
        return apply_malicious(image, list(boxes), rng=rng, replace=params.get("replace", "random"))
    if kind == "gaussian_noise" and "seed" not in params:
        params["seed"] = int(rng.integers(0, 2 ** 31))
    if kind in ("saturation", "hue") and "sign" not in params:
        params["sign"] = 1
    return apply_common(image, kind, params)


def overlay(image: torch.Tensor, flagged_boxes, alpha: float = 0.45) -> np.ndarray:
    """Red fill over flagged face boxes; returns ``H x W x 3`` uint8."""
    out = to_uint8(image).astype(np.float64)
    h, w = out.shape[:2]
    red = np.array([255.0, 0.0, 0.0])
    for box in flagged_boxes:
        x0, y0, x1, y1 = box
        xs, ys = slice(max(0, math.floor(x0)), min(w, math.ceil(x1))), slice(max(0, math.floor(y0)), min(h, math.ceil(y1)))
        out[ys, xs] = (1 - alpha) * out[ys, xs] + alpha * red
    return np.round(out).astype(np.uint8)


# -- aggregation --------------------------------------------------------------

def _nanmean(values):
    values = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(values)) if values else float("nan")


def summarize(reports, distortion: str | None = None) -> dict:
    """One table row from per-image reports (dicts or :class:`ForensicReport`)."""
    reports = [r if isinstance(r, ForensicReport) else ForensicReport.from_dict(r) for r in reports]
    faces = [f for r in reports for f in r.faces]
    tp, fp, fn = (sum(getattr(r, k) for r in reports) for k in ("tp", "fp", "fn"))
    f1, precision, recall = f1_from_counts(tp, fp, fn)
    if tp + fn == 0:
        f1 = precision = recall = float("nan")
    return {
        "distortion": distortion if distortion is not None else (reports[0].distortion if reports else ""),
        "images": len(reports),
        "faces": len(faces),
        "psnr": _nanmean([r.psnr for r in reports]),
        "ssim": _nanmean([r.ssim for r in reports]),
        "ber_tr": _nanmean([f.tracer_ber for f in faces]),
        "ber_lo": _nanmean([f.localizer_ber for f in faces]),
        "f1": f1,
        "precision": precision,
        "recall": recall,
        "auc": localization_auc([(f.score, f.is_forged) for f in faces]),
    }


def summary_table(reports) -> list:
    """Rows per distortion in first-seen order, then a pooled ``all`` row."""
    order, groups = [], {}
    for r in reports:
        key = r.distortion if isinstance(r, ForensicReport) else r["distortion"]
        if key not in groups:
            order.append(key)
            groups[key] = []
        groups[key].append(r)
    rows = [summarize(groups[k], k) for k in order]
    if reports:
        rows.append(summarize(reports, "all"))
    return rows


def write_summary_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_summary_csv(path) -> list:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in SUMMARY_FIELDS[1:]:
            row[k] = int(row[k]) if k in ("images", "faces") else float(row[k])
    return rows


def plot_ber_bars(rows, path, theta_ber: float = DEFAULT_THETA_BER) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in rows if r["distortion"] != "all"]
    names = [r["distortion"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, 0.7 * len(rows)), 3.5))
    ax.bar(x - 0.2, [100 * r["ber_tr"] for r in rows], 0.4, label="tracer")
    ax.bar(x + 0.2, [100 * r["ber_lo"] for r in rows], 0.4, label="localizer")
    ax.axhline(100 * theta_ber, color="red", lw=1)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("BER (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- sweeps -----------------------------------------------------------------------

@dataclass
class SuiteEntry:
    name: str
    kind: str
    params: dict


def parse_suite(spec=None) -> list:
    """``None`` gives the default sweep; otherwise a list of names from it or
    ``(name, kind, params)`` triples."""
    if spec is None:
        return [SuiteEntry(*e) for e in DEFAULT_SUITE]
    table = {e[0]: e for e in DEFAULT_SUITE}
    out = []
    for item in spec:
        if isinstance(item, str):
            if item not in table:
                raise ValidationError(f"unknown attack {item!r}; choose from {sorted(table)}")
            out.append(SuiteEntry(*table[item]))
        else:
            out.append(SuiteEntry(*item))
    return out


def evaluate(bundle: ModelBundle, records, registry: IdentityRegistry, suite=None,
             theta_ber: float = DEFAULT_THETA_BER, seed: int = 0, out_dir=None, overlays: int = 4):
    """Embed every record with registry identities, run each attack, analyze.

    Returns ``(reports, rows)``. With ``out_dir`` writes ``reports/<stem>.json``
    per image, ``summary.csv``, ``ber_bars.png`` and a few overlays of the
    swap attack.
    """
    entries = parse_suite(suite)
    out_dir = Path(out_dir) if out_dir is not None else None
    reports = []
    for i, rec in enumerate(records):
        rng = np.random.default_rng([seed, i])
        cover = rec.tensor()
        boxes = rec.boxes
        messages = assign_messages(registry, len(boxes), rng)
        encoded = embed_image(bundle, cover, boxes, messages)
        per_image = []
        for j, entry in enumerate(entries):
            out = attack(encoded, boxes, entry.kind, entry.params, np.random.default_rng([seed, i, j]))
            rep = analyze(bundle, out.image, boxes, registry, theta_ber, cover=cover, truth_bits=messages.bits,
                          forged_boxes=out.forged_boxes, name=rec.image_path, distortion=entry.name,
                          params=out.params)
            per_image.append(rep)
            if out_dir is not None and entry.kind == "malicious_swap" and i < overlays:
                flagged = [f.box for f in rep.faces if f.forged_flag]
                write_png(out_dir / "overlays" / f"{Path(rec.image_path).stem}.png", overlay(out.image, flagged))
        if out_dir is not None:
            path = out_dir / "reports" / f"{i:05d}_{Path(rec.image_path).stem}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({"image": rec.image_path, "identities": messages.identities,
                                        "reports": [r.to_dict() for r in per_image]}, indent=1))
        reports.extend(per_image)
    rows = summary_table(reports)
    if out_dir is not None:
        write_summary_csv(out_dir / "summary.csv", rows)
        plot_ber_bars(rows, out_dir / "ber_bars.png", theta_ber)
    return reports, rows


def load_reports(out_dir) -> list:
    """Per-image reports written by :func:`evaluate`, in input order."""
    reports = []
    for path in sorted((Path(out_dir) / "reports").glob("*.json")):
        reports.extend(ForensicReport.from_dict(r) for r in json.loads(path.read_text())["reports"])
    return reports


def localizer_separation(bundle: ModelBundle, records, seed: int = 0):
    """Mean localizer BER on swapped faces minus mean localizer BER under the
    common pool, both against the embedded payloads.

    Each image gets fresh random payloads, one draw from the common branch and
    one swap. Returns ``(separation, details)``.
    """
    com, mal, clean_tr = [], [], []
    length = bundle.config.message_length
    patch = bundle.config.patch_size
    for i, rec in enumerate(records):
        rng = np.random.default_rng([seed, i])
        image, boxes = rec.tensor(), rec.boxes
        if not boxes:
            continue
        messages = assign_messages(None, len(boxes), rng, length=length)
        encoded = embed_image(bundle, image, boxes, messages)
        bits = messages.bits
        clean_tr.extend(np.mean(harden(decode_faces(bundle.tracer, encoded, boxes, patch)) != bits, axis=1))
        out = sample_branch(encoded, boxes, rng, "common")
        com.extend(np.mean(harden(decode_faces(bundle.localizer, out.image, boxes, patch)) != bits, axis=1))
        out = apply_malicious(encoded, boxes, rng=rng)
        lo = harden(decode_faces(bundle.localizer, out.image, boxes, patch))
        for k, box in enumerate(boxes):
            if any(iou(box.p, f) > IOU_MATCH for f in out.forged_boxes):
                mal.append(float(np.mean(lo[k] != bits[k])))
    details = {
        "ber_lo_common": float(np.mean(com)) if com else float("nan"),
        "ber_lo_malicious": float(np.mean(mal)) if mal else float("nan"),
        "ber_tr_clean": float(np.mean(clean_tr)) if clean_tr else float("nan"),
        "n_common": len(com),
        "n_malicious": len(mal),
    }
    return details["ber_lo_malicious"] - details["ber_lo_common"], details


__all__ = [
    "COMMON_KINDS", "DEFAULT_SUITE", "SUMMARY_FIELDS", "analyze", "attack", "decode_faces", "embed_image",
    "evaluate", "load_reports", "localize", "localizer_separation", "overlay", "parse_suite", "plot_ber_bars",
    "read_summary_csv", "reference_bits", "summarize", "summary_table", "trace", "write_summary_csv",
]

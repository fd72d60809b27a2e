"""Command line front end.

    facemark synth     --out-dir D [--count N] [--seed S]
    facemark train     --out-dir D [--config C] [--manifest M] [--seed S]
    facemark embed     --checkpoint K --manifest M --registry R --out-dir D
    facemark attack    --manifest M --attack KIND [--params JSON] --out-dir D
    facemark trace     --checkpoint K --manifest M --registry R [--out-dir D]
    facemark localize  --checkpoint K --manifest M --registry R --out-dir D [--theta-ber T]
    facemark evaluate  --checkpoint K --manifest M --registry R --out-dir D [--attack a,b,...]
    facemark stats     --manifest M [--out-dir D]

Exit status is 0 on success, 1 for invalid input and 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import forensics
from .data import (
    AnnotatedImage, IdentityRegistry, assign_messages, face_resolution_stats, generate_synthetic_dataset,
    load_annotations, write_manifest, write_png,
)
from .errors import NonFiniteLossError, ValidationError
from .metrics import DEFAULT_THETA_BER, f1_from_counts, localization_auc, psnr, ssim
from .models import load_checkpoint
from .noise_pool import KINDS
from .training import DataConfig, build_dataset, desk_config, load_config, train

log = logging.getLogger("facemark")


@dataclass
class CommandResult:
    exit_code: int = 0
    artifacts: list = field(default_factory=list)


def _registry(path) -> IdentityRegistry:
    return IdentityRegistry.load(path)


def _sidecar_path(image_path) -> Path:
    return Path(image_path).with_suffix(".json")


def _read_sidecar(image_path):
    path = _sidecar_path(image_path)
    return json.loads(path.read_text()) if path.exists() else None


def _relocated(rec: AnnotatedImage, path: Path) -> AnnotatedImage:
    return AnnotatedImage(str(path), rec.width, rec.height, rec.faces, rec.split)


def _out_dir(args) -> Path:
    if args.out_dir is None:
        raise ValidationError("--out-dir is required for this command")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> CommandResult:
    out = _out_dir(args)
    rng = np.random.default_rng(args.seed)
    records = generate_synthetic_dataset(
        args.count, tuple(args.canvas), tuple(args.faces), rng, size_mean=args.size_mean,
        size_spread=args.size_spread, out_dir=out / "images", split=args.split,
    )
    manifest = out / "manifest.txt"
    write_manifest(manifest, records)
    registry = IdentityRegistry.generate(args.identities, rng=np.random.default_rng([args.seed, 1]))
    registry.save(out / "registry.json")
    print(f"wrote {len(records)} images, {sum(len(r.faces) for r in records)} faces; "
          f"registry of {len(registry)} identities")
    return CommandResult(0, [str(manifest), str(out / "registry.json")])


def cmd_train(args) -> CommandResult:
    out = _out_dir(args)
    config = load_config(args.config) if args.config else desk_config()
    if args.seed is not None:
        config.seed = args.seed
    if args.max_steps is not None:
        config.max_steps = args.max_steps
    dataset = load_annotations(args.manifest) if args.manifest else build_dataset(config)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    _, rows = train(dataset, config, out_dir=out, resume=not args.no_resume)
    if rows:
        last = rows[-1]
        print(f"step {last['step']}: psnr {last['psnr_probe']:.2f} dB, tracer BER {last['ber_tr']:.4f}, "
              f"localizer BER {last['ber_lo_com']:.4f} / {last['ber_lo_mal']:.4f}")
    return CommandResult(0, [str(out / "checkpoint.pt"), str(out / "log.csv")])


def cmd_embed(args) -> CommandResult:
    out = _out_dir(args)
    bundle, _ = load_checkpoint(args.checkpoint)
    registry = _registry(args.registry)
    records = load_annotations(args.manifest)
    queue = [s for s in args.identities.split(",") if s] if args.identities else None
    written, artifacts = [], []
    for i, rec in enumerate(records):
        rng = np.random.default_rng([args.seed, i])
        boxes = rec.boxes
        identities = None
        if queue is not None:
            if len(queue) < len(boxes):
                raise ValidationError(f"--identities ran out at {rec.image_path}")
            identities, queue = queue[:len(boxes)], queue[len(boxes):]
            for ident in identities:
                if ident not in registry:
                    raise ValidationError(f"identity {ident!r} is not registered")
        messages = assign_messages(registry, len(boxes), rng, identities=identities)
        cover = rec.tensor()
        encoded = forensics.embed_image(bundle, cover, boxes, messages)
        path = out / "images" / f"{Path(rec.image_path).stem}.png"
        write_png(path, encoded)
        _sidecar_path(path).write_text(json.dumps({
            "source": rec.image_path,
            "boxes": [[float(c) for c in b.p] for b in boxes],
            "identities": messages.identities,
            "bits": messages.bits.tolist(),
        }))
        written.append(_relocated(rec, path))
        artifacts.append(str(path))
        print(f"{path.name}: {len(boxes)} faces, PSNR {psnr(encoded, cover):.2f} dB, SSIM {ssim(encoded, cover):.4f}")
    manifest = out / "manifest.txt"
    write_manifest(manifest, written)
    return CommandResult(0, [str(manifest), *artifacts])


def cmd_attack(args) -> CommandResult:
    out = _out_dir(args)
    if args.attack not in KINDS:
        raise ValidationError(f"unknown attack {args.attack!r}; choose from {', '.join(KINDS)}")
    params = json.loads(args.params) if args.params else {}
    if not isinstance(params, dict):
        raise ValidationError("--params must be a JSON object")
    records = load_annotations(args.manifest)
    written, audit = [], []
    for i, rec in enumerate(records):
        rng = np.random.default_rng([args.seed, i])
        outcome = forensics.attack(rec.tensor(), rec.boxes, args.attack, params, rng)
        path = out / "images" / f"{Path(rec.image_path).stem}.png"
        write_png(path, outcome.image)
        side = _read_sidecar(rec.image_path) or {"source": rec.image_path}
        side["forged_boxes"] = [[float(c) for c in b] for b in outcome.forged_boxes]
        side["attack"] = outcome.to_record()
        _sidecar_path(path).write_text(json.dumps(side))
        written.append(_relocated(rec, path))
        audit.append(f"{path}\t{outcome.to_record()}")
    manifest = out / "manifest.txt"
    write_manifest(manifest, written)
    (out / "attacks.tsv").write_text("".join(line + "\n" for line in audit))
    print(f"{args.attack}: wrote {len(written)} images")
    return CommandResult(0, [str(manifest), str(out / "attacks.tsv")])


def cmd_trace(args) -> CommandResult:
    bundle, _ = load_checkpoint(args.checkpoint)
    registry = _registry(args.registry)
    records = load_annotations(args.manifest)
    report = []
    for rec in records:
        bits, identities = forensics.trace(bundle, rec.tensor(), rec.boxes, registry)
        side = _read_sidecar(rec.image_path)
        truth = np.asarray(side["bits"], dtype=np.uint8) if side and "bits" in side else None
        faces = []
        for k, box in enumerate(rec.boxes):
            face = {"box": [float(c) for c in box.p], "bits": bits[k].tolist(),
                    "identity": identities[k] if identities[k] is not None else "unknown"}
            if truth is not None:
                face["tracer_ber"] = float(np.mean(bits[k] != truth[k]))
                face["embedded_identity"] = side["identities"][k]
            faces.append(face)
            print(f"{Path(rec.image_path).name} face {k}: {face['identity']}"
                  + (f" (BER {face['tracer_ber']:.4f})" if truth is not None else ""))
        report.append({"image": rec.image_path, "faces": faces})
    artifacts = []
    if args.out_dir is not None:
        path = _out_dir(args) / "trace.json"
        path.write_text(json.dumps(report, indent=1))
        artifacts.append(str(path))
    return CommandResult(0, artifacts)


def cmd_localize(args) -> CommandResult:
    out = _out_dir(args)
    bundle, _ = load_checkpoint(args.checkpoint)
    registry = _registry(args.registry)
    records = load_annotations(args.manifest)
    entries, artifacts = [], []
    totals = [0, 0, 0]
    scored = []
    for rec in records:
        image = rec.tensor()
        side = _read_sidecar(rec.image_path) or {}
        truth = np.asarray(side["bits"], dtype=np.uint8) if "bits" in side else None
        rep = forensics.analyze(bundle, image, rec.boxes, registry, args.theta_ber, truth_bits=truth,
                                forged_boxes=side.get("forged_boxes", []), name=rec.image_path,
                                distortion="external")
        flagged = [f.box for f in rep.faces if f.forged_flag]
        path = out / "overlays" / f"{Path(rec.image_path).stem}.png"
        write_png(path, forensics.overlay(image, flagged))
        artifacts.append(str(path))
        entries.append(rep.to_dict())
        if "forged_boxes" in side:
            totals = [totals[0] + rep.tp, totals[1] + rep.fp, totals[2] + rep.fn]
            scored.extend((f.score, f.is_forged) for f in rep.faces)
        print(f"{Path(rec.image_path).name}: flagged {len(flagged)} of {len(rep.faces)} faces")
    boxes_path = out / "localize.json"
    boxes_path.write_text(json.dumps(entries, indent=1))
    if scored:
        f1, p, r = f1_from_counts(*totals)
        print(f"F1 {f1:.4f} (P {p:.4f}, R {r:.4f}), AUC {localization_auc(scored):.4f} at theta_ber {args.theta_ber}")
    return CommandResult(0, [str(boxes_path), *artifacts])


def cmd_evaluate(args) -> CommandResult:
    out = _out_dir(args)
    bundle, _ = load_checkpoint(args.checkpoint)
    registry = _registry(args.registry)
    records = load_annotations(args.manifest)
    suite = [s for s in args.attack.split(",") if s] if args.attack else None
    _, rows = forensics.evaluate(bundle, records, registry, suite, args.theta_ber, args.seed, out,
                                 overlays=args.overlays)
    for row in rows:
        print(f"{row['distortion']:>16}  PSNR {row['psnr']:6.2f}  SSIM {row['ssim']:.4f}  "
              f"BER_tr {100 * row['ber_tr']:6.2f}%  BER_lo {100 * row['ber_lo']:6.2f}%  "
              f"F1 {row['f1']:.4f}  AUC {row['auc']:.4f}")
    return CommandResult(0, [str(out / "summary.csv"), str(out / "ber_bars.png")])


def cmd_stats(args) -> CommandResult:
    records = load_annotations(args.manifest, verify_images=False)
    (counts_w, edges_w), (counts_h, edges_h), centroid = face_resolution_stats(records, bins=args.bins)
    print(f"{sum(len(r.faces) for r in records)} faces, centroid ({centroid[0]:.1f}, {centroid[1]:.1f})")
    if args.out_dir is None:
        return CommandResult(0, [])
    out = _out_dir(args)
    (out / "face_stats.json").write_text(json.dumps({
        "centroid": list(centroid),
        "hist_w": {"counts": counts_w.tolist(), "edges": edges_w.tolist()},
        "hist_h": {"counts": counts_h.tolist(), "edges": edges_h.tolist()},
    }, indent=1))
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for counts, edges, label in ((counts_w, edges_w, "width"), (counts_h, edges_h, "height")):
        if len(counts):
            ax.stairs(counts, edges, label=label)
    ax.axvline(centroid[0], color="red", lw=1)
    ax.set_xlabel("face size (px)")
    ax.set_ylabel("faces")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "face_stats.png", dpi=100)
    plt.close(fig)
    return CommandResult(0, [str(out / "face_stats.json"), str(out / "face_stats.png")])


# -- parser -----------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "embed": cmd_embed, "attack": cmd_attack, "trace": cmd_trace,
    "localize": cmd_localize, "evaluate": cmd_evaluate, "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facemark", description="Per-face attributable watermarking toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--seed", type=int, default=None if name == "train" else 0)
        for flag in flags:
            if flag == "checkpoint":
                p.add_argument("--checkpoint", required=True)
            elif flag == "manifest":
                p.add_argument("--manifest", required=True)
            elif flag == "registry":
                p.add_argument("--registry", required=True)
            elif flag == "theta":
                p.add_argument("--theta-ber", type=float, default=DEFAULT_THETA_BER)
        return p

    p = add("synth", "write a synthetic multi-face dataset, manifest and registry")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--canvas", type=int, nargs=2, default=list(DataConfig().canvas), metavar=("W", "H"))
    p.add_argument("--faces", type=int, nargs=2, default=list(DataConfig().faces_per_image), metavar=("MIN", "MAX"))
    p.add_argument("--size-mean", type=float, default=DataConfig().size_mean)
    p.add_argument("--size-spread", type=float, default=DataConfig().size_spread)
    p.add_argument("--split", default="train")
    p.add_argument("--identities", type=int, default=64, help="registry size")

    p = add("train", "train all networks")
    p.add_argument("--config", default=None, help="JSON or YAML config (preset: desk|full)")
    p.add_argument("--manifest", default=None, help="train on these images instead of a synthetic set")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--no-resume", action="store_true")

    p = add("embed", "embed registry identities into every annotated face", "checkpoint", "manifest", "registry")
    p.add_argument("--identities", default=None, help="comma-separated IDs consumed face by face")

    p = add("attack", "apply one distortion to every image", "manifest")
    p.add_argument("--attack", required=True, help=", ".join(KINDS))
    p.add_argument("--params", default=None, help="JSON object of distortion parameters")

    add("trace", "decode identities per face", "checkpoint", "manifest", "registry")
    add("localize", "flag forged faces and draw overlays", "checkpoint", "manifest", "registry", "theta")

    p = add("evaluate", "run the distortion sweep and write the summary table", "checkpoint", "manifest",
            "registry", "theta")
    p.add_argument("--attack", default=None, help="comma-separated subset of the default suite")
    p.add_argument("--overlays", type=int, default=4)

    p = add("stats", "face size histograms and centroid", "manifest")
    p.add_argument("--bins", type=int, default=32)
    return parser


def run(argv=None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return CommandResult(0 if exc.code in (0, None) else 1)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(1)
    except (NonFiniteLossError, RuntimeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return CommandResult(2)


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())

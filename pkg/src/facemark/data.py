"""Annotated multi-face images: manifests, synthetic scenes, identity codebook."""
from __future__ import annotations

import json
import shlex
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ValidationError
from .geometry import FaceBox, to_absolute
from .models import MessageMatrix

SPLITS = ("train", "val", "test")
REGISTRY_VERSION = 1


@dataclass
class AnnotatedImage:
    image_path: str
    width: int
    height: int
    faces: list = field(default_factory=list)  # normalized [x0, y0, x1, y1] per face
    split: str = "train"
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        self.faces = [[float(c) for c in f] for f in self.faces]
        for f in self.faces:
            to_absolute(f, self.width, self.height)

    @property
    def boxes(self) -> list:
        return [FaceBox(tuple(f), self.width, self.height) for f in self.faces]

    def load(self) -> np.ndarray:
        """``H x W x 3`` uint8 pixels, from memory when available."""
        if self.pixels is not None:
            return self.pixels
        return read_png(self.image_path)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return to_tensor(self.load(), dtype)


def read_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, pixels) -> None:
    if isinstance(pixels, torch.Tensor):
        pixels = to_uint8(pixels)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, format="PNG")


def to_tensor(pixels: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(pixels, dtype=dtype).permute(2, 0, 1) / 255.0


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().clamp(0, 1).mul(255).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


# -- manifest ---------------------------------------------------------------

def format_record(rec: AnnotatedImage) -> str:
    fields = [shlex.quote(str(rec.image_path)), str(rec.width), str(rec.height), rec.split]
    for f in rec.faces:
        fields.extend(repr(float(c)) for c in f)
    return " ".join(fields)


def parse_record(line: str, lineno: int = 0) -> AnnotatedImage:
    try:
        tokens = shlex.split(line)
        path, w, h = tokens[0], int(tokens[1]), int(tokens[2])
        rest = tokens[3:]
        split = "train"
        if rest and rest[0] in SPLITS:
            split, rest = rest[0], rest[1:]
        if len(rest) % 4:
            raise ValidationError(f"expected 4 floats per face, got {len(rest)} values")
        coords = [float(t) for t in rest]
        faces = [coords[i:i + 4] for i in range(0, len(coords), 4)]
        return AnnotatedImage(path, w, h, faces, split)
    except (ValueError, IndexError) as exc:
        raise ValidationError(f"line {lineno}: {exc}") from exc


def write_manifest(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("# path width height split x0 y0 x1 y1 ... (normalized boxes)\n")
        for rec in records:
            fh.write(format_record(rec) + "\n")


def load_annotations(manifest_path, verify_images: bool = True) -> list:
    """Parse a manifest; relative image paths resolve against its directory."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    records = []
    errors = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            rec = parse_record(line, lineno)
        except ValidationError as exc:
            errors.append(str(exc) if str(exc).startswith("line") else f"line {lineno}: {exc}")
            continue
        if verify_images:
            img_path = Path(rec.image_path)
            if not img_path.is_absolute():
                img_path = manifest_path.parent / img_path
            if not img_path.exists():
                errors.append(f"line {lineno}: image not found: {img_path}")
                continue
            with Image.open(img_path) as im:
                if im.size != (rec.width, rec.height):
                    errors.append(
                        f"line {lineno}: dims {rec.width}x{rec.height} do not match image {im.size[0]}x{im.size[1]}"
                    )
                    continue
            rec.image_path = str(img_path)
        records.append(rec)
    if errors:
        raise ValidationError("; ".join(errors))
    return records


# -- synthetic scenes -------------------------------------------------------

def _smooth_noise(rng, h, w, cells=4):
    coarse = rng.random((cells + 1, cells + 1))
    t = torch.as_tensor(coarse)[None, None]
    up = torch.nn.functional.interpolate(t, size=(h, w), mode="bicubic", align_corners=True)
    return up[0, 0].numpy()


def render_face(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """A face-like ``h x w x 3`` float patch in [0, 1]: hair/background, skin, eyes, mouth, texture."""
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w * 2 - 1
    v = (yy + 0.5) / h * 2 - 1

    hair = rng.uniform(0.05, 0.6, size=3)
    img = np.empty((h, w, 3))
    img[:] = hair
    img *= (0.8 + 0.4 * _smooth_noise(rng, h, w, 3))[..., None]

    skin = np.array([rng.uniform(0.45, 0.95), rng.uniform(0.3, 0.75), rng.uniform(0.2, 0.6)])
    ax, ay = rng.uniform(0.72, 0.92), rng.uniform(0.8, 0.98)
    face = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    shade = 0.85 + 0.3 * _smooth_noise(rng, h, w, 2)
    img[face] = (skin * shade[..., None])[face]

    eye_y = rng.uniform(-0.35, -0.1)
    eye_dx = rng.uniform(0.25, 0.45)
    eye_r = rng.uniform(0.08, 0.16)
    iris = rng.uniform(0.0, 0.35, size=3)
    for sx in (-1, 1):
        eye = ((u - sx * eye_dx) / eye_r) ** 2 + ((v - eye_y) / (0.6 * eye_r)) ** 2 <= 1.0
        img[eye] = iris
    mouth_y = rng.uniform(0.35, 0.6)
    mouth = (np.abs(v - mouth_y - 0.15 * u ** 2 * rng.choice([-1, 1])) < rng.uniform(0.03, 0.07)) & (np.abs(u) < rng.uniform(0.2, 0.4))
    img[mouth] = rng.uniform(0.25, 0.6, size=3) * np.array([1.0, 0.5, 0.5])
    nose = (np.abs(u) < 0.04) & (v > eye_y + 0.1) & (v < mouth_y - 0.15)
    img[nose] *= 0.85

    freq = rng.uniform(2, 6, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    stripes = np.sin(freq[0] * np.pi * u + phase[0]) * np.sin(freq[1] * np.pi * v + phase[1])
    img += 0.04 * stripes[..., None]
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def render_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.1, 0.9, size=3)
    grad = rng.uniform(-0.3, 0.3, size=(2, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    img = base + (xx / w)[..., None] * grad[0] + (yy / h)[..., None] * grad[1]
    img = img + 0.2 * (_smooth_noise(rng, h, w, 6)[..., None] - 0.5)
    for _ in range(rng.integers(2, 6)):
        x0, y0 = rng.integers(0, w), rng.integers(0, h)
        bw, bh = rng.integers(w // 8, w // 2), rng.integers(h // 8, h // 2)
        img[y0:y0 + bh, x0:x0 + bw] = rng.uniform(0, 1, size=3)
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _sample_face_size(rng, size_mean, size_spread):
    side = float(np.clip(rng.normal(size_mean, size_spread / 2), max(16, size_mean - size_spread), size_mean + size_spread))
    aspect = rng.uniform(0.9, 1.15)
    return int(round(side)), int(round(side * aspect))


def _place_faces(rng, canvas_w, canvas_h, n, size_mean, size_spread, tries=200):
    boxes = []
    while len(boxes) < n:
        for _ in range(tries):
            w, h = _sample_face_size(rng, size_mean, size_spread)
            h = max(16, min(h, canvas_h))
            w = max(16, min(w, canvas_w))
            x0 = int(rng.integers(0, canvas_w - w + 1))
            y0 = int(rng.integers(0, canvas_h - h + 1))
            cand = (x0, y0, x0 + w, y0 + h)
            if all(cand[2] <= b[0] or b[2] <= cand[0] or cand[3] <= b[1] or b[3] <= cand[1] for b in boxes):
                boxes.append(cand)
                break
        else:
            return None
    return boxes


def generate_synthetic_dataset(
    count: int,
    canvas=(256, 256),
    faces_per_image=(1, 3),
    rng: np.random.Generator | None = None,
    size_mean: float = 64.0,
    size_spread: float = 24.0,
    out_dir=None,
    split: str = "train",
) -> list:
    """Procedural multi-face scenes with pixel-exact, non-overlapping, integer-aligned boxes.

    Face sides are drawn from a normal around ``size_mean`` (std ``size_spread / 2``)
    truncated to ``size_mean +- size_spread``. When ``out_dir`` is given, PNGs are
    written there; pixels are always kept in memory as well.
    """
    W, H = int(canvas[0]), int(canvas[1])
    lo, hi = int(faces_per_image[0]), int(faces_per_image[1])
    if W < 128 or H < 128:
        raise ValidationError(f"canvas must be at least 128x128, got {W}x{H}")
    if not 1 <= lo <= hi <= 8:
        raise ValidationError(f"faces_per_image must lie in [1, 8], got {faces_per_image}")
    rng = rng if rng is not None else np.random.default_rng()
    records = []
    for k in range(count):
        n = int(rng.integers(lo, hi + 1))
        boxes = None
        for _ in range(20):
            boxes = _place_faces(rng, W, H, n, size_mean, size_spread)
            if boxes is not None:
                break
        if boxes is None:
            raise ValidationError(f"cannot pack {n} faces of ~{size_mean}px into a {W}x{H} canvas")
        img = render_background(rng, H, W)
        for (x0, y0, x1, y1) in boxes:
            img[y0:y1, x0:x1] = render_face(rng, y1 - y0, x1 - x0)
        pixels = np.round(img * 255).astype(np.uint8)
        name = f"synth_{k:05d}.png"
        path = name
        if out_dir is not None:
            path = str(Path(out_dir) / name)
            write_png(path, pixels)
        faces = [[x0 / W, y0 / H, x1 / W, y1 / H] for (x0, y0, x1, y1) in boxes]
        records.append(AnnotatedImage(path, W, H, faces, split, pixels))
    return records


def face_resolution_stats(dataset, bins=32):
    """Histograms of absolute face widths and heights plus their centroid."""
    widths, heights = [], []
    for rec in dataset:
        for f in rec.faces:
            p = to_absolute(f, rec.width, rec.height)
            widths.append(p[2] - p[0])
            heights.append(p[3] - p[1])
    widths = np.asarray(widths, dtype=np.float64)
    heights = np.asarray(heights, dtype=np.float64)
    if widths.size == 0:
        empty = (np.zeros(0), np.zeros(1))
        return empty, empty, (float("nan"), float("nan"))
    hist_w = np.histogram(widths, bins=bins)
    hist_h = np.histogram(heights, bins=bins)
    return hist_w, hist_h, (float(widths.mean()), float(heights.mean()))


# -- identities ---------------------------------------------------------------

def hamming(a, b) -> int:
    return int(np.count_nonzero(np.asarray(a, dtype=np.uint8) != np.asarray(b, dtype=np.uint8)))


class IdentityRegistry:
    """Identity ID -> L-bit codeword, keeping every pair at least ``d_min`` apart."""

    def __init__(self, length: int = 15, d_min: int = 5):
        if length < 1 or d_min < 1:
            raise ValidationError("length and d_min must be positive")
        self.length = length
        self.d_min = d_min
        self.entries: dict = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.entries)

    def __contains__(self, identity):
        return identity in self.entries

    def codeword(self, identity) -> np.ndarray:
        return self.entries[identity]

    def _admissible(self, word) -> bool:
        return all(hamming(word, other) >= self.d_min for other in self.entries.values())

    def add(self, identity: str, codeword=None, rng: np.random.Generator | None = None, max_tries=10000):
        with self._lock:
            if identity in self.entries:
                raise ValidationError(f"identity {identity!r} already registered")
            if codeword is not None:
                word = np.asarray(codeword, dtype=np.uint8).reshape(-1)
                if word.shape != (self.length,) or word.max(initial=0) > 1:
                    raise ValidationError(f"codeword must be {self.length} bits")
                if not self._admissible(word):
                    raise ValidationError(f"codeword for {identity!r} violates d_min={self.d_min}")
            else:
                rng = rng if rng is not None else np.random.default_rng()
                for _ in range(max_tries):
                    word = rng.integers(0, 2, size=self.length, dtype=np.uint8)
                    if self._admissible(word):
                        break
                else:
                    raise ValidationError(f"no admissible codeword found for {identity!r}; registry is full")
            self.entries[identity] = word
            return word

    def match(self, bits, max_distance: float | None = None):
        """Nearest identity by Hamming distance, or ``(None, d)`` beyond ``max_distance`` (default L/4)."""
        if max_distance is None:
            max_distance = self.length / 4
        best, best_d = None, None
        for ident, word in self.entries.items():
            d = hamming(bits, word)
            if best_d is None or d < best_d:
                best, best_d = ident, d
        if best is None or best_d > max_distance:
            return None, best_d
        return best, best_d

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": REGISTRY_VERSION,
                "length": self.length,
                "d_min": self.d_min,
                "entries": {k: "".join(str(int(b)) for b in v) for k, v in self.entries.items()},
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "IdentityRegistry":
        obj = json.loads(text)
        if obj.get("version") != REGISTRY_VERSION:
            raise ValidationError(f"unsupported registry version {obj.get('version')!r}")
        reg = cls(obj["length"], obj["d_min"])
        for ident, word in obj["entries"].items():
            reg.add(ident, [int(c) for c in word])
        return reg

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "IdentityRegistry":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"registry not found: {path}")
        return cls.from_json(path.read_text())

    @classmethod
    def generate(cls, count: int, length: int = 15, d_min: int = 5, rng=None, prefix="id") -> "IdentityRegistry":
        reg = cls(length, d_min)
        rng = rng if rng is not None else np.random.default_rng()
        for i in range(count):
            reg.add(f"{prefix}{i:04d}", rng=rng)
        return reg


def assign_messages(registry: IdentityRegistry | None, n_faces: int, rng: np.random.Generator,
                    identities=None, length: int | None = None) -> MessageMatrix:
    """Give every face a payload.

    With a registry, faces receive distinct registry identities (or the ones
    passed in ``identities``). With ``registry=None`` fresh uniformly random
    bits of ``length`` are drawn, which is the training-time mode.
    """
    if registry is None:
        if length is None:
            raise ValidationError("length is required when no registry is given")
        return MessageMatrix(rng.integers(0, 2, size=(n_faces, length), dtype=np.uint8))
    if identities is None:
        if n_faces > len(registry):
            raise ValidationError(f"registry has {len(registry)} identities, {n_faces} faces requested")
        keys = list(registry.entries)
        identities = [keys[i] for i in rng.choice(len(keys), size=n_faces, replace=False)] if n_faces else []
    if len(identities) != n_faces:
        raise ValidationError(f"{len(identities)} identities for {n_faces} faces")
    if n_faces == 0:
        return MessageMatrix.empty(registry.length)
    bits = np.stack([registry.codeword(i) for i in identities])
    return MessageMatrix(bits, list(identities))

"""Shared fixtures.

Trained desk-scale models are built on first use and cached under
``tests/.cache``, keyed by a hash of the training config and the package
sources, so later runs reuse them.
"""
import hashlib
import json
import time
from pathlib import Path

import pytest
import torch

import facemark
from facemark.models import load_checkpoint, save_checkpoint
from facemark.training import build_dataset, desk_config, train

CACHE = Path(__file__).parent / ".cache"
HELD_OUT_SEED = 999
HELD_OUT_COUNT = 64


def _source_digest():
    h = hashlib.sha256()
    for path in sorted(Path(facemark.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    h.update(torch.__version__.encode())
    return h.hexdigest()


def trained(name, **overrides):
    """Desk-scale model for ``overrides``; returns ``(bundle, meta)``."""
    config = desk_config(**overrides)
    key = hashlib.sha256((json.dumps(config.to_dict(), sort_keys=True, default=str) + _source_digest()).encode())
    stem = CACHE / f"{name}-{key.hexdigest()[:16]}"
    ckpt, meta_path = stem.with_suffix(".pt"), stem.with_suffix(".json")
    if ckpt.exists() and meta_path.exists():
        bundle, _ = load_checkpoint(ckpt)
        return bundle.eval(), json.loads(meta_path.read_text())
    dataset = build_dataset(config)
    start = time.perf_counter()
    bundle, rows = train(dataset, config)
    seconds = time.perf_counter() - start
    CACHE.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, bundle)
    meta = {"seconds": seconds, "steps": rows[-1]["step"] + 1, "final": rows[-1], "images": len(dataset)}
    meta_path.write_text(json.dumps(meta, indent=1))
    return bundle.eval(), meta


def held_out():
    return build_dataset(desk_config(), count=HELD_OUT_COUNT, seed=HELD_OUT_SEED, split="test")


@pytest.fixture(scope="session")
def full_model():
    return trained("full")


@pytest.fixture(scope="session")
def held_out_records():
    return held_out()


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call":
                continue
            lines.extend(v for k, v in getattr(rep, "user_properties", []) if k == "criterion")
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import json
import math

import numpy as np
import pytest
import torch

from facemark import forensics as F
from facemark.data import IdentityRegistry, assign_messages, generate_synthetic_dataset
from facemark.errors import ValidationError
from facemark.metrics import ForensicReport
from facemark.models import MessageMatrix, ModelBundle, ModelConfig

TINY = ModelConfig(patch_size=(16, 16), message_length=15, base_channels=4, depth=2, disc_channels=4)


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(0)
    b = ModelBundle(TINY)
    with torch.no_grad():
        b.encoder.residual_head.weight.normal_(0, 0.5)
    return b.eval()


@pytest.fixture(scope="module")
def records():
    return generate_synthetic_dataset(4, (128, 128), (1, 3), np.random.default_rng(0), size_mean=30, size_spread=6)


@pytest.fixture(scope="module")
def registry():
    return IdentityRegistry.generate(16, rng=np.random.default_rng(1))


def halo_mask(boxes, w, h, pad=1):
    mask = np.zeros((h, w), dtype=bool)
    for b in boxes:
        x0, y0, x1, y1 = b.p
        mask[max(0, math.floor(y0) - pad):min(h, math.ceil(y1) + pad),
             max(0, math.floor(x0) - pad):min(w, math.ceil(x1) + pad)] = True
    return mask


def test_embedding_changes_only_box_halos(bundle, records, registry):
    for i, rec in enumerate(records):
        img = rec.tensor()
        msgs = assign_messages(registry, len(rec.boxes), np.random.default_rng(i))
        en = F.embed_image(bundle, img, rec.boxes, msgs)
        changed = (en != img).any(dim=0).numpy()
        assert changed.any()
        assert not (changed & ~halo_mask(rec.boxes, rec.width, rec.height)).any()
        # stored on the 8-bit grid
        assert torch.equal(torch.round(en * 255) / 255, en)


def test_embed_without_faces_is_identity(bundle, records):
    img = records[0].tensor()
    assert torch.equal(F.embed_image(bundle, img, [], MessageMatrix.empty(15)), img)
    with pytest.raises(ValidationError):
        F.embed_image(bundle, img, records[0].boxes, MessageMatrix.empty(15))


def test_reference_bits_fallback(registry):
    raw = np.zeros((2, 15), dtype=np.uint8)
    ref = F.reference_bits(raw, ["id0002", None], registry)
    assert np.array_equal(ref[0], registry.codeword("id0002")) and np.array_equal(ref[1], raw[1])


def test_analyze_labels_and_counts(bundle, records, registry):
    rec = records[1]
    img = rec.tensor()
    boxes = rec.boxes
    forged = [list(boxes[0].p)]
    rep = F.analyze(bundle, img, boxes, registry, 0.1, cover=img, forged_boxes=forged, name="x", distortion="d")
    assert rep.faces[0].is_forged and not any(f.is_forged for f in rep.faces[1:])
    flagged = sum(f.forged_flag for f in rep.faces)
    assert rep.tp + rep.fp == flagged and rep.tp + rep.fn == 1
    assert rep.psnr == 100.0 and rep.ssim == pytest.approx(1.0)
    # without truth the localizer BER column falls back to the score
    assert all(f.localizer_ber == f.score and f.tracer_ber is None for f in rep.faces)


def test_attack_is_seeded(records):
    img, boxes = records[2].tensor(), records[2].boxes
    for kind, params in (("gaussian_noise", {"sigma": 0.02}), ("malicious_swap", {}), ("hue", {"f": 0.2})):
        a = F.attack(img, boxes, kind, params, np.random.default_rng(3))
        b = F.attack(img, boxes, kind, params, np.random.default_rng(3))
        assert torch.equal(a.image, b.image) and a.to_record() == b.to_record()


def test_overlay_marks_only_flagged(records):
    img = records[0].tensor()
    box = list(records[0].boxes[0].p)
    out = F.overlay(img, [box])
    base = F.overlay(img, [])
    diff = (out != base).any(axis=2)
    assert diff.any()
    assert not (diff & ~halo_mask(records[0].boxes[:1], img.shape[2], img.shape[1])).any()


def test_parse_suite():
    assert [e.name for e in F.parse_suite()] == [e[0] for e in F.DEFAULT_SUITE]
    assert F.parse_suite(["jpeg_q50"])[0].params == {"quality": 50}
    assert F.parse_suite([("mine", "jpeg", {"quality": 60})])[0].kind == "jpeg"
    with pytest.raises(ValidationError):
        F.parse_suite(["nope"])


def test_summary_rows_recompute_from_reports(bundle, records, registry, tmp_path):
    suite = ["identity", "jpeg_q50", "malicious_swap"]
    reports, rows = F.evaluate(bundle, records, registry, suite, 0.1, seed=4, out_dir=tmp_path, overlays=2)
    assert [r["distortion"] for r in rows] == suite + ["all"]
    loaded = F.load_reports(tmp_path)
    assert [r.to_dict() for r in loaded] == [r.to_dict() for r in reports]
    csv_rows = F.read_summary_csv(tmp_path / "summary.csv")
    again = F.summary_table(loaded)
    for got, want in zip(csv_rows, again):
        for k in F.SUMMARY_FIELDS:
            a, b = got[k], want[k]
            assert (isinstance(a, float) and math.isnan(a) and math.isnan(b)) or a == b, k
    # independent recount of the swap row from the raw JSON
    raw = [r for p in sorted((tmp_path / "reports").glob("*.json")) for r in json.loads(p.read_text())["reports"]]
    swap = [r for r in raw if r["distortion"] == "malicious_swap"]
    tp, fp, fn = (sum(r[k] for r in swap) for k in ("tp", "fp", "fn"))
    row = next(r for r in csv_rows if r["distortion"] == "malicious_swap")
    expect_f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
    assert row["f1"] == pytest.approx(expect_f1, abs=1e-12)
    assert row["faces"] == sum(len(r["faces"]) for r in swap)
    assert (tmp_path / "ber_bars.png").exists() and len(list((tmp_path / "overlays").glob("*.png"))) == 2


def test_evaluate_is_deterministic(bundle, records, registry):
    a = F.evaluate(bundle, records[:2], registry, ["noise_s0.02", "malicious_swap"], seed=7)[0]
    b = F.evaluate(bundle, records[:2], registry, ["noise_s0.02", "malicious_swap"], seed=7)[0]
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


def test_summarize_without_forgeries_has_nan_f1():
    rep = ForensicReport("a", "identity", 40.0, 0.9, [], {}, [], 0, 0, 0)
    row = F.summarize([rep])
    assert math.isnan(row["f1"]) and math.isnan(row["auc"])


def test_localizer_separation_reports_counts(bundle, records):
    sep, details = F.localizer_separation(bundle, records, seed=1)
    assert details["n_common"] == sum(len(r.faces) for r in records)
    assert details["n_malicious"] >= len(records)
    assert sep == pytest.approx(details["ber_lo_malicious"] - details["ber_lo_common"])

import json

import numpy as np
import pytest
import torch

from facemark.errors import ValidationError
from facemark.geometry import FaceBox, rasterize_boxes
from facemark.noise_pool import (
    COMMON_KINDS, FEATHER_PX, DistortionOutcome, apply_common, apply_malicious, gaussian_blur, hue, jpeg,
    parse_record, sample_branch, sample_common_params, saturation,
)

W = H = 96


def scene(seed=0, n=3, dtype=torch.float32):
    rng = np.random.default_rng(seed)
    img = torch.as_tensor(rng.random((3, H, W)), dtype=dtype)
    boxes = []
    for k in range(n):
        x0 = 4 + 30 * k + float(rng.uniform(0, 3))
        y0 = float(rng.uniform(4, 40))
        boxes.append(FaceBox.from_absolute([x0, y0, x0 + 24, y0 + float(rng.uniform(20, 40))], W, H))
    return img, boxes


def test_identity_is_bit_exact():
    img, _ = scene()
    out = apply_common(img, "identity")
    assert torch.equal(out.image, img)
    assert out.forged_boxes == [] and out.mask.sum() == 0


def test_noise_sample_std():
    img = torch.full((3, 256, 256), 0.5, dtype=torch.float64)
    for sigma in (0.005, 0.02, 0.05):
        out = apply_common(img, "gaussian_noise", {"sigma": sigma, "seed": 3}).image
        assert abs(float((out - img).std()) - sigma) <= 0.1 * sigma


def test_blur_keeps_constant():
    img = torch.full((3, 20, 20), 0.3, dtype=torch.float64)
    for kernel, sigma in ((3, 0.5), (3, 1.0), (5, 1.5)):
        out = gaussian_blur(img, kernel, sigma)
        assert torch.allclose(out, img, atol=1e-12)


def test_color_shifts_leave_gray_alone():
    img = torch.full((3, 8, 8), 0.4, dtype=torch.float64)
    assert torch.allclose(saturation(img, 0.3), img, atol=1e-12)
    assert torch.allclose(hue(img, 0.2, -1), img, atol=1e-12)


def test_saturation_scales_chroma():
    rng = np.random.default_rng(1)
    img = torch.as_tensor(rng.uniform(0.3, 0.7, (3, 8, 8)))
    up, down = saturation(img, 0.2), saturation(img, 0.2, -1)
    spread = lambda x: float((x - x.mean(dim=0, keepdim=True)).abs().mean())
    assert spread(up) > spread(img) > spread(down)
    assert float((up - img).abs().max()) > 0


@pytest.mark.parametrize("kind,params", [
    ("jpeg", {"quality": 40}), ("jpeg", {"quality": 96}), ("jpeg", {"quality": 70.5}),
    ("gaussian_blur", {"kernel": 7, "sigma": 1.0}), ("gaussian_blur", {"kernel": 3, "sigma": 2.0}),
    ("saturation", {"f": 0.5}), ("hue", {"f": 0.1}), ("hue", {"f": 0.2, "sign": 2}),
    ("gaussian_noise", {"sigma": 0.2, "seed": 0}), ("gaussian_noise", {"sigma": 0.01}),
    ("jpeg", {}), ("malicious_swap", {}),
])
def test_out_of_range_params(kind, params):
    img, _ = scene()
    with pytest.raises(ValidationError):
        apply_common(img, kind, params)


def test_jpeg_changes_pixels_and_passes_gradient_straight():
    img, _ = scene(dtype=torch.float64)
    x = img.clone().requires_grad_(True)
    out = jpeg(x, 50)
    assert float((out - img).abs().mean().detach()) > 1e-3
    g = torch.rand_like(img)
    (out * g).sum().backward()
    assert torch.equal(x.grad, g)


@pytest.mark.parametrize("kind,params", [
    ("gaussian_blur", {"kernel": 3, "sigma": 0.8}), ("gaussian_blur", {"kernel": 5, "sigma": 1.5}),
    ("saturation", {"f": 0.25}), ("hue", {"f": 0.2}), ("gaussian_noise", {"sigma": 0.01, "seed": 1}),
])
def test_common_distortions_gradcheck(kind, params):
    rng = np.random.default_rng(2)
    x = torch.as_tensor(rng.uniform(0.35, 0.65, (3, 16, 16))).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda t: apply_common(t, kind, params).image, (x,), eps=1e-6, atol=1e-7, rtol=1e-3)


def test_replace_all_two_faces():
    img, boxes = scene(n=2)
    out = apply_malicious(img, boxes, rng=np.random.default_rng(0), replace="all")
    assert len(out.forged_boxes) == 2
    assert out.mask.sum() == rasterize_boxes(out.forged_boxes, W, H).sum()
    assert out.params["replaced"] == [0, 1]


def test_malicious_locality_and_subset():
    for seed in range(50):
        img, boxes = scene(seed)
        out = apply_malicious(img, boxes, rng=np.random.default_rng(seed))
        assert 1 <= len(out.forged_boxes) <= len(boxes)
        changed = (out.image != img).any(dim=0).numpy()
        assert not (changed & ~out.mask.astype(bool)).any()
        assert changed.any()


def test_malicious_needs_faces_and_mode():
    img, boxes = scene()
    with pytest.raises(ValidationError):
        apply_malicious(img, [])
    with pytest.raises(ValidationError):
        apply_malicious(img, boxes, replace="some")


def test_donor_sources():
    img, boxes = scene(n=2)
    donor = np.zeros((10, 10, 3))
    out = apply_malicious(img, boxes, donor_source=[donor], rng=np.random.default_rng(4), replace="all")
    x0, y0, x1, y1 = (int(c) for c in out.forged_boxes[0])
    cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
    assert torch.all(out.image[:, cy, cx] == 0)
    called = []
    apply_malicious(img, boxes, donor_source=lambda r, h, w: called.append((h, w)) or np.ones((h, w, 3)),
                    rng=np.random.default_rng(5), replace="all")
    assert len(called) == 2


def test_mask_consistency_random_outcomes():
    rng = np.random.default_rng(6)
    for k in range(200):
        img, boxes = scene(k, n=int(rng.integers(1, 4)))
        out = sample_branch(img, boxes, rng, "malicious")
        assert out.kind == "malicious_swap" and out.forged_boxes
        assert int(out.mask.sum()) == int(rasterize_boxes(out.forged_boxes, W, H).sum())


def test_forged_boxes_overlap_their_faces():
    img, boxes = scene()
    out = apply_malicious(img, boxes, rng=np.random.default_rng(7), replace="all")
    from facemark.geometry import iou

    for b, f in zip(boxes, out.forged_boxes):
        assert iou(b.p, f) >= 0.6


def test_branch_contracts():
    rng = np.random.default_rng(8)
    img, boxes = scene()
    kinds = set()
    for _ in range(200):
        common = sample_branch(img, boxes, rng, "common")
        assert common.forged_boxes == [] and common.mask.sum() == 0
        assert common.kind != "malicious_swap"
        arb = sample_branch(img, boxes, rng, "arbitrary")
        kinds.add(arb.kind)
        assert bool(arb.forged_boxes) == (arb.kind == "malicious_swap")
    assert kinds == {"identity", *COMMON_KINDS, "malicious_swap"}
    with pytest.raises(ValidationError):
        sample_branch(img, boxes, rng, "other")
    # no faces: the swap pools fall back to benign draws
    assert sample_branch(img, [], rng, "malicious").forged_boxes == []


def test_composition_probability():
    rng = np.random.default_rng(9)
    img, boxes = scene(n=1)
    pre = [("pre" in sample_branch(img, boxes, rng, "malicious", compose_prob=0.5).params) for _ in range(300)]
    assert 0.4 < np.mean(pre) < 0.6
    assert not any("pre" in sample_branch(img, boxes, rng, "malicious", compose_prob=0.0).params for _ in range(20))


def test_branch_determinism():
    img, boxes = scene()
    for branch in ("arbitrary", "common", "malicious"):
        for seed in range(10):
            a = sample_branch(img, boxes, np.random.default_rng(seed), branch)
            b = sample_branch(img, boxes, np.random.default_rng(seed), branch)
            assert torch.equal(a.image, b.image) and a.to_record() == b.to_record()


def test_record_round_trip():
    img, boxes = scene()
    out = apply_malicious(img, boxes, rng=np.random.default_rng(10))
    kind, params, forged = parse_record(out.to_record())
    assert kind == "malicious_swap" and forged == out.forged_boxes
    assert params == json.loads(json.dumps(out.params))
    with pytest.raises(ValidationError):
        parse_record("bogus\t{}\t[]")
    with pytest.raises(ValidationError):
        DistortionOutcome(img, "bogus")


def test_sampled_params_are_valid():
    rng = np.random.default_rng(11)
    img, _ = scene()
    for _ in range(40):
        for kind in COMMON_KINDS:
            apply_common(img, kind, sample_common_params(kind, rng))
    assert FEATHER_PX == 2.0

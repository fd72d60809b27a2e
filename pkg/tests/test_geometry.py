import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from facemark.errors import ValidationError
from facemark.geometry import (
    FaceBox, PatchBatch, crop_resample, iou, iou_matrix, paste_residual, rasterize_boxes, to_absolute,
    to_normalized,
)


def face(p, W, H):
    return FaceBox.from_absolute(p, W, H)


def random_box(rng, W, H, min_side=2.0):
    w = rng.uniform(min_side, W)
    h = rng.uniform(min_side, H)
    x0 = rng.uniform(0, W - w)
    y0 = rng.uniform(0, H - h)
    return [x0, y0, x0 + w, y0 + h]


# -- coordinates ---------------------------------------------------------------

def test_full_frame_box():
    np.testing.assert_array_equal(to_absolute([0, 0, 1, 1], 1024, 700), [0, 0, 1024, 700])


def test_elementwise_scaling():
    np.testing.assert_allclose(to_absolute([0.25, 0.5, 0.75, 1.0], 100, 200), [25, 100, 75, 200], atol=1e-12)


def test_round_trip_over_random_boxes():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        W, H = int(rng.integers(1, 3000)), int(rng.integers(1, 3000))
        v = np.sort(rng.uniform(0, 1, 2)), np.sort(rng.uniform(0, 1, 2))
        box = [v[0][0], v[1][0], v[0][1], v[1][1]]
        if box[0] == box[2] or box[1] == box[3]:
            continue
        back = to_normalized(to_absolute(box, W, H), W, H)
        assert np.max(np.abs(back - np.asarray(box))) <= 1e-9


@pytest.mark.parametrize("bad", [[0.5, 0, 0.5, 1], [0.6, 0, 0.4, 1], [0, 0.7, 1, 0.2], [0, 0, 1.2, 1], [-0.1, 0, 1, 1]])
def test_invalid_boxes_rejected(bad):
    with pytest.raises(ValidationError):
        to_absolute(bad, 10, 10)


def test_facebox_keeps_both_forms():
    b = FaceBox((0.1, 0.2, 0.5, 0.9), 200, 100)
    np.testing.assert_allclose(b.p, [20, 20, 100, 90], atol=1e-9)
    assert math.isclose(b.width, 80) and math.isclose(b.height, 70)
    with pytest.raises(ValidationError):
        FaceBox((0.5, 0.2, 0.5, 0.9), 200, 100)


# -- IoU --------------------------------------------------------------------------

def test_iou_hand_cases():
    assert iou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7, abs=1e-12)


def _pixel_iou(a, b, scale):
    """Point-sampling oracle on a grid ``scale`` times finer than the unit."""
    lo = min(a[0], b[0]), min(a[1], b[1])
    hi = max(a[2], b[2]), max(a[3], b[3])
    xs = lo[0] + (np.arange(int(round((hi[0] - lo[0]) * scale))) + 0.5) / scale
    ys = lo[1] + (np.arange(int(round((hi[1] - lo[1]) * scale))) + 0.5) / scale
    X, Y = np.meshgrid(xs, ys)
    in_a = (X >= a[0]) & (X < a[2]) & (Y >= a[1]) & (Y < a[3])
    in_b = (X >= b[0]) & (X < b[2]) & (Y >= b[1]) & (Y < b[3])
    return np.count_nonzero(in_a & in_b) / np.count_nonzero(in_a | in_b)


def test_iou_matches_rasterization_oracle():
    assert abs(_pixel_iou([0, 0, 2, 2], [1, 1, 3, 3], 1000) - iou([0, 0, 2, 2], [1, 1, 3, 3])) <= 1e-3
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = random_box(rng, 4, 4, 0.5)
        b = random_box(rng, 4, 4, 0.5)
        assert abs(_pixel_iou(a, b, 400) - iou(a, b)) <= 1e-2


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=8, max_size=8))
def test_iou_integer_boxes_exact(c):
    a = [min(c[0], c[2]), min(c[1], c[3]), max(c[0], c[2]) + 1, max(c[1], c[3]) + 1]
    b = [min(c[4], c[6]), min(c[5], c[7]), max(c[4], c[6]) + 1, max(c[5], c[7]) + 1]
    ma, mb = rasterize_boxes([a], 22, 22), rasterize_boxes([b], 22, 22)
    oracle = np.count_nonzero(ma & mb) / np.count_nonzero(ma | mb)
    assert iou(a, b) == pytest.approx(oracle, abs=1e-12)
    assert iou(a, b) == iou(b, a)
    assert iou(a, a) == 1.0


def test_iou_matrix_shape():
    m = iou_matrix([[0, 0, 1, 1], [0, 0, 2, 2]], [[0, 0, 1, 1]])
    assert m.shape == (2, 1)
    assert m[0, 0] == 1.0 and m[1, 0] == pytest.approx(0.25)


def test_rasterize_rounds_outward():
    m = rasterize_boxes([[1.2, 0.5, 2.1, 1.0]], 5, 4)
    assert m.sum() == 2 * 1  # columns 1..2, row 0
    assert m[0, 1] == 1 and m[0, 2] == 1


# -- crop ---------------------------------------------------------------------------

def test_crop_constant_image():
    img = torch.full((3, 40, 30), 0.37, dtype=torch.float64)
    rng = np.random.default_rng(2)
    boxes = [face(random_box(rng, 30, 40), 30, 40) for _ in range(5)]
    patches = crop_resample(img, boxes, (16, 16))
    assert torch.allclose(patches.data, torch.full_like(patches.data, 0.37), atol=1e-12)


def test_crop_grid_aligned_is_exact():
    img = torch.rand(3, 20, 24, dtype=torch.float64)
    patches = crop_resample(img, [face([4, 3, 12, 11], 24, 20)], (8, 8))
    assert torch.equal(patches.data[0], img[:, 3:11, 4:12])


def test_crop_empty_and_validation():
    img = torch.rand(3, 16, 16)
    out = crop_resample(img, [], (8, 8))
    assert out.data.shape == (0, 3, 8, 8) and len(out) == 0
    with pytest.raises(ValidationError):
        crop_resample(img, [face([0, 0, 8, 8], 32, 32)], (8, 8))
    with pytest.raises(ValidationError):
        PatchBatch(torch.rand(2, 3, 8, 8), [face([0, 0, 8, 8], 16, 16)], (8, 8))


def test_crop_gradient_finite_differences():
    torch.manual_seed(0)
    img = torch.rand(3, 8, 8, dtype=torch.float64).mul(0.6).add(0.2).requires_grad_(True)
    boxes = [face([0.7, 1.3, 6.2, 7.5], 8, 8), face([2, 0, 8, 5.5], 8, 8)]
    assert torch.autograd.gradcheck(lambda x: crop_resample(x, boxes, (5, 6)).data, (img,), eps=1e-6, atol=1e-8, rtol=1e-4)


# -- paste --------------------------------------------------------------------------

def _batch(data, boxes):
    return PatchBatch(data, boxes, tuple(data.shape[-2:]))


def test_zero_residual_is_identity():
    img = torch.rand(3, 24, 24)
    boxes = [face([2.5, 3.1, 15.2, 19.9], 24, 24)]
    cover = crop_resample(img, boxes, (8, 8))
    assert torch.equal(paste_residual(img, cover, cover), img)


def test_constant_residual_raises_aligned_region():
    img = torch.full((3, 16, 16), 0.5, dtype=torch.float64)
    boxes = [face([4, 4, 12, 12], 16, 16)]
    cover = crop_resample(img, boxes, (4, 4))
    stego = _batch(cover.data + 0.125, boxes)
    out = paste_residual(img, stego, cover)
    assert torch.allclose(out[:, 4:12, 4:12], torch.full((3, 8, 8), 0.625, dtype=torch.float64), atol=1e-12)
    out[:, 4:12, 4:12] = 0.5
    assert torch.equal(out, img)


def test_paste_then_crop_round_trip_aligned():
    img = torch.rand(3, 32, 32, dtype=torch.float64) * 0.5 + 0.25
    boxes = [face([0, 0, 16, 16], 32, 32), face([16, 8, 32, 24], 32, 32)]
    cover = crop_resample(img, boxes, (16, 16))
    stego = _batch((cover.data + 0.1 * torch.rand_like(cover.data) - 0.05).clamp(0, 1), boxes)
    again = crop_resample(paste_residual(img, stego, cover), boxes, (16, 16))
    assert (again.data - stego.data).abs().max() <= 1e-6


def test_paste_validation():
    img = torch.rand(3, 16, 16)
    boxes = [face([0, 0, 8, 8], 16, 16)]
    cover = crop_resample(img, boxes, (8, 8))
    with pytest.raises(ValidationError):
        paste_residual(img, _batch(torch.rand(1, 3, 4, 4), boxes), cover)
    with pytest.raises(ValidationError):
        paste_residual(img, _batch(cover.data, [face([1, 1, 9, 9], 16, 16)]), cover)


def test_paste_gradient_finite_differences():
    torch.manual_seed(1)
    img = torch.rand(3, 8, 8, dtype=torch.float64) * 0.5 + 0.25
    boxes = [face([0.6, 1.2, 6.3, 7.7], 8, 8), face([3, 2, 8, 8], 8, 8)]
    cover = crop_resample(img, boxes, (4, 4))
    stego = (cover.data + 0.01 * torch.randn_like(cover.data)).requires_grad_(True)
    image_in = img.clone().requires_grad_(True)

    def f(x, s):
        return paste_residual(x, _batch(s, boxes), _batch(cover.data, boxes))

    assert torch.autograd.gradcheck(f, (image_in, stego), eps=1e-6, atol=1e-8, rtol=1e-4)


def halo_mask(boxes, W, H):
    """Box regions grown by one pixel on every side."""
    grown = []
    for b in boxes:
        x0, y0, x1, y1 = b.p
        grown.append([max(0, x0 - 1), max(0, y0 - 1), min(W, x1 + 1), min(H, y1 + 1)])
    return rasterize_boxes(grown, W, H).astype(bool)


def test_paste_locality_random_box_sets():
    rng = np.random.default_rng(3)
    for _ in range(200):
        W, H = int(rng.integers(16, 48)), int(rng.integers(16, 48))
        img = torch.rand(3, H, W, dtype=torch.float64) * 0.8 + 0.1
        boxes = [face(random_box(rng, W, H, 3.0), W, H) for _ in range(int(rng.integers(1, 4)))]
        cover = crop_resample(img, boxes, (8, 8))
        stego = _batch((cover.data + torch.randn_like(cover.data) * 0.05).clamp(0, 1), boxes)
        out = paste_residual(img, stego, cover)
        changed = (out != img).any(dim=0).numpy()
        assert not (changed & ~halo_mask(boxes, W, H)).any()

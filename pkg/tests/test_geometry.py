import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cfinet.geometry import (
    AreaSubset,
    Box,
    box_iou,
    classify_area,
    clip_boxes,
    decode,
    elementwise_iou,
    encode,
    iou,
    iou_loss,
    subset_indices,
)

coord = st.floats(0, 200, allow_nan=False)
# width ratios stay below the decode clamp (1000 / 16)
size = st.floats(1.0, 60, allow_nan=False)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(size), draw(size)
    return np.array([x, y, x + w, y + h])


def brute_iou(a, b):
    # pixel-free oracle: explicit overlap lengths
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def test_box_tuple():
    b = Box(1, 2, 4, 8)
    assert (b.width, b.height, b.area) == (3, 6, 18)
    assert b.is_valid()
    assert not Box(2, 0, 1, 1).is_valid()
    assert not Box(0, 0, float("nan"), 1).is_valid()


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ([0, 0, 10, 10], [0, 0, 10, 10], 1.0),
        ([0, 0, 1, 1], [5, 5, 6, 6], 0.0),
        ([0, 0, 2, 2], [1, 1, 3, 3], 1 / 7),
    ],
)
def test_iou_fixtures(a, b, expected):
    assert iou(a, b) == pytest.approx(expected, abs=1e-12)


def test_coincident_degenerate_boxes():
    m = box_iou(np.array([[1, 1, 1, 1.0]]), np.array([[1, 1, 1, 1.0], [2, 2, 2, 2.0]]))
    assert m.tolist() == [[1.0, 0.0]]


@given(boxes(), boxes())
def test_iou_matches_oracle_and_is_symmetric(a, b):
    assert iou(a, b) == pytest.approx(brute_iou(a, b), abs=1e-12)
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
    assert 0.0 <= iou(a, b) <= 1.0


@given(boxes(), boxes())
def test_torch_and_numpy_agree(a, b):
    t = box_iou(torch.as_tensor(a[None]), torch.as_tensor(b[None])).item()
    assert t == pytest.approx(iou(a, b), abs=1e-9)


def test_iou_loss_fixtures():
    b = np.array([[0, 0, 2, 2.0]])
    assert iou_loss(b, b)[0] == 0.0
    assert iou_loss(b, np.array([[1, 1, 3, 3.0]]))[0] == pytest.approx(6 / 7, abs=1e-12)
    # iou 0.25 -> 0.75
    assert iou_loss(np.array([[0, 0, 1, 1.0]]), np.array([[0, 0, 2, 2.0]]))[0] == pytest.approx(0.75)


def test_iou_loss_rejects_degenerate_target():
    with pytest.raises(ValueError):
        iou_loss(np.array([[0, 0, 1, 1.0]]), np.array([[0, 0, 0, 1.0]]))


def test_iou_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    pred = torch.tensor([[0.3, 0.2, 2.1, 1.7], [4.0, 4.0, 9.0, 7.5]], dtype=torch.float64, requires_grad=True)
    target = torch.tensor([[0.0, 0.0, 2.0, 2.0], [5.0, 3.0, 8.0, 8.0]], dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda p: iou_loss(p, target), (pred,), eps=1e-6, atol=1e-6)


def test_encode_decode_fixtures():
    b = np.array([3.0, 4.0, 11.0, 20.0])
    np.testing.assert_allclose(encode(b, b), 0.0, atol=1e-15)
    np.testing.assert_allclose(decode(np.zeros(4), b), b)
    # centre (8, 8) vs (4, 4) on an 8-wide anchor: shift 4/8
    np.testing.assert_allclose(encode([4, 4, 12, 12], [0, 0, 8, 8]), [0.5, 0.5, 0.0, 0.0])


@given(boxes(), boxes())
@settings(max_examples=200)
def test_encode_decode_roundtrip(t, a):
    np.testing.assert_allclose(decode(encode(t, a), a), t, atol=1e-9)


def test_encode_rejects_zero_size_anchor():
    with pytest.raises(ValueError):
        encode([0, 0, 1, 1], [0, 0, 0, 1])
    with pytest.raises(ValueError):
        decode(np.zeros(4), [0, 0, 1, 0])


def test_decode_clamps_size_and_clips():
    out = decode(np.array([0, 0, 50.0, 50.0]), np.array([0, 0, 10, 10.0]))
    assert np.all(np.isfinite(out))
    clipped = decode(np.array([0, 0, 1.0, 1.0]), np.array([0, 0, 10, 10.0]), image_size=(12, 12))
    assert clipped.min() >= 0 and clipped.max() <= 12


def test_clip_boxes_torch():
    out = clip_boxes(torch.tensor([[-3.0, -1.0, 50.0, 5.0]]), (20, 10))
    assert out.tolist() == [[0.0, 0.0, 20.0, 5.0]]


@pytest.mark.parametrize(
    "box, subset",
    [
        ([0, 0, 12, 12], AreaSubset.eS),
        ([0, 0, 20, 20], AreaSubset.rS),
        ([0, 0, 401, 1], AreaSubset.gS),
        ([0, 0, 32, 32], AreaSubset.gS),
        ([0, 0, 1025, 1], AreaSubset.Normal),
    ],
)
def test_classify_area_boundaries(box, subset):
    assert classify_area(box) is subset


def test_classify_area_rejects_zero_area():
    with pytest.raises(ValueError):
        classify_area([0, 0, 0, 5])


def test_subset_indices_vectorised():
    b = np.array([[0, 0, 12, 12], [0, 0, 20, 20], [0, 0, 401, 1], [0, 0, 40, 40]], float)
    assert subset_indices(b).tolist() == [0, 1, 2, 3]
    assert [AreaSubset(s).index for s in ("eS", "rS", "gS", "Normal")] == [0, 1, 2, 3]


def test_elementwise_iou_rowwise():
    a = np.array([[0, 0, 2, 2], [0, 0, 1, 1.0]])
    b = np.array([[1, 1, 3, 3], [0, 0, 1, 1.0]])
    np.testing.assert_allclose(elementwise_iou(a, b), [1 / 7, 1.0])
    assert math.isclose(float(elementwise_iou(a, b)[0]), brute_iou(a[0], b[0]))

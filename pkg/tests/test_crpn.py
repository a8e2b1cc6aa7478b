import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cfinet.anchors import build_grid
from cfinet.crpn import (
    CoarseToFineRPN,
    StandardRPN,
    RPNOutput,
    adaptive_conv,
    align_features,
    bilinear_sample,
    combine_crpn_loss,
    crpn_loss,
    emit_proposals,
    native_boxes,
    sampling_points,
)
from cfinet.geometry import box_iou, clip_boxes, decode


def features_for(grid, channels=8, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(1, channels, h, w, generator=g, dtype=dtype) for h, w in grid.feature_sizes]


def test_bilinear_sample_integer_points_are_exact():
    f = torch.arange(2 * 3 * 4, dtype=torch.float64).reshape(1, 2, 3, 4)
    pts = torch.tensor([[[0.0, 0.0], [3.0, 2.0], [1.0, 1.0]]], dtype=torch.float64)
    out = bilinear_sample(f, pts)
    expected = torch.stack([f[0, :, 0, 0], f[0, :, 2, 3], f[0, :, 1, 1]], dim=1)
    torch.testing.assert_close(out[0], expected)


def test_native_box_reduces_to_plain_conv():
    grid = build_grid(32, 24).select_levels(["P3"])
    lv = grid.levels[0]
    torch.manual_seed(0)
    feat = torch.randn(1, 5, lv.feat_h, lv.feat_w, dtype=torch.float64)
    weight = torch.randn(7, 5, 3, 3, dtype=torch.float64)
    bias = torch.randn(7, dtype=torch.float64)
    boxes = torch.as_tensor(native_boxes(grid))[None]
    out = adaptive_conv(feat, boxes, lv.stride, weight, bias)
    torch.testing.assert_close(out, F.conv2d(feat, weight, bias, padding=1))


def test_taps_follow_a_one_stride_shift():
    stride = 8.0
    box = torch.tensor([[10.0, 12.0, 30.0, 44.0]])
    shifted = box + torch.tensor([stride, 0.0, stride, 0.0])
    d = sampling_points(shifted, stride) - sampling_points(box, stride)
    torch.testing.assert_close(d[..., 0], torch.ones(1, 9))
    torch.testing.assert_close(d[..., 1], torch.zeros(1, 9))


def test_zero_head_returns_anchors():
    grid = build_grid(64, 48)
    rpn = CoarseToFineRPN(8, 8).zero_()
    out = rpn(features_for(grid), grid)
    assert out.deltas1.shape == (1, len(grid), 4)
    assert out.logits.shape == (1, len(grid))
    assert torch.all(out.deltas1 == 0) and torch.all(out.deltas2 == 0)
    np.testing.assert_array_equal(out.refined[0].numpy(), grid.anchors)
    props = rpn.proposals(out, grid, (64, 48), cap=len(grid), nms_thr=None)[0]
    np.testing.assert_allclose(props.boxes.numpy(), clip_boxes(grid.anchors, (64, 48)), rtol=0, atol=1e-5)
    assert torch.all(props.scores == 0.5)


def test_output_channels_per_level():
    grid = build_grid(40, 40)
    out = CoarseToFineRPN(8, 8)(features_for(grid), grid)
    cells = sum(h * w for h, w in grid.feature_sizes)
    assert out.deltas1.numel() == 4 * cells and out.deltas2.numel() == 4 * cells
    assert out.logits.numel() == cells


def test_level_mismatch_is_rejected():
    grid = build_grid(32, 32)
    with pytest.raises(ValueError):
        CoarseToFineRPN(8, 8)(features_for(grid)[:3], grid)


def test_loss_combination_fixture():
    assert combine_crpn_loss(0.5, 0.5, 0.2) == 9.18


def test_perfect_predictions_leave_only_classification():
    boxes = torch.tensor([[0.0, 0.0, 4.0, 4.0], [2.0, 2.0, 9.0, 7.0]])
    logits = torch.tensor([3.0, -2.0])
    labels = torch.tensor([1.0, 0.0])
    out = crpn_loss(boxes, boxes, boxes, boxes, logits, labels)
    assert out["reg_coarse"] == 0 and out["reg_fine"] == 0
    assert out["loss"] == pytest.approx(0.9 * float(F.binary_cross_entropy_with_logits(logits, labels)))


def test_empty_image_loss_is_classification_only():
    grid = build_grid(32, 32)
    rpn = CoarseToFineRPN(8, 8)
    out = rpn(features_for(grid), grid)
    losses = rpn.loss(out, grid, [np.zeros((0, 4))], None, np.random.default_rng(0))
    assert losses["reg_coarse"] == 0 and losses["reg_fine"] == 0
    assert float(losses["loss"].detach()) == pytest.approx(0.9 * float(losses["cls"].detach()))


def test_stage2_positive_threshold():
    from cfinet.anchors import assign_fixed

    gt = np.array([[0.0, 0.0, 20.0, 20.0]])
    refined = []
    for v in (0.70, 0.66, 0.64, 0.2):
        o = 2 * 20 * v / (1 + v)
        refined.append([20 - o, 0.0, 40 - o, 20.0])
    a = assign_fixed(np.array(refined), gt, 0.65, 0.3)
    assert a.positive_mask.tolist() == [True, True, False, False]
    assert a.negative_mask.tolist() == [False, False, False, True]


def test_emit_cap_and_nms():
    torch.manual_seed(0)
    xy = torch.rand(2000, 2) * 400
    boxes = torch.cat([xy, xy + 8 + torch.rand(2000, 2) * 40], dim=1)
    scores = torch.rand(2000)
    out = emit_proposals(boxes, scores, np.zeros(2000, dtype=np.int64), (500, 500), cap=300)
    assert len(out) <= 300
    assert torch.all(out.scores[:-1] >= out.scores[1:])
    dup = torch.tensor([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]])
    out = emit_proposals(dup, torch.tensor([0.8, 0.9]), np.zeros(2, dtype=np.int64), (20, 20), cap=10)
    assert len(out) == 1 and float(out.scores[0]) == pytest.approx(0.9)


def test_emit_with_nothing_above_floor():
    boxes = torch.tensor([[0.0, 0.0, 10.0, 10.0]])
    out = emit_proposals(boxes, torch.tensor([0.1]), np.zeros(1, dtype=np.int64), (20, 20), cap=10, score_floor=0.5)
    assert len(out) == 0 and out.boxes.shape == (0, 4)


def test_two_anchor_gradient_check():
    # P2 only on an 8x4 image: two anchors of side 8
    grid = build_grid(8, 4, anchor_scale=2).select_levels(["P2"])
    assert len(grid) == 2
    torch.manual_seed(0)
    rpn = CoarseToFineRPN(3, 4).double()
    feats = [torch.randn(1, 3, 1, 2, dtype=torch.float64, requires_grad=True)]
    gts = [np.array([[0.0, 0.0, 7.0, 4.0]])]

    # stage-2 taps sit on detached boxes, so finite differences hold them fixed
    refined = rpn(feats, grid).refined

    def loss_fn():
        deltas1 = rpn.coarse_regress(feats, grid)
        aligned = align_features(feats, refined, grid, rpn.adapt_weight, rpn.adapt_bias)
        deltas2, logits = rpn.fine_stage(aligned)
        out = RPNOutput(deltas1, refined, deltas2, logits)
        return rpn.loss(out, grid, gts, None, np.random.default_rng(0))["loss"]

    loss = loss_fn()
    params = [feats[0]] + list(rpn.parameters())
    grads = torch.autograd.grad(loss, params)
    eps = 1e-6
    worst = 0.0
    for p, g in zip(params, grads):
        flat, gflat = p.data.view(-1), g.reshape(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // 12)):
            old = flat[i].item()
            flat[i] = old + eps
            up = loss_fn().item()
            flat[i] = old - eps
            down = loss_fn().item()
            flat[i] = old
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(fd - gflat[i].item()) / max(1.0, abs(fd)))
    assert worst < 1e-3


def test_refinement_overfits_one_image():
    grid = build_grid(64, 64)
    torch.manual_seed(0)
    feats = [torch.randn(1, 8, h, w) for h, w in grid.feature_sizes]
    gts = np.array([[10.0, 12.0, 18.0, 19.0], [30.0, 30.0, 50.0, 44.0], [5.0, 40.0, 11.0, 52.0]])
    rpn = CoarseToFineRPN(8, 8)
    opt = torch.optim.SGD(rpn.parameters(), lr=0.002, momentum=0.9)
    from cfinet.anchors import mine_anchors

    a = mine_anchors(grid, gts)
    pos = a.positive_mask

    def mean_iou(boxes):
        iou = box_iou(boxes[pos], gts)
        return float(iou[np.arange(pos.sum()), a.labels[pos]].mean())

    before = mean_iou(grid.anchors)
    rng = np.random.default_rng(0)
    for _ in range(200):
        out = rpn(feats, grid)
        loss = rpn.loss(out, grid, [gts], None, rng)["loss"]
        opt.zero_grad()
        loss.backward()
        opt.step()
    after = mean_iou(rpn(feats, grid).refined[0].numpy().astype(float))
    assert after > before + 0.2


def test_standard_rpn_reports_same_components():
    grid = build_grid(48, 48, anchor_scale=8)
    rpn = StandardRPN(8, 8)
    out = rpn(features_for(grid), grid)
    losses = rpn.loss(out, grid, [np.array([[4.0, 4.0, 30.0, 28.0]])], None, np.random.default_rng(0))
    assert set(losses) == {"loss", "reg_coarse", "reg_fine", "cls"}
    assert float(losses["reg_coarse"]) == 0.0
    props = rpn.proposals(out, grid, (48, 48), cap=20)[0]
    assert len(props) <= 20


def test_decoded_proposals_match_stage_outputs():
    grid = build_grid(32, 32)
    rpn = CoarseToFineRPN(8, 8)
    out = rpn(features_for(grid), grid)
    torch.testing.assert_close(out.refined, decode(out.deltas1, torch.as_tensor(grid.anchors, dtype=torch.float32)))

import numpy as np
import pytest
import torch

from cfinet.config import DetectorConfig
from cfinet.data import SyntheticSpec, generate
from cfinet.detector import Detector, Target, extract_rois, gradient_coverage, roi_levels, total_loss
from cfinet.training import collate

COMPONENTS = ("crpn", "cls", "reg", "fi")


@pytest.fixture(scope="module")
def batch():
    recs = list(generate(SyntheticSpec(num_images=2, image_size=(96, 96), seed=3)))
    return collate(recs)


def small_cfg(**kw):
    base = dict(roi_num_samples=32, train_proposals=200, test_proposals=100, roi_sampling_ratio=1)
    base.update(kw)
    return DetectorConfig(**base)


def test_total_loss_fixture():
    assert total_loss(2.0, 0.5, 0.4, 0.6, 0.5) == pytest.approx(3.2, abs=1e-12)


def test_total_is_sum_of_components(batch):
    torch.manual_seed(0)
    model = Detector(small_cfg())
    model.exemplars = model.new_exemplar_set()
    images, targets = batch
    losses = model.forward_train(images, targets, np.random.default_rng(0))
    expect = sum(losses[k] for k in ("crpn", "cls", "reg")) + 0.5 * losses["fi"]
    assert float(losses["total"].detach()) == pytest.approx(float(expect.detach()), rel=1e-6)
    for k, v in losses.items():
        assert torch.isfinite(v) and float(v.detach()) >= 0, k


def test_alpha3_zero_drops_imitation(batch):
    torch.manual_seed(0)
    model = Detector(small_cfg(alpha3=0.0))
    model.exemplars = model.new_exemplar_set()
    images, targets = batch
    losses = model.forward_train(images, targets, np.random.default_rng(0))
    base = losses["crpn"] + losses["cls"] + losses["reg"]
    assert float(losses["total"].detach()) == float(base.detach())


def test_empty_annotations(batch):
    torch.manual_seed(0)
    model = Detector(small_cfg())
    model.exemplars = model.new_exemplar_set()
    images, _ = batch
    empty = [Target(np.zeros((0, 4)), np.zeros(0, np.int64), np.zeros((0, 4))) for _ in range(2)]
    losses = model.forward_train(images, empty, np.random.default_rng(0))
    assert float(losses["reg"].detach()) == 0 and float(losses["fi"].detach()) == 0
    assert float(losses["cls"].detach()) > 0


def test_gradient_reaches_every_parameter(batch):
    torch.manual_seed(0)
    model = Detector(small_cfg(use_fi=False))
    model.exemplars = model.new_exemplar_set()
    images, targets = batch
    model.forward_train(images, targets, np.random.default_rng(0))["total"].backward()
    assert gradient_coverage(model) == []


def test_inference_never_runs_imitation(batch):
    torch.manual_seed(0)
    model = Detector(small_cfg(score_thr=0.0))
    model.eval()
    images, _ = batch
    dets = model.forward_infer(images)
    assert model.fi_calls == 0
    assert len(dets) == 2
    for d in dets:
        assert len(d.scores) <= 100
        assert np.all(np.diff(d.scores) <= 0)


def test_zero_head_inference_is_uniform(batch):
    model = Detector(small_cfg())
    with torch.no_grad():
        for p in model.head.parameters():
            p.zero_()
    model.eval()
    dets = model.forward_infer(batch[0])
    for d in dets:
        assert len(d.scores) == 0 or np.allclose(d.scores, d.scores[0])


def test_training_increments_imitation_counter(batch):
    model = Detector(small_cfg())
    model.exemplars = model.new_exemplar_set()
    images, targets = batch
    model.forward_train(images, targets, np.random.default_rng(0))
    assert model.fi_calls == 1


def test_roi_level_routing():
    boxes = torch.tensor([[0.0, 0.0, 20.0, 20.0], [0.0, 0.0, 150.0, 150.0], [0.0, 0.0, 300.0, 300.0], [0.0, 0.0, 500.0, 500.0]])
    assert roi_levels(boxes).tolist() == [0, 1, 2, 3]


def test_extract_rois_shape():
    feats = [torch.randn(2, 4, 32 // s, 32 // s) for s in (1, 2, 4, 8)]
    rois = torch.tensor([[0, 0.0, 0.0, 10.0, 10.0], [1, 2.0, 2.0, 30.0, 30.0]])
    assert extract_rois(feats, rois).shape == (2, 4, 7, 7)
    assert extract_rois(feats, rois[:0]).shape == (0, 4, 7, 7)

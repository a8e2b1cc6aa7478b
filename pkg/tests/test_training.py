import json

import numpy as np
import pytest
import torch

from cfinet.config import DetectorConfig
from cfinet.data import SyntheticSpec, generate
from cfinet.training import (
    NonFiniteLoss,
    collate,
    load_checkpoint,
    lr_at,
    predict,
    save_checkpoint,
    train,
)


def tiny_cfg(**kw):
    base = dict(epochs=1, max_iters=2, batch_size=2, roi_num_samples=16, train_proposals=100, test_proposals=50, roi_sampling_ratio=1)
    base.update(kw)
    return DetectorConfig(**base)


@pytest.fixture(scope="module")
def records():
    return list(generate(SyntheticSpec(num_images=4, image_size=(64, 64), seed=1)))


def test_lr_schedule():
    cfg = DetectorConfig(warmup_iters=0)
    assert lr_at(cfg, 0, 0) == pytest.approx(0.01)
    assert lr_at(cfg, 10_000, 7) == pytest.approx(0.01)
    assert lr_at(cfg, 10_000, 8) == pytest.approx(0.001)
    assert lr_at(cfg, 10_000, 11) == pytest.approx(0.0001)


def test_warmup_ramps_to_base_rate():
    cfg = DetectorConfig(warmup_iters=100)
    rates = [lr_at(cfg, i, 0) for i in (0, 50, 100)]
    assert rates[0] < rates[1] < rates[2] == pytest.approx(0.01)


def test_collate_pads_and_flips(records):
    images, targets = collate(records[:2], flips=[True, False])
    assert images.shape[-1] % 32 == 0 and images.shape[-2] % 32 == 0
    r = records[0]
    flipped = targets[0].boxes
    np.testing.assert_allclose(flipped[:, 0], r.width - r.boxes[:, 2])
    np.testing.assert_allclose(targets[1].boxes, records[1].boxes)


def test_same_seed_same_loss_curve(records, tmp_path):
    a = train(tiny_cfg(), records, log_path=tmp_path / "a.jsonl")
    b = train(tiny_cfg(), records, log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    assert a.iterations == 2 and len(a.history) == 2
    row = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert {"total", "crpn", "cls", "reg", "fi", "lr"} <= set(row)


def test_epoch_callback_can_stop(records):
    seen = []

    def cb(model, epoch):
        seen.append(epoch)
        return {"stop": True}

    res = train(tiny_cfg(epochs=5, max_iters=None), records, epoch_callback=cb)
    assert seen == [0] and len(res.evals) == 1


def test_nan_aborts_with_batch_ids(records, monkeypatch):
    from cfinet.detector import Detector

    orig = Detector.forward_train

    def poisoned(self, images, targets, rng):
        out = orig(self, images, targets, rng)
        out["cls"] = out["cls"] * float("nan")
        return out

    monkeypatch.setattr(Detector, "forward_train", poisoned)
    with pytest.raises(NonFiniteLoss, match="images"):
        train(tiny_cfg(), records)


def test_checkpoint_round_trip(records, tmp_path):
    res = train(tiny_cfg(), records)
    path = tmp_path / "ck.pt"
    save_checkpoint(path, res.model, 1)
    model, epoch = load_checkpoint(path)
    assert epoch == 1
    for (k, v), (k2, v2) in zip(res.model.state_dict().items(), model.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    a = predict(res.model, records[:2])
    b = predict(model, records[:2])
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.scores, y.scores)


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.pt"
    torch.save({"format": "other"}, path)
    with pytest.raises(ValueError):
        load_checkpoint(path)
    torch.save({"format": "cfinet-checkpoint", "version": 99}, path)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)

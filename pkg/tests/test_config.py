import pytest

from cfinet.config import ABLATIONS, DetectorConfig, RunConfig, apply_overrides, load_run_config


def test_defaults():
    cfg = DetectorConfig()
    assert (cfg.alpha1, cfg.alpha2, cfg.alpha3) == (9.0, 0.9, 0.5)
    assert cfg.tau == 0.6 and cfg.t_hq == 0.65 and cfg.betas == (0.5, 0.1, 0.05)
    assert cfg.lr == 0.01 and cfg.batch_size == 4 and cfg.lr_steps == (8, 11) and cfg.epochs == 12
    assert cfg.test_proposals == 300 and cfg.max_dets == 100


def test_dict_round_trip():
    cfg = DetectorConfig(lr_steps=[3], betas=[1, 2, 3])
    assert cfg.lr_steps == (3,)
    assert DetectorConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "kw", [dict(rpn="yolo"), dict(tau=0), dict(t_lq=0.7), dict(betas=(1, 2)), dict(alpha1=-1), dict(epochs=0)]
)
def test_validation(kw):
    with pytest.raises(ValueError):
        DetectorConfig(**kw)


def test_unknown_keys_rejected():
    with pytest.raises(ValueError, match="unknown"):
        DetectorConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"model": {}})
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"data": {"pixels": 3}})


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("detector:\n  lr: 0.02\n  epochs: 3\ndata:\n  num_images: 7\n")
    run = load_run_config(path, ["detector.epochs=5", "data.seed=9"])
    assert run.detector.lr == 0.02
    assert run.detector.epochs == 5
    assert run.data.num_images == 7 and run.data.seed == 9
    # untouched keys keep their defaults
    assert run.detector.alpha1 == 9.0


def test_snapshot_reloads_identically(tmp_path):
    run = load_run_config(None, ["detector.lr_steps=[2, 4]", "val_images=3"])
    run.dump(tmp_path / "c.yaml")
    again = load_run_config(tmp_path / "c.yaml")
    assert again.to_dict() == run.to_dict()


def test_bad_override():
    with pytest.raises(ValueError):
        apply_overrides({}, ["no_equals_sign"])
    with pytest.raises(ValueError):
        apply_overrides({"a": 1}, ["a.b=2"])


def test_ablation_table_shape():
    assert list(ABLATIONS) == ["baseline", "+CRPN", "+FI", "+CRPN+FI"]
    for kw in ABLATIONS.values():
        DetectorConfig(**kw)

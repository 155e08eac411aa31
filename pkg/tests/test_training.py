import json
import math

import numpy as np
import pytest

from roadbev import training
from roadbev.config import resolve
from roadbev.errors import ConfigError, DataError

MICRO = {
    "seed": 7,
    "grid": {"x_min": -0.48, "y_min": 2.1, "resolution": 0.12, "nx": 8, "ny": 8},
    "voxel": {"z_res": 10.0},
    "camera": {"fx": 60, "fy": 60, "cx": 32, "cy": 24, "width": 64, "height": 48,
               "baseline": 0.3},
    "pose": {"pitch": -0.4},
    "model": {"kind": "mono", "channels": 8, "stage_widths": [4, 8], "head_width": 8,
              "head_depth": 1, "agg_width": 4, "n_agg_convs": 2, "n_hourglass": 1,
              "n_classes": 16},
    "optimizer": {"batch_size": 2, "epochs": 2, "eval_every": 1},
    "dataset": {"n_scenes": 2, "eval_scenes": 1, "scene_kinds": ["speed_bump"]},
}


def micro_config(**model_overrides):
    doc = json.loads(json.dumps(MICRO))
    doc["model"].update(model_overrides)
    return resolve(doc)


def test_config_defaults_and_kind_specific_lr():
    cfg = resolve({})
    assert cfg.grid.ny == 164 and cfg.bins.n_classes == 80
    assert cfg.lr == pytest.approx(8e-4)
    assert cfg.epochs == 50
    stereo = resolve({"model": {"kind": "stereo"}})
    assert stereo.lr == pytest.approx(5e-4)
    assert stereo.epochs == 40
    assert stereo.model.resolved_stride == 2


def test_config_rejects_unknown_keys_with_qualified_path():
    with pytest.raises(ConfigError, match="model.bogus: unknown key"):
        resolve({"model": {"bogus": 1}})
    with pytest.raises(ConfigError, match="outputs: unknown key"):
        resolve({"outputs": {}})


def test_config_field_validation_messages():
    with pytest.raises(ConfigError, match="optimizer.lr"):
        resolve({"optimizer": {"lr": -1.0}})
    with pytest.raises(ConfigError, match="dataset.path"):
        resolve({"dataset": {"kind": "disk"}})


def test_toy_profile_shapes():
    cfg = resolve({}, toy=True)
    assert (cfg.grid.ny, cfg.grid.nx) == (64, 32)
    assert cfg.bins.n_classes == 32
    assert cfg.model.stage_widths == (8, 16)
    assert cfg.epochs == 30
    vox_nz = int(round((cfg.voxel_z_max - cfg.voxel_z_min) / cfg.voxel_z_res))
    assert vox_nz == 16


def test_training_writes_artifacts_and_logs(tmp_path):
    cfg = micro_config()
    result = training.train(cfg, out_dir=tmp_path / "run")
    n_steps = cfg.epochs * math.ceil(cfg.n_scenes / cfg.batch_size)
    assert len(result.log_rows) == n_steps
    assert result.train_metrics.n_valid > 0
    assert result.eval_metrics is not None
    out = tmp_path / "run"
    for name in ("checkpoint.rbck", "train_log.csv", "eval_log.csv", "timing.csv",
                 "resolved_config.json", "final_metrics.json"):
        assert (out / name).exists(), name
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["code_version"]
    assert resolved["optimizer"]["lr"] == pytest.approx(8e-4)


def test_training_is_deterministic(tmp_path):
    cfg = micro_config()
    a = training.train(cfg, out_dir=tmp_path / "a")
    b = training.train(cfg, out_dir=tmp_path / "b")
    assert a.log_rows == b.log_rows
    assert (tmp_path / "a/checkpoint.rbck").read_bytes() == (
        tmp_path / "b/checkpoint.rbck").read_bytes()
    assert (tmp_path / "a/train_log.csv").read_bytes() == (
        tmp_path / "b/train_log.csv").read_bytes()


def test_restore_model_reproduces_predictions(tmp_path):
    cfg = micro_config()
    result = training.train(cfg, out_dir=tmp_path / "run")
    model, tables = training.build_model(cfg)
    restored, rtables, meta = training.restore_model(cfg, result.checkpoint_path)
    assert meta["model_kind"] == "mono"
    _train, evals = training.build_datasets(cfg)
    pred = training.predict_sample(restored, evals[0], rtables)
    rep = training.evaluate(restored, evals, rtables)
    assert rep.abs_err == pytest.approx(result.eval_metrics.abs_err, abs=1e-9)
    assert pred.values.shape == cfg.grid.shape


def test_stereo_requires_right_image():
    cfg = micro_config(kind="stereo")
    model, tables = training.build_model(cfg)
    train_samples, _ = training.build_datasets(cfg)
    sample = train_samples[0]
    sample.right = None
    with pytest.raises(DataError, match="right image"):
        training.forward_loss(model, sample, tables)


def test_sample_dir_loading(tmp_path):
    cfg = micro_config()
    sdir = tmp_path / "sample0"
    sdir.mkdir()
    from PIL import Image

    rng = np.random.default_rng(0)
    Image.fromarray((rng.random((48, 64)) * 255).astype(np.uint8), mode="L").save(
        sdir / "left.png")
    (sdir / "cloud.txt").write_text("0.0 2.25 0.01\n0.01 2.26 0.03\n-0.3 2.9 0.0\n")
    (sdir / "pose.json").write_text('{"roll": 0.0, "pitch": 0.0}')
    sample = training.load_sample_dir(sdir, cfg)
    assert sample.gt.mask.sum() >= 2
    assert sample.descriptor["pose"]["camera_height"] == 1.10
    assert sample.right is None

    stereo_cfg = micro_config(kind="stereo")
    with pytest.raises(DataError, match="right.png"):
        training.load_sample_dir(sdir, stereo_cfg)

    (sdir / "pose.json").write_text('{"roll": 0.0}')
    with pytest.raises(DataError, match="pitch"):
        training.load_sample_dir(sdir, cfg)


def test_pcd_ascii_loading(tmp_path):
    pcd = tmp_path / "cloud.pcd"
    pcd.write_text(
        "# .PCD v0.7 - Point Cloud Data file format\n"
        "VERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\n"
        "WIDTH 2\nHEIGHT 1\nPOINTS 2\nDATA ascii\n"
        "0.1 2.5 0.02\n-0.2 3.0 -0.01\n")
    pts = training.load_point_cloud_pcd(pcd)
    assert np.allclose(pts.xyz, [[0.1, 2.5, 0.02], [-0.2, 3.0, -0.01]])
    bad = tmp_path / "bad.pcd"
    bad.write_text("VERSION 0.7\nDATA binary\n\x00\x01")
    with pytest.raises(DataError, match="ascii"):
        training.load_point_cloud_pcd(bad)


def test_disk_dataset_round_trip(tmp_path):
    cfg_doc = json.loads(json.dumps(MICRO))
    root = tmp_path / "data"
    root.mkdir()
    from PIL import Image

    rng = np.random.default_rng(1)
    for i in range(3):
        sdir = root / f"sample{i}"
        sdir.mkdir()
        Image.fromarray((rng.random((48, 64)) * 255).astype(np.uint8), mode="L").save(
            sdir / "left.png")
        (sdir / "cloud.txt").write_text("0.0 2.25 0.01\n-0.3 2.9 0.0\n")
        (sdir / "pose.json").write_text('{"roll": 0.0, "pitch": -0.4}')
    cfg_doc["dataset"] = {"kind": "disk", "path": str(root), "eval_scenes": 1}
    cfg = resolve(cfg_doc)
    train_samples, eval_samples = training.build_datasets(cfg)
    assert len(train_samples) == 2 and len(eval_samples) == 1

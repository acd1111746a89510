import json
import math

import numpy as np
import pytest

import fusion3d

SMALL = {
    "num_queries": 16, "feature_dim": 16, "image_dim": 8, "heads": 2, "acmt_layers": 1,
    "grm_scales": [3, 5], "context_points": 48, "edge_dim": 8, "ffn_dim": 32, "point_hidden": 16,
    "image_hidden": 8, "sampling_points": 2, "idw_k": 4, "max_group": 16, "num_points": 512,
    "epochs": 2, "batch_size": 2, "lr": 0.002,
}


def test_geometry():
    cube = (0, 0, 0, 1, 1, 1, 0)
    assert fusion3d.rotated_iou3d(cube, cube) == pytest.approx(1.0)
    assert fusion3d.rotated_iou3d(cube, (0.5, 0, 0, 1, 1, 1, 0)) == pytest.approx(1 / 3, abs=1e-9)
    box = (0.3, -0.2, 1.0, 2.0, 1.0, 0.5, 0.7)
    p = (0.5, 0.1, 1.1)
    d = fusion3d.encode_deltas(box, p)
    c = fusion3d.apply_center_update(p, d, box[6])
    assert max(abs(a - b) for a, b in zip(c, box[:3])) < 1e-12
    assert fusion3d.centerness_target(fusion3d.encode_deltas(box, box[:3])) == 1.0


def test_scene_generation_is_deterministic(tmp_path):
    a = fusion3d.generate_scene(7, num_points=256)
    b = fusion3d.generate_scene(7, num_points=256)
    assert a["points"].shape == (256, 6)
    assert np.array_equal(a["points"], b["points"])
    assert 3 <= len(a["boxes"]) <= 6


def test_metrics():
    assert fusion3d.average_precision([True, False], 1) == 1.0
    assert fusion3d.average_precision([False, True], 1) == 0.5
    gt = {"a": [[0, 0, 0, 1, 1, 1, 0, 0]]}
    r = fusion3d.map_at_iou([("a", [0, 0, 0, 1, 1, 1, 0, 0], 0.9)], gt, 1)
    assert r["map25"] == 1.0 and r["map50"] == 1.0


def test_config_errors():
    cfg = json.loads(fusion3d.default_config())
    assert cfg["lr"] == 1e-4 and cfg["grm_scales"] == [5, 10, 20]
    with pytest.raises(ValueError, match="bogus"):
        fusion3d.validate_config('{"bogus": 1}')
    with pytest.raises(fusion3d.ConfigError):
        fusion3d.validate_config('{"stages": "x"}')


def test_train_and_evaluate(tmp_path):
    data = tmp_path / "data"
    ids = fusion3d.synthesize(str(data), 6, json.dumps(SMALL))
    assert len(ids) == 6
    losses = fusion3d.train(str(data), str(tmp_path / "m.ckpt"), json.dumps(SMALL))
    assert len(losses) == 6 and all(math.isfinite(x) for x in losses)
    report = json.loads(fusion3d.evaluate(str(tmp_path / "m.ckpt"), str(data), "train", "point-only"))
    assert report["ablation"] == "point-only"
    assert [t["iou"] for t in report["thresholds"]] == [0.25, 0.5]
    with pytest.raises(ValueError):
        fusion3d.read_scene(str(tmp_path / "missing"))


def test_gradcheck_kernels():
    err, worst, groups = fusion3d.gradcheck("kernels", 1)
    assert err < 1e-4 and groups > 0

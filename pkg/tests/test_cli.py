import json

import numpy as np
import pytest

from omnipose import cli, io

TOY = {
    "backbone": {"stem_channels": 4, "branches": [[4, 4], [6, 8]]},
    "wasp": {"dilations": [1, 2], "branch_channels": 4, "llf_channels": 3, "num_joints": 2},
    "input_size": [32, 32],
}


@pytest.fixture
def toy(tmp_path):
    cfg = tmp_path / "toy.json"
    cfg.write_text(json.dumps(TOY))
    img = tmp_path / "img.omt"
    io.write_tensor(img, np.random.default_rng(0).normal(size=(3, 32, 32)))
    return cfg, img


def _gt(tmp_path, anns, k=2, name="gt.json"):
    doc = {"categories": [{"keypoints": ["left_knee", "right_knee"][:k], "k_i": [0.1] * k}],
           "images": [{"id": 1, "width": 64, "height": 48}], "annotations": anns}
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def _ann(i, kps, **kw):
    return dict({"image_id": 1, "id": i, "keypoints": kps, "area": 900.0, "head_size": 10.0}, **kw)


class TestInfer:
    def test_zero_weights(self, toy, tmp_path):
        cfg, img = toy
        assert cli.main(["infer", str(img), "--config", str(cfg), "--zero-weights", "--out", str(tmp_path / "o")]) == 0
        hm = io.read_tensor(tmp_path / "o" / "img.heatmaps.omt")
        assert hm.shape == (1, 2, 8, 8) and not hm.any()
        kf = io.read_keypoints(tmp_path / "o" / "img.keypoints.json", "pred")
        assert kf.annotations[0].score == 0.0

    def test_deterministic(self, toy, tmp_path):
        cfg, img = toy
        for d in ("a", "b"):
            assert cli.main(["infer", str(img), "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / d)]) == 0
        for f in ("img.heatmaps.omt", "img.keypoints.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_directory_input_and_weights(self, toy, tmp_path):
        cfg, img = toy
        src = tmp_path / "imgs"
        src.mkdir()
        for i in range(2):
            io.write_tensor(src / f"x{i}.omt", np.ones((2, 3, 32, 32)) * i)
        assert cli.main(["init-weights", "--config", str(cfg), "--out", str(tmp_path / "w")]) == 0
        assert cli.main(["infer", str(src), "--config", str(cfg), "--weights", str(tmp_path / "w"),
                         "--out", str(tmp_path / "o")]) == 0
        assert io.read_tensor(tmp_path / "o" / "x1.heatmaps.omt").shape == (2, 2, 8, 8)

    def test_bad_image_shape(self, toy, tmp_path):
        cfg, _ = toy
        io.write_tensor(tmp_path / "bad.omt", np.zeros((3, 16, 16)))
        assert cli.main(["infer", str(tmp_path / "bad.omt"), "--config", str(cfg), "--out", str(tmp_path)]) == 1


class TestCodecCommands:
    def test_encode_decode_round_trip(self, tmp_path):
        gt = _gt(tmp_path, [_ann(7, [20.5, 14.0, 2, 40.0, 30.25, 2]), _ann(8, [10.0, 10.0, 0, 33.0, 20.0, 1])])
        assert cli.main(["encode", str(gt), "--stride", "4", "--out", str(tmp_path / "enc")]) == 0
        manifest = json.loads((tmp_path / "enc" / "manifest.json").read_text())
        assert manifest["sigma"] == 3.0 and manifest["entries"][1]["mask"] == [False, True]
        assert io.read_tensor(tmp_path / "enc" / "ann_7.omt").shape == (2, 12, 16)
        out = tmp_path / "pred.json"
        assert cli.main(["decode", str(tmp_path / "enc"), "--stride", "4", "--out", str(out)]) == 0
        pred = io.read_keypoints(out, "pred")
        x, y = pred.annotations[0].coords()[0]
        assert abs(x - 20.5) < 0.4 and abs(y - 14.0) < 0.4
        assert pred.annotations[1].visibility().tolist() == [0, 2]

    def test_encode_empty(self, tmp_path):
        gt = _gt(tmp_path, [])
        assert cli.main(["encode", str(gt), "--stride", "4", "--out", str(tmp_path / "enc")]) == 0
        assert json.loads((tmp_path / "enc" / "manifest.json").read_text())["entries"] == []

    def test_encode_requires_stride(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.main(["encode", str(_gt(tmp_path, [])), "--out", str(tmp_path)])


class TestEval:
    def test_prediction_equals_truth(self, tmp_path, capsys):
        anns = [_ann(1, [5.0, 5.0, 2, 9.0, 9.0, 2]), _ann(2, [30.0, 30.0, 2, 35.0, 31.0, 2])]
        gt = _gt(tmp_path, anns)
        pred = _gt(tmp_path, [dict(a, score=0.9) for a in anns], name="pred.json")
        for metric in ("pckh", "oks-ap"):
            out = tmp_path / f"{metric}.json"
            assert cli.main(["eval", str(pred), str(gt), "--metric", metric, "--out", str(out)]) == 0
            rep = json.loads(out.read_text())
            assert (rep["pckh_mean"] if metric == "pckh" else rep["ap"]) == 1.0

    def test_pckh_missing_head_size(self, tmp_path, capsys):
        a = _ann(42, [5.0, 5.0, 2, 9.0, 9.0, 2])
        del a["head_size"]
        gt = _gt(tmp_path, [a])
        pred = _gt(tmp_path, [dict(a, score=1.0)], name="pred.json")
        assert cli.main(["eval", str(pred), str(gt), "--metric", "pckh"]) == 1
        assert "42" in capsys.readouterr().err

    def test_joint_count_mismatch(self, tmp_path, capsys):
        gt = _gt(tmp_path, [_ann(1, [5.0, 5.0, 2, 9.0, 9.0, 2])])
        pred = _gt(tmp_path, [_ann(1, [5.0, 5.0, 2], score=1.0)], k=1, name="pred.json")
        assert cli.main(["eval", str(pred), str(gt), "--metric", "oks-ap"]) == 1
        assert "joints" in capsys.readouterr().err


class TestCount:
    def test_empty_model(self, tmp_path, capsys):
        p = tmp_path / "empty.json"
        p.write_text(json.dumps({"backbone": None, "wasp": None}))
        assert cli.main(["count", str(p), "--json", str(tmp_path / "c.json")]) == 0
        doc = json.loads((tmp_path / "c.json").read_text())
        assert doc["params"] == 0 and doc["flops"] == 0

    def test_toy_model(self, toy, tmp_path, capsys):
        cfg, _ = toy
        assert cli.main(["count", str(cfg), "--json", str(tmp_path / "c.json")]) == 0
        doc = json.loads((tmp_path / "c.json").read_text())
        assert doc["lite"]["params"] < doc["standard"]["params"]
        assert "lite reduction" in capsys.readouterr().out


def test_selftest(capsys):
    assert cli.main(["selftest"]) == 0
    assert "8 passed, 0 failed" in capsys.readouterr().out

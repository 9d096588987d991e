import json
from pathlib import Path

import numpy as np
import pytest

from rbev import cli
from rbev import io as rio
from rbev import tensor as T


def write_scenario(path, seed=11, cells=16, cams=2):
    scenario = {
        "layout": "four-way", "num_cameras": cams, "traffic_level": "low", "seed": seed,
        "grid": {"x_range": [-12.8, 12.8], "y_range": [-12.8, 12.8],
                 "cells": [cells, cells],
                 "anchor_heights": [0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.25, 3.75],
                 "z_max": 12.0},
    }
    Path(path).write_text(json.dumps(scenario))
    return path


def write_model_config(path):
    cfg = {"channels": 8, "encoder": {"layers": 1, "attn_heads": 2},
           "gat": {"layers": 1, "heads": 2, "hidden": 8},
           "heads": {"n_queries": 10, "decoder_layers": 1, "attn_heads": 2, "seg_groups": 4}}
    Path(path).write_text(json.dumps(cfg))
    return path


def tree_bytes(root, skip=("meta.json",)):
    out = {}
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name not in skip:
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    write_scenario(ws / "scenario.json")
    write_model_config(ws / "model.json")
    rc = cli.main(["simulate", "--scenario", str(ws / "scenario.json"),
                   "--out", str(ws / "bundle")])
    assert rc == 0
    rc = cli.main(["encode", "--bundle", str(ws / "bundle"), "--config", str(ws / "model.json"),
                   "--out", str(ws / "enc")])
    assert rc == 0
    return ws


class TestUsage:
    def test_help_lists_all_commands(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for name in ("simulate", "encode", "evaluate", "gradcheck", "train-toy", "weights-dump"):
            assert name in text

    def test_unknown_flag_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["simulate", "--nonsense", "x", "--out", "y"])
        assert exc.value.code == 2

    def test_missing_scenario_exit_2(self, tmp_path, capsys):
        rc = cli.main(["simulate", "--scenario", str(tmp_path / "absent.json"),
                       "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "absent.json" in capsys.readouterr().err

    def test_malformed_config_exit_2(self, tmp_path, workspace):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        rc = cli.main(["encode", "--bundle", str(workspace / "bundle"),
                       "--config", str(bad), "--out", str(tmp_path / "o")])
        assert rc == 2


class TestSimulate:
    def test_fixed_seed_byte_identical(self, tmp_path):
        scenario = write_scenario(tmp_path / "s.json", seed=5)
        assert cli.main(["simulate", "--scenario", str(scenario), "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["simulate", "--scenario", str(scenario), "--out", str(tmp_path / "b")]) == 0
        a = tree_bytes(tmp_path / "a")
        b = tree_bytes(tmp_path / "b")
        assert a.keys() == b.keys() and len(a) >= 8
        for name in a:
            assert a[name] == b[name], f"{name} differs between identical runs"

    def test_bundle_round_trips(self, workspace):
        scenario, rigs, images, gt = cli._load_bundle(workspace / "bundle")
        assert scenario.seed == 11
        assert len(rigs) == 2 and len(images) == 2
        assert images[0].shape == (600, 800)
        raw = json.loads((workspace / "bundle" / "scenario.json").read_text())
        assert raw["seed"] == 11
        gt_map = rio.read_pgm(workspace / "bundle" / "gt_map.pgm")
        assert gt_map.shape == (16, 16)

    def test_seed_override_changes_scene(self, tmp_path):
        scenario = write_scenario(tmp_path / "s.json", seed=5)
        cli.main(["simulate", "--scenario", str(scenario), "--out", str(tmp_path / "a")])
        cli.main(["simulate", "--scenario", str(scenario), "--seed", "6", "--out", str(tmp_path / "b")])
        a = (tmp_path / "a" / "rigs.json").read_bytes()
        b = (tmp_path / "b" / "rigs.json").read_bytes()
        assert a != b


class TestEncode:
    def test_outputs_exist_and_parse(self, workspace):
        enc = workspace / "enc"
        bev = T.load_tensor(enc / "bev.tnsr")
        assert bev.shape == (256, 8)
        weights = T.load_tensor(enc / "fusion_weights.tnsr")
        assert weights.shape == (256, 2)
        sums = weights.data.sum(axis=1)
        covered = sums > 0
        np.testing.assert_allclose(sums[covered], 1.0, atol=1e-6)
        dets = json.loads((enc / "detections.json").read_text())
        assert len(dets) == 10
        for d in dets:
            assert set(d) == {"class", "score", "box", "vel"}
            assert len(d["box"]) == 7

    def test_deterministic(self, workspace, tmp_path):
        rc = cli.main(["encode", "--bundle", str(workspace / "bundle"),
                       "--config", str(workspace / "model.json"), "--out", str(tmp_path / "enc2")])
        assert rc == 0
        a = tree_bytes(workspace / "enc")
        b = tree_bytes(tmp_path / "enc2")
        for name in a:
            assert a[name] == b[name]

    def test_corrupt_auto_differs_and_reproduces(self, workspace, tmp_path):
        base = ["encode", "--bundle", str(workspace / "bundle"),
                "--config", str(workspace / "model.json")]
        assert cli.main(base + ["--corrupt", "auto", "--out", str(tmp_path / "c1")]) == 0
        assert cli.main(base + ["--corrupt", "auto", "--out", str(tmp_path / "c2")]) == 0
        clean = tree_bytes(workspace / "enc")
        c1 = tree_bytes(tmp_path / "c1")
        c2 = tree_bytes(tmp_path / "c2")
        assert c1["bev.tnsr"] == c2["bev.tnsr"]
        assert c1["bev.tnsr"] != clean["bev.tnsr"]


class TestEvaluate:
    def test_end_to_end_report(self, workspace, tmp_path):
        rc = cli.main(["evaluate", "--detections", str(workspace / "enc" / "detections.json"),
                       "--gt", str(workspace / "bundle" / "gt_boxes.json"),
                       "--out", str(tmp_path / "eval")])
        assert rc == 0
        report = json.loads((tmp_path / "eval" / "report.json").read_text())
        assert set(report) == {"per_class_ap", "per_class_tp", "mAP", "tp_errors", "NDS"}
        assert 0.0 <= report["mAP"] <= 1.0 and 0.0 <= report["NDS"] <= 1.0
        lines = (tmp_path / "eval" / "report.csv").read_text().strip().splitlines()
        assert lines[0].startswith("row,AP@")
        assert lines[-1].startswith("aggregate")

    def test_self_evaluation_perfect(self, workspace, tmp_path):
        gt = str(workspace / "bundle" / "gt_boxes.json")
        rc = cli.main(["evaluate", "--detections", gt, "--gt", gt, "--out", str(tmp_path / "se")])
        assert rc == 0
        report = json.loads((tmp_path / "se" / "report.json").read_text())
        assert report["mAP"] == 1.0 and report["NDS"] == 1.0


class TestGradcheckCommand:
    def test_passes_and_exit_codes(self, tmp_path):
        scenario = write_scenario(tmp_path / "s.json", seed=3, cells=8)
        cfg = write_model_config(tmp_path / "m.json")
        rc = cli.main(["gradcheck", "--scenario", str(scenario), "--config", str(cfg),
                       "--max-elements", "1", "--out", str(tmp_path / "gc")])
        assert rc == 0
        data = json.loads((tmp_path / "gc" / "gradcheck.json").read_text())
        assert data["passed"] is True
        rc = cli.main(["gradcheck", "--scenario", str(scenario), "--config", str(cfg),
                       "--max-elements", "1", "--tol", "1e-18"])
        assert rc == 4


class TestTrainToy:
    def test_deterministic_loss_curve(self, tmp_path):
        scenario = write_scenario(tmp_path / "s.json", seed=7, cells=8)
        cfg = write_model_config(tmp_path / "m.json")
        base = ["train-toy", "--scenario", str(scenario), "--config", str(cfg),
                "--steps", "5", "--lr", "0.05"]
        assert cli.main(base + ["--out", str(tmp_path / "t1")]) == 0
        assert cli.main(base + ["--out", str(tmp_path / "t2")]) == 0
        a = (tmp_path / "t1" / "loss_curve.csv").read_bytes()
        b = (tmp_path / "t2" / "loss_curve.csv").read_bytes()
        assert a == b
        lines = a.decode().strip().splitlines()
        assert lines[0] == "step,lr,total,cls,reg,seg_map,seg_obj"
        assert len(lines) == 6


class TestWeightsDump:
    def test_heatmaps_dequantize(self, workspace, tmp_path):
        rc = cli.main(["weights-dump", "--bundle", str(workspace / "bundle"),
                       "--config", str(workspace / "model.json"), "--out", str(tmp_path / "wd")])
        assert rc == 0
        sidecar = json.loads((tmp_path / "wd" / "weights_meta.json").read_text())
        assert len(sidecar) == 2
        weights = T.load_tensor(workspace / "enc" / "fusion_weights.tnsr").data
        for entry in sidecar:
            img = rio.read_pgm(tmp_path / "wd" / entry["file"]).astype(np.float64)
            lo, hi = entry["min"], entry["max"]
            recovered = lo + img / 255.0 * (hi - lo)
            truth = weights[:, entry["camera"]].reshape(16, 16)
            tol = (hi - lo) / 255.0 + 1e-12
            assert np.abs(recovered - truth).max() <= tol

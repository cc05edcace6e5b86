import json

import numpy as np
import pytest
import torch

from lidarnvs.cli import main
from lidarnvs.field import load_checkpoint
from lidarnvs.formats import read_ply, read_rvim, write_ply
from lidarnvs.rangeview import BeamTable
from lidarnvs.rasterizer import distortion_mask, median_scale_delta, render

from conftest import snapped_cloud


@pytest.fixture(scope="module")
def beams_file(tmp_path_factory):
    root = tmp_path_factory.mktemp("beams")
    payload = {"beams": list(np.linspace(-0.25, 0.2, 8)), "width": 64}
    path = root / "beams.json"
    path.write_text(json.dumps(payload))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    rc = main(
        [
            "fixture", "--name", "corridor", "--seed", "3", "--out", str(root),
            "--height", "8", "--width", "64", "--poses", "4",
        ]
    )
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpt")
    ckpt = root / "scene.ckpt"
    rc = main(
        [
            "reconstruct", "--manifest", str(dataset / "train.json"),
            "--out", str(ckpt), "--loss-csv", str(root / "loss.csv"),
            "--iters", "30", "--anchors", "200", "--seed", "1",
        ]
    )
    assert rc == 0
    return ckpt


class TestProjectUnproject:
    def test_roundtrip(self, beams_file, tmp_path):
        beams = BeamTable(np.linspace(-0.25, 0.2, 8), 64)
        pts = snapped_cloud(beams, 120, seed=0)
        write_ply(tmp_path / "in.ply", pts)
        assert main(["project", str(tmp_path / "in.ply"), str(tmp_path / "scan.rvim"),
                     "--beams", str(beams_file)]) == 0
        assert main(["unproject", str(tmp_path / "scan.rvim"), str(tmp_path / "out.ply"),
                     "--beams", str(beams_file)]) == 0
        back = read_ply(tmp_path / "out.ply")
        assert back.shape == pts.shape
        assert np.max(np.abs(back[:, :3] - pts[:, :3])) < 1e-5

    def test_empty_input(self, beams_file, tmp_path):
        write_ply(tmp_path / "empty.ply", np.zeros((0, 4)))
        assert main(["project", str(tmp_path / "empty.ply"), str(tmp_path / "e.rvim"),
                     "--beams", str(beams_file)]) == 0
        img = read_rvim(tmp_path / "e.rvim")
        assert img.raydrop.sum() == 0

    def test_malformed_header_exit_2(self, beams_file, tmp_path):
        bad = tmp_path / "bad.rvim"
        bad.write_bytes(b"JUNKJUNKJUNKJUNK")
        rc = main(["unproject", str(bad), str(tmp_path / "o.ply"),
                   "--beams", str(beams_file)])
        assert rc == 2

    def test_missing_file_exit_2(self, beams_file, tmp_path):
        rc = main(["project", str(tmp_path / "nope.ply"), str(tmp_path / "o.rvim"),
                   "--beams", str(beams_file)])
        assert rc == 2


class TestFixture:
    def test_writes_manifests(self, dataset):
        for name in ("train.json", "interp.json", "extrap.json"):
            assert (dataset / name).exists()

    def test_unknown_fixture_exit_2(self, tmp_path):
        assert main(["fixture", "--name", "nope", "--out", str(tmp_path)]) == 2


class TestReconstruct:
    def test_outputs_exist(self, checkpoint):
        assert checkpoint.exists()
        loss_csv = checkpoint.parent / "loss.csv"
        assert loss_csv.exists()
        assert (loss_csv.parent / "loss.png").exists()
        rows = loss_csv.read_text().strip().splitlines()
        assert rows[0].startswith("iteration,total")
        assert len(rows) == 31

    def test_deterministic_csv(self, dataset, tmp_path):
        args = [
            "reconstruct", "--manifest", str(dataset / "train.json"),
            "--iters", "12", "--anchors", "100", "--seed", "9",
        ]
        assert main(args + ["--out", str(tmp_path / "a.ckpt"),
                            "--loss-csv", str(tmp_path / "a.csv")]) == 0
        assert main(args + ["--out", str(tmp_path / "b.ckpt"),
                            "--loss-csv", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_zero_iters_emits_checkpoint(self, dataset, tmp_path):
        rc = main([
            "reconstruct", "--manifest", str(dataset / "train.json"),
            "--out", str(tmp_path / "init.ckpt"), "--iters", "0",
            "--anchors", "50", "--seed", "0",
        ])
        assert rc == 0
        scene = load_checkpoint(tmp_path / "init.ckpt")
        assert scene.anchor_count == 50
        assert torch.all(scene.tokens == 0)


class TestRender:
    def test_matches_library(self, dataset, checkpoint, tmp_path):
        from lidarnvs.formats import load_manifest

        rc = main([
            "render", "--checkpoint", str(checkpoint),
            "--manifest", str(dataset / "train.json"), "--frame", "1",
            "--out", str(tmp_path / "r.rvim"),
            "--median-out", str(tmp_path / "median.f32"),
            "--mask-out", str(tmp_path / "mask.npy"),
            "--ply", str(tmp_path / "r.ply"),
        ])
        assert rc == 0
        manifest = load_manifest(dataset / "train.json")
        scene = load_checkpoint(checkpoint)
        out = render(scene, manifest.frames[1].pose, manifest.beams)
        img = read_rvim(tmp_path / "r.rvim")
        expect = out.to_range_image()
        assert np.array_equal(img.depth, expect.depth.astype(np.float32).astype(np.float64))

        median = np.frombuffer((tmp_path / "median.f32").read_bytes(), dtype="<f4")
        assert median.size == img.depth.size
        assert np.allclose(
            median.reshape(img.shape), out.median_depth.numpy(), atol=1e-6
        )

        from lidarnvs.field import decode_attributes

        delta = median_scale_delta(decode_attributes(scene, manifest.frames[1].pose))
        mask = np.load(tmp_path / "mask.npy")
        assert np.array_equal(mask, distortion_mask(out, delta).mask)

    def test_missing_checkpoint_exit_2(self, dataset, tmp_path):
        rc = main([
            "render", "--checkpoint", str(tmp_path / "nope.ckpt"),
            "--manifest", str(dataset / "train.json"),
            "--out", str(tmp_path / "r.rvim"),
        ])
        assert rc == 2


class TestPairsExpandEval:
    def test_pairs(self, dataset, checkpoint, tmp_path):
        rc = main([
            "pairs", "--checkpoint", str(checkpoint),
            "--manifest", str(dataset / "train.json"),
            "--out", str(tmp_path / "pairs"), "--sigma", "0.2", "--tau", "0.1",
        ])
        assert rc == 0
        index = json.loads((tmp_path / "pairs" / "pairs.json").read_text())
        assert len(index["pairs"]) == 4

    def test_expand_passthrough(self, dataset, checkpoint, tmp_path):
        rc = main([
            "expand", "--checkpoint", str(checkpoint),
            "--manifest", str(dataset / "train.json"),
            "--provider", "passthrough", "--iters", "4",
            "--out", str(tmp_path / "refined.ckpt"),
        ])
        assert rc == 0
        assert (tmp_path / "refined.ckpt").exists()

    def test_expand_oracle_requires_manifest(self, dataset, checkpoint, tmp_path):
        rc = main([
            "expand", "--checkpoint", str(checkpoint),
            "--manifest", str(dataset / "train.json"),
            "--provider", "oracle", "--out", str(tmp_path / "x.ckpt"),
        ])
        assert rc == 2

    def test_expand_unknown_provider(self, dataset, checkpoint, tmp_path):
        rc = main([
            "expand", "--checkpoint", str(checkpoint),
            "--manifest", str(dataset / "train.json"),
            "--provider", "martian", "--out", str(tmp_path / "x.ckpt"),
        ])
        assert rc == 2

    def test_eval_outputs(self, dataset, checkpoint, tmp_path):
        rc = main([
            "eval", "--checkpoint", str(checkpoint),
            "--manifest", str(dataset / "interp.json"),
            "--out", str(tmp_path / "report"),
        ])
        assert rc == 0
        out = tmp_path / "report"
        report = json.loads((out / "report.json").read_text())
        assert "mean" in report and "cd" in report["mean"]
        assert (out / "per_frame.csv").exists()
        assert (out / "report.txt").exists()
        assert (out / "metrics.png").exists()
        assert (out / "frame0.png").exists()
        assert (out / "bev0.png").exists()


class TestConfig:
    def test_unknown_key_rejected(self, dataset, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"version": 1, "typo_key": 3}))
        rc = main([
            "reconstruct", "--manifest", str(dataset / "train.json"),
            "--out", str(tmp_path / "x.ckpt"), "--iters", "1", "--config", str(cfg),
        ])
        assert rc == 2

    def test_nested_override(self, dataset, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "version": 1,
            "scene": {"anchor_count": 64, "max_scale": 0.8},
            "training": {"single_pass_iters": 3},
        }))
        rc = main([
            "reconstruct", "--manifest", str(dataset / "train.json"),
            "--out", str(tmp_path / "c.ckpt"), "--config", str(cfg),
            "--loss-csv", str(tmp_path / "c.csv"),
        ])
        assert rc == 0
        assert load_checkpoint(tmp_path / "c.ckpt").anchor_count <= 128
        assert len((tmp_path / "c.csv").read_text().strip().splitlines()) == 4

    def test_bad_version(self, dataset, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"version": 99}))
        rc = main([
            "reconstruct", "--manifest", str(dataset / "train.json"),
            "--out", str(tmp_path / "x.ckpt"), "--config", str(cfg),
        ])
        assert rc == 2

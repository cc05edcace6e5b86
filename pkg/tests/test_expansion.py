import json
import threading
import time

import numpy as np
import pytest
import torch

from lidarnvs.expansion import (
    ExternalSpoolProvider,
    ManifestOracleProvider,
    NoisyOracleProvider,
    OracleProvider,
    PassthroughProvider,
    expand_reconstruct,
    extrapolate_poses,
    generate_scans,
    make_training_pairs,
)
from lidarnvs.field import SceneConfig
from lidarnvs.formats import read_rvim, write_rvim
from lidarnvs.rangeview import Pose, RangeImage
from lidarnvs.rasterizer import render
from lidarnvs.synth import corridor_fixture
from lidarnvs.training import LossConfig, reconstruct_single_pass

from conftest import random_scene


@pytest.fixture(scope="module")
def small_fixture():
    return corridor_fixture(5, height=8, width=64, n_poses=4)


@pytest.fixture(scope="module")
def rough_scene(small_fixture):
    cfg = LossConfig(single_pass_iters=40)
    scene, _ = reconstruct_single_pass(
        small_fixture.train, cfg, seed=0,
        scene_config=SceneConfig(anchor_count=300, max_scale=1.0),
    )
    return scene


class TestExtrapolatePoses:
    def test_zero_offset_identity(self, small_fixture):
        poses = extrapolate_poses(small_fixture.train, [0.0])
        for p, f in zip(poses, small_fixture.train.frames):
            assert np.allclose(p.matrix, f.pose.matrix)

    def test_identity_pose_left_shift(self, small_fixture):
        manifest = small_fixture.train
        base = manifest.frames[0].pose
        poses = extrapolate_poses(manifest, [3.5])
        assert np.allclose(
            poses[0].translation, base.translation + [0.0, 3.5, 0.0]
        )

    def test_rotated_pose_shifts_along_sensor_y(self):
        from lidarnvs.formats import Frame, Manifest

        yaw = np.pi / 2  # sensor +y now points along world -x
        mat = np.eye(4)
        mat[:3, :3] = [[0, -1, 0], [1, 0, 0], [0, 0, 1]]
        manifest = Manifest(beams=None, frames=[Frame(pose=Pose(mat))])
        poses = extrapolate_poses(manifest, [2.0])
        assert np.allclose(poses[0].translation, [-2.0, 0.0, 0.0], atol=1e-12)

    def test_count(self, small_fixture):
        poses = extrapolate_poses(small_fixture.train, [-3.5, 3.5])
        assert len(poses) == 2 * len(small_fixture.train.frames)


class TestProviders:
    def test_passthrough_bit_exact(self):
        img = RangeImage(np.ones((4, 8)), np.full((4, 8), 0.5), np.ones((4, 8)))
        out = PassthroughProvider().generate(img, Pose.identity())
        assert np.array_equal(out.depth, img.depth)
        assert out.depth is not img.depth  # defensive copy

    def test_oracle_returns_ground_truth(self, small_fixture):
        provider = OracleProvider(small_fixture.scene, small_fixture.beams)
        frame = small_fixture.train.frames[1]
        out = provider.generate(frame.image, frame.pose)
        assert np.array_equal(out.depth, frame.image.depth)

    def test_noisy_oracle_structured_noise(self, small_fixture):
        frame = small_fixture.train.frames[0]
        provider = NoisyOracleProvider(
            small_fixture.scene, small_fixture.beams, sigma=0.1, seed=3
        )
        out = provider.generate(frame.image, frame.pose)
        resid = out.depth - frame.image.depth
        assert 0.02 < resid.std() < 0.3
        # smooth field: neighboring residuals are correlated
        corr = np.corrcoef(resid[:, :-1].ravel(), resid[:, 1:].ravel())[0, 1]
        assert corr > 0.8

    def test_noisy_oracle_seeded(self, small_fixture):
        frame = small_fixture.train.frames[0]
        a = NoisyOracleProvider(small_fixture.scene, small_fixture.beams, 0.1, seed=3)
        b = NoisyOracleProvider(small_fixture.scene, small_fixture.beams, 0.1, seed=3)
        assert np.array_equal(
            a.generate(frame.image, frame.pose).depth,
            b.generate(frame.image, frame.pose).depth,
        )

    def test_manifest_oracle_lookup(self, small_fixture):
        provider = ManifestOracleProvider(small_fixture.extrap)
        frame = small_fixture.extrap.frames[2]
        out = provider.generate(frame.image, frame.pose)
        assert np.array_equal(out.depth, frame.image.depth)
        with pytest.raises(KeyError):
            provider.generate(frame.image, Pose.identity(timestamp=9.9))


def spool_worker(spool, transform=None, fail=False):
    """Minimal stand-in for the external generator process."""
    jobs = spool / "jobs"
    done = set()
    deadline = time.monotonic() + 20
    while time.monotonic() < deadline:
        for ticket in sorted(jobs.glob("*.json")):
            if ticket.name in done:
                continue
            done.add(ticket.name)
            payload = json.loads(ticket.read_text())
            job_id = ticket.stem
            if fail:
                (spool / "out" / f"{job_id}.err").write_text("boom")
                return
            img = read_rvim(payload["condition_path"])
            if transform is not None:
                img = transform(img)
            tmp = spool / "out" / f"{job_id}.tmp"
            write_rvim(tmp, img)
            tmp.rename(spool / "out" / f"{job_id}.rvim")
            return
        time.sleep(0.05)


class TestExternalSpool:
    def test_roundtrip(self, tmp_path):
        from lidarnvs.rangeview import BeamTable

        beams = BeamTable(np.linspace(-0.2, 0.2, 4), 16)
        provider = ExternalSpoolProvider(tmp_path / "spool", beams, timeout=10.0)
        img = RangeImage(np.full((4, 16), 3.0), np.full((4, 16), 0.5), np.ones((4, 16)))
        worker = threading.Thread(
            target=spool_worker, args=(tmp_path / "spool",), daemon=True
        )
        worker.start()
        out = provider.generate(img, Pose.identity())
        worker.join()
        assert np.allclose(out.depth, img.depth)

    def test_error_ticket(self, tmp_path):
        from lidarnvs.rangeview import BeamTable

        beams = BeamTable(np.linspace(-0.2, 0.2, 4), 16)
        provider = ExternalSpoolProvider(tmp_path / "spool", beams, timeout=10.0)
        img = RangeImage.zeros(4, 16)
        worker = threading.Thread(
            target=spool_worker, args=(tmp_path / "spool",), kwargs={"fail": True},
            daemon=True,
        )
        worker.start()
        with pytest.raises(RuntimeError):
            provider.generate(img, Pose.identity())
        worker.join()

    def test_timeout(self, tmp_path):
        from lidarnvs.rangeview import BeamTable

        beams = BeamTable(np.linspace(-0.2, 0.2, 4), 16)
        provider = ExternalSpoolProvider(tmp_path / "spool", beams, timeout=0.5)
        with pytest.raises(TimeoutError):
            provider.generate(RangeImage.zeros(4, 16), Pose.identity())

    def test_env_var_timeout(self, tmp_path, monkeypatch):
        from lidarnvs.expansion import SPOOL_TIMEOUT_ENV
        from lidarnvs.rangeview import BeamTable

        monkeypatch.setenv(SPOOL_TIMEOUT_ENV, "123.0")
        beams = BeamTable(np.linspace(-0.2, 0.2, 4), 16)
        provider = ExternalSpoolProvider(tmp_path / "spool", beams)
        assert provider.timeout == 123.0


class TestTrainingPairs:
    def test_clean_when_unperturbed(self, rough_scene, small_fixture):
        pairs = make_training_pairs(rough_scene, small_fixture.train, 0.0, 0.0, seed=0)
        clean = render(
            rough_scene, small_fixture.train.frames[0].pose, small_fixture.beams
        ).to_range_image()
        assert np.array_equal(pairs[0].condition.depth, clean.depth)

    def test_pair_count_and_targets(self, rough_scene, small_fixture):
        pairs = make_training_pairs(rough_scene, small_fixture.train, 0.2, 0.1, seed=0)
        assert len(pairs) == len(small_fixture.train.frames)
        for pair, frame in zip(pairs, small_fixture.train.frames):
            assert np.array_equal(pair.target.depth, frame.image.depth)

    def test_perturbation_changes_condition(self, rough_scene, small_fixture):
        clean = make_training_pairs(rough_scene, small_fixture.train, 0.0, 0.0, seed=0)
        noisy = make_training_pairs(rough_scene, small_fixture.train, 0.2, 0.1, seed=0)
        assert not np.array_equal(clean[0].condition.depth, noisy[0].condition.depth)

    def test_writes_pair_directory(self, rough_scene, small_fixture, tmp_path):
        out = tmp_path / "pairs"
        make_training_pairs(rough_scene, small_fixture.train, 0.2, 0.1, seed=0, out_dir=out)
        index = json.loads((out / "pairs.json").read_text())
        assert len(index["pairs"]) == len(small_fixture.train.frames)
        first = index["pairs"][0]
        cond = read_rvim(out / first["condition"])
        assert cond.shape == (small_fixture.beams.height, small_fixture.beams.width)


class TestGenerateScans:
    def test_oracle_count_and_tag(self, rough_scene, small_fixture):
        poses = extrapolate_poses(small_fixture.train, [-3.5, 3.5])[:4]
        provider = OracleProvider(small_fixture.scene, small_fixture.beams)
        scans = generate_scans(rough_scene, poses, provider, small_fixture.beams)
        assert len(scans) == 4
        assert all(s.source == "oracle" for s in scans)

    def test_failing_provider_skips(self, rough_scene, small_fixture):
        class Flaky(PassthroughProvider):
            calls = 0

            def generate(self, condition, pose):
                Flaky.calls += 1
                if Flaky.calls % 2 == 0:
                    raise RuntimeError("transient")
                return super().generate(condition, pose)

        poses = extrapolate_poses(small_fixture.train, [3.5])
        scans = generate_scans(rough_scene, poses, Flaky(), small_fixture.beams)
        assert len(scans) == 2  # every second call fails

    def test_dimension_mismatch_is_error(self, rough_scene, small_fixture):
        class Wrong(PassthroughProvider):
            def generate(self, condition, pose):
                return RangeImage.zeros(2, 4)

        poses = extrapolate_poses(small_fixture.train, [3.5])[:1]
        with pytest.raises(ValueError):
            generate_scans(rough_scene, poses, Wrong(), small_fixture.beams)


class TestExpandReconstruct:
    def test_no_generated_behaves_like_training(self, small_fixture):
        cfg = LossConfig(single_pass_iters=10)
        scene, _ = reconstruct_single_pass(
            small_fixture.train, cfg, seed=1,
            scene_config=SceneConfig(anchor_count=150, max_scale=1.0),
        )
        before = scene.tokens.clone()
        expand_reconstruct(scene, small_fixture.train, [], cfg, seed=2, iters=4)
        assert not torch.equal(scene.tokens, before)

    def test_runs_with_oracle_scans(self, rough_scene, small_fixture):
        poses = extrapolate_poses(small_fixture.train, [3.5])[:2]
        provider = OracleProvider(small_fixture.scene, small_fixture.beams)
        generated = generate_scans(rough_scene, poses, provider, small_fixture.beams)
        before = rough_scene.tokens.clone()
        expand_reconstruct(
            rough_scene, small_fixture.train, generated, LossConfig(), seed=3, iters=6
        )
        assert not torch.equal(rough_scene.tokens, before)

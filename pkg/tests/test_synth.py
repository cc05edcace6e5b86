import numpy as np
import pytest

from lidarnvs.rangeview import BeamTable, Pose, unproject
from lidarnvs.synth import Box, Cylinder, Plane, SyntheticScene, corridor_fixture, raycast_scan


def wall_scene(x: float = 5.0) -> SyntheticScene:
    return SyntheticScene([Plane(point=(x, 0, 0), normal=(1, 0, 0), intensity=0.5)])


class TestPrimitives:
    def test_plane_axis_hit(self):
        t, intens, hit = wall_scene().raycast(np.zeros((1, 3)), np.array([[1.0, 0, 0]]))
        assert hit[0] and t[0] == pytest.approx(5.0) and intens[0] == 0.5

    def test_plane_miss_behind(self):
        t, _, hit = wall_scene().raycast(np.zeros((1, 3)), np.array([[-1.0, 0, 0]]))
        assert not hit[0] and t[0] == 0.0

    def test_box_from_outside_and_inside(self):
        box = Box((1.0, -1.0, -1.0), (3.0, 1.0, 1.0), intensity=0.8)
        t_out = box.raycast(np.zeros(3), np.array([1.0, 0, 0]))
        assert t_out == pytest.approx(1.0)
        t_in = box.raycast(np.array([2.0, 0, 0]), np.array([1.0, 0, 0]))
        assert t_in == pytest.approx(1.0)  # exit face at x=3

    def test_cylinder_hit_and_z_clip(self):
        cyl = Cylinder((4.0, 0.0), radius=1.0, z0=0.0, z1=2.0, intensity=0.9)
        t = cyl.raycast(np.array([0.0, 0, 1.0]), np.array([1.0, 0, 0]))
        assert t == pytest.approx(3.0)
        t_miss = cyl.raycast(np.array([0.0, 0, 5.0]), np.array([1.0, 0, 0]))
        assert np.isinf(t_miss)

    def test_nearest_primitive_wins(self):
        scene = SyntheticScene(
            [
                Plane((5, 0, 0), (1, 0, 0), intensity=0.2),
                Plane((3, 0, 0), (1, 0, 0), intensity=0.9),
            ]
        )
        t, intens, hit = scene.raycast(np.zeros((1, 3)), np.array([[1.0, 0, 0]]))
        assert t[0] == pytest.approx(3.0) and intens[0] == 0.9


class TestRaycastScan:
    def test_plane_depth(self):
        beams = BeamTable(np.array([-0.01, 0.0, 0.01]), width=9)
        img = raycast_scan(wall_scene(), Pose.identity(), beams)
        # middle row, middle column looks straight down +x
        assert img.depth[1, 4] == pytest.approx(5.0)
        assert img.raydrop[1, 4] == 1.0

    def test_drop_prob_one(self):
        beams = BeamTable(np.array([-0.01, 0.0, 0.01]), width=9)
        img = raycast_scan(wall_scene(), Pose.identity(), beams, drop_prob=1.0, seed=1)
        assert img.raydrop.sum() == 0.0
        assert img.depth.sum() == 0.0

    def test_noise_statistics(self):
        beams = BeamTable(np.linspace(-0.05, 0.05, 64), width=320)  # ~10k forward rays
        base = raycast_scan(wall_scene(), Pose.identity(), beams)
        noisy = raycast_scan(wall_scene(), Pose.identity(), beams, noise_sigma=0.01, seed=3)
        resid = (noisy.depth - base.depth)[base.raydrop > 0]
        assert resid.size >= 10_000
        assert 0.008 <= resid.std() <= 0.012

    def test_zero_noise_is_exact_oracle(self):
        beams = BeamTable(np.linspace(-0.2, 0.2, 8), width=64)
        img = raycast_scan(wall_scene(), Pose.identity(), beams)
        pts = unproject(img, beams)
        hit = pts[:, 0] > 0
        assert np.all(np.abs(pts[hit, 0] - 5.0) < 1e-9)

    def test_seeded_determinism(self):
        beams = BeamTable(np.linspace(-0.2, 0.2, 8), width=64)
        a = raycast_scan(wall_scene(), Pose.identity(), beams, 0.05, 0.2, seed=9)
        b = raycast_scan(wall_scene(), Pose.identity(), beams, 0.05, 0.2, seed=9)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.raydrop, b.raydrop)


class TestCorridorFixture:
    def test_deterministic(self):
        a = corridor_fixture(7, height=8, width=64, n_poses=4)
        b = corridor_fixture(7, height=8, width=64, n_poses=4)
        for ma, mb in ((a.train, b.train), (a.interp, b.interp), (a.extrap, b.extrap)):
            assert len(ma.frames) == len(mb.frames)
            for fa, fb in zip(ma.frames, mb.frames):
                assert np.array_equal(fa.pose.matrix, fb.pose.matrix)
                assert np.array_equal(fa.image.depth, fb.image.depth)

    def test_lane_offsets(self):
        f = corridor_fixture(0, height=8, width=64, n_poses=6)
        ys = sorted({float(fr.pose.translation[1]) for fr in f.extrap.frames})
        assert ys == [-3.5, 3.5]
        assert all(fr.pose.translation[1] == 0.0 for fr in f.train.frames)

    def test_default_resolution(self):
        f = corridor_fixture(0, n_poses=2)
        assert f.beams.height == 32
        assert f.beams.width == 512
        assert f.train.frames[0].image.shape == (32, 512)

    def test_closed_room_all_returns(self):
        f = corridor_fixture(3, height=8, width=64, n_poses=3)
        for fr in f.train.frames:
            assert fr.image.raydrop.min() == 1.0

    def test_write_and_reload(self, tmp_path):
        from lidarnvs.formats import load_manifest

        f = corridor_fixture(1, height=8, width=64, n_poses=3)
        paths = f.write(tmp_path / "data")
        back = load_manifest(paths["train"])
        assert len(back.frames) == 3
        img = back.frames[1].load(back.beams)
        assert np.allclose(img.depth, f.train.frames[1].image.depth, atol=1e-4)

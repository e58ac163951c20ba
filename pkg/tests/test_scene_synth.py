import math

import numpy as np
import pytest

from errors import UnknownKind, UnknownRecipe
from geometry import Intrinsics, look_at, project_points
from helpers import RESOLUTION
from keyframes import coverage_mask
from renderer import render
from scene_synth import (Corruption, GaussianScene, SceneRecipe, generate_scene, generate_trajectory,
                         oracle_keyframes, recipe_bounds, visible_points)


class TestGenerateScene:
    def test_checker_plane_is_planar(self, checker_scene):
        assert np.all(checker_scene.means[:, 2] == 0.0)

    def test_deterministic(self):
        recipe = SceneRecipe("cloudfield", 3000)
        assert generate_scene(recipe, 11).equals(generate_scene(recipe, 11))
        assert not generate_scene(recipe, 11).equals(generate_scene(recipe, 12))

    def test_room_budget(self):
        scene = generate_scene(SceneRecipe("room", 50000), 7)
        assert 45000 <= len(scene) <= 50000

    @pytest.mark.parametrize("name", ["room", "cloudfield", "checker-plane"])
    def test_inside_recipe_bounds(self, name):
        recipe = SceneRecipe(name, 5000)
        scene = generate_scene(recipe, 1)
        lo, hi = recipe_bounds(recipe)
        assert np.all(scene.means >= lo - 1e-6)
        assert np.all(scene.means <= hi + 1e-6)
        assert np.all(scene.scales > 0)
        assert np.all((scene.opacities > 0) & (scene.opacities <= 1))

    def test_unknown_recipe(self):
        with pytest.raises(UnknownRecipe):
            generate_scene(SceneRecipe("castle"), 0)

    def test_indexing_returns_gaussians(self, checker_scene):
        gaussian = checker_scene[3]
        rebuilt = GaussianScene.from_gaussians([checker_scene[i] for i in range(5)], checker_scene.background)
        assert gaussian.mean == tuple(float(v) for v in checker_scene.means[3])
        assert rebuilt.equals(checker_scene.subset(np.arange(5)))


class TestGenerateTrajectory:
    bounds = recipe_bounds(SceneRecipe("room"))

    def test_orbit_frame_count(self):
        assert generate_trajectory("orbit", 20.0, 30.0, 0, self.bounds).num_frames == 600

    def test_dolly_frame_count(self):
        assert generate_trajectory("dolly", 20.0, 10.0, 0, self.bounds).num_frames == 200

    def test_orbit_radius(self):
        traj = generate_trajectory("orbit", 4.0, 30.0, 3, self.bounds, radius=2.0)
        pivot = 0.5 * (self.bounds[0] + self.bounds[1])
        np.testing.assert_allclose(np.linalg.norm(traj.centers() - pivot, axis=1), 2.0, atol=1e-9)

    @pytest.mark.parametrize("kind", ["orbit", "dolly", "smooth-random-walk"])
    def test_smooth_rotation(self, kind):
        traj = generate_trajectory(kind, 20.0, 30.0, 5, self.bounds, sweep_deg=360.0)
        deltas = [a.rotation.angle_to(b.rotation) for a, b in zip(traj.poses[:-1], traj.poses[1:])]
        assert max(deltas) < math.radians(5.0)

    @pytest.mark.parametrize("kind, duration_s, fps", [("orbit", 1.0, 30.0), ("orbit", 0.2, 30.0),
                                                       ("orbit", 2.0, 5.0), ("dolly", 0.5, 30.0),
                                                       ("dolly", 1.0, 3.0)])
    def test_short_trajectories_rotate_slowly(self, kind, duration_s, fps):
        traj = generate_trajectory(kind, duration_s, fps, 5, self.bounds, sweep_deg=360.0)
        deltas = [a.rotation.angle_to(b.rotation) for a, b in zip(traj.poses[:-1], traj.poses[1:])]
        assert max(deltas) < math.radians(5.0)

    def test_long_orbit_keeps_its_sweep(self):
        traj = generate_trajectory("orbit", 20.0, 30.0, 5, self.bounds, sweep_deg=180.0)
        first, last = traj.poses[0].rotation, traj.poses[-1].rotation
        assert first.angle_to(last) == pytest.approx(math.radians(180.0 * 599 / 600), abs=1e-9)

    @pytest.mark.parametrize("kind", ["orbit", "dolly", "smooth-random-walk"])
    def test_camera_stays_inside_room(self, kind):
        traj = generate_trajectory(kind, 10.0, 10.0, 2, self.bounds)
        centers = traj.centers()
        assert np.all(np.abs(centers[:, :2]) < 4.0)

    def test_deterministic(self):
        first = generate_trajectory("smooth-random-walk", 5.0, 10.0, 9, self.bounds)
        second = generate_trajectory("smooth-random-walk", 5.0, 10.0, 9, self.bounds)
        assert first == second

    def test_unknown_kind(self):
        with pytest.raises(UnknownKind):
            generate_trajectory("spiral", 1.0, 30.0, 0, self.bounds)


class TestVisiblePoints:
    def test_camera_facing_away(self, checker_scene):
        pose = look_at((0.0, 0.0, 3.0), (0.0, 0.0, 6.0), Intrinsics.from_fov(RESOLUTION), up=(0.0, 1.0, 0.0))
        assert len(visible_points(checker_scene, pose, RESOLUTION)) == 0

    def test_points_on_plane(self, checker_scene, overhead_pose):
        cloud = visible_points(checker_scene, overhead_pose, RESOLUTION)
        assert len(cloud) > 0
        plane_scale = float(checker_scene.scales[:, :2].max())
        assert np.abs(cloud.points[:, 2]).max() <= 2.0 * plane_scale

    def test_reprojection(self, small_room):
        pose = look_at((2.0, -1.5, 1.5), (0.0, 0.0, 1.0), Intrinsics.from_fov(RESOLUTION))
        stride = 4
        cloud = visible_points(small_room, pose, RESOLUTION, stride)
        pixels, _ = project_points(cloud.points, pose)
        expected = pixels.round()
        assert np.abs(pixels - expected).max() < 0.5
        assert np.all(expected % stride == stride // 2)

    def test_cloud_covers_rendered_pixels(self, small_room):
        pose = look_at((2.0, -1.5, 1.5), (0.0, 0.0, 1.0), Intrinsics.from_fov(RESOLUTION))
        cloud = visible_points(small_room, pose, RESOLUTION, stride=1)
        frame = render(small_room, pose, RESOLUTION)
        occupied = frame.alpha >= 0.5
        covered = coverage_mask(cloud.points, pose, RESOLUTION, splat_radius_px=0)
        assert (covered & occupied).sum() >= 0.99 * occupied.sum()


class TestOracleKeyframes:
    def test_no_corruption_matches_render(self, checker_scene, overhead_pose):
        keyframe = oracle_keyframes(checker_scene, [overhead_pose], resolution=RESOLUTION)[0]
        frame = render(checker_scene, overhead_pose, RESOLUTION)
        assert np.array_equal(keyframe.image, frame.color)
        assert np.array_equal(keyframe.depth, frame.depth)

    def test_zero_noise_is_identity(self, checker_scene, overhead_pose):
        clean = oracle_keyframes(checker_scene, [overhead_pose], resolution=RESOLUTION)[0]
        noisy = oracle_keyframes(checker_scene, [overhead_pose], Corruption("noise", 0.0), RESOLUTION)[0]
        assert np.array_equal(clean.image, noisy.image)

    def test_noise_changes_pixels(self, checker_scene, overhead_pose):
        clean = oracle_keyframes(checker_scene, [overhead_pose], resolution=RESOLUTION)[0]
        noisy = oracle_keyframes(checker_scene, [overhead_pose], Corruption("noise", 0.05), RESOLUTION, seed=1)[0]
        assert 0.01 < float(np.std(noisy.image - clean.image)) < 0.06

    def test_drift_grows_linearly(self, checker_scene, overhead_pose):
        rate = 0.01
        keyframes = oracle_keyframes(checker_scene, [overhead_pose] * 4, Corruption("drift", rate), RESOLUTION)
        for position, keyframe in enumerate(keyframes):
            assert keyframe.pose == overhead_pose
            angle = keyframe.render_pose.rotation.angle_to(overhead_pose.rotation)
            assert angle == pytest.approx(position * rate, abs=1e-9)
            np.testing.assert_array_equal(keyframe.render_pose.center, overhead_pose.center)

    def test_indices_are_carried(self, checker_scene, overhead_pose):
        keyframes = oracle_keyframes(checker_scene, [overhead_pose] * 2, resolution=RESOLUTION, indices=[3, 17])
        assert [keyframe.index for keyframe in keyframes] == [3, 17]

    def test_unknown_corruption(self, checker_scene, overhead_pose):
        with pytest.raises(UnknownKind):
            oracle_keyframes(checker_scene, [overhead_pose], Corruption("blur", 1.0), RESOLUTION)

import math

import numpy as np
import pytest

from errors import CountMismatch, DegenerateConfiguration, NoValidDepth
from geometry import CameraPose, Intrinsics, Quaternion, SimilarityTransform, Trajectory, compose, look_at
from helpers import RESOLUTION, random_quaternions
from keyframes import uniform_keyframe_indices
from metrics import hole_fraction, psnr
from reconstruct import (ChunkPlan, ChunkReconstruction, align_chunks, default_voxel_size, fit_similarity,
                         make_chunk_plan, reconstruct)
from renderer import assign_frames_to_chunks, render
from scene_synth import GaussianScene, oracle_keyframes

INTRINSICS = Intrinsics(100.0, 100.0, 32.0, 24.0)
KNOWN = SimilarityTransform(2.0, Quaternion.from_axis_angle((0.0, 1.0, 0.0), math.radians(30.0)), (1.0, 2.0, 3.0))


def random_poses(count: int, seed: int = 0, spread: float = 1.0):
    centers = np.random.default_rng(seed).normal(scale=spread, size=(count, 3))
    return [CameraPose(rotation, tuple(center), INTRINSICS)
            for rotation, center in zip(random_quaternions(count, seed), centers)]


def collinear_poses(count: int, seed: int = 0):
    direction = np.array([1.0, 2.0, -0.5])
    return [CameraPose(rotation, tuple(step * direction), INTRINSICS)
            for step, rotation in enumerate(random_quaternions(count, seed))]


def assert_transform_close(actual: SimilarityTransform, expected: SimilarityTransform, atol: float = 1e-9):
    assert actual.scale == pytest.approx(expected.scale, abs=atol)
    assert actual.rotation.is_close(expected.rotation, atol=atol)
    np.testing.assert_allclose(actual.translation, expected.translation, atol=atol)


class TestReconstruct:
    def test_plane_stays_on_plane(self, checker_scene, overhead_pose):
        keyframes = oracle_keyframes(checker_scene, [overhead_pose], resolution=RESOLUTION)
        voxel = 0.05
        scene = reconstruct(keyframes, voxel)
        assert len(scene) > 0
        assert np.abs(scene.means[:, 2]).max() <= voxel
        assert np.all(scene.opacities == np.float32(0.95))
        assert np.all(scene.scales >= np.float32(voxel / 2.0))

    def test_duplicate_keyframes(self, checker_scene, overhead_pose):
        keyframe = oracle_keyframes(checker_scene, [overhead_pose], resolution=RESOLUTION)[0]
        single = reconstruct([keyframe], 0.05)
        double = reconstruct([keyframe, keyframe], 0.05)
        assert len(single) == len(double)
        np.testing.assert_allclose(single.means, double.means, atol=1e-6)
        np.testing.assert_allclose(single.colors, double.colors, atol=1e-6)

    def test_keyframe_order_does_not_matter(self, small_room):
        poses = [look_at(eye, (0.0, 0.0, 1.0), Intrinsics.from_fov(RESOLUTION))
                 for eye in [(2.0, -1.5, 1.5), (-2.0, 1.0, 1.2), (1.5, 2.0, 2.0)]]
        keyframes = oracle_keyframes(small_room, poses, resolution=RESOLUTION)
        assert reconstruct(keyframes).equals(reconstruct(keyframes[::-1]))
        assert reconstruct(keyframes).equals(reconstruct([keyframes[1], keyframes[2], keyframes[0]]))

    def test_keyframe_view_is_filled(self, small_room):
        pose = look_at((2.0, -1.5, 1.5), (0.0, 0.0, 1.0), Intrinsics.from_fov(RESOLUTION))
        keyframes = oracle_keyframes(small_room, [pose], resolution=RESOLUTION)
        scene = reconstruct(keyframes, default_voxel_size(*small_room.bounds()))
        truth = render(small_room, pose, RESOLUTION)
        assert hole_fraction(render(scene, pose, RESOLUTION)) <= hole_fraction(truth) + 0.05

    def test_nearby_view_is_reproduced(self, small_room):
        resolution = (128, 96)
        intrinsics = Intrinsics.from_fov(resolution)
        target = (0.0, 0.0, 1.0)
        poses = [look_at(eye, target, intrinsics)
                 for eye in [(2.4, -1.2, 1.4), (2.6, -0.4, 1.5), (2.4, 0.4, 1.4), (2.6, 1.2, 1.5)]]
        scene = reconstruct(oracle_keyframes(small_room, poses, resolution=resolution),
                            default_voxel_size(*small_room.bounds()))
        held_out = look_at((2.5, 0.0, 1.45), target, intrinsics)
        assert psnr(render(scene, held_out, resolution).color, render(small_room, held_out, resolution).color) >= 25.0

    def test_no_valid_depth(self, checker_scene):
        away = look_at((0.0, 0.0, 3.0), (0.0, 0.0, 6.0), Intrinsics.from_fov(RESOLUTION), up=(0.0, 1.0, 0.0))
        keyframes = oracle_keyframes(checker_scene, [away], resolution=RESOLUTION)
        with pytest.raises(NoValidDepth):
            reconstruct(keyframes)

    def test_no_keyframes(self):
        with pytest.raises(ValueError):
            reconstruct([])


class TestFitSimilarity:
    def test_identity(self):
        poses = random_poses(6)
        fit = fit_similarity(poses, poses)
        assert_transform_close(fit.transform, SimilarityTransform.identity())
        assert fit.residual_rms < 1e-9

    def test_known_transform(self):
        src = random_poses(8, seed=1)
        fit = fit_similarity(src, [compose(KNOWN, pose) for pose in src])
        assert_transform_close(fit.transform, KNOWN)
        assert fit.residual_rms < 1e-9
        assert fit.residuals.max() < 1e-9

    def test_fit_applies_to_whole_trajectory(self):
        poses = random_poses(30, seed=2)
        keyframes = poses[::5]
        fit = fit_similarity(keyframes, [compose(KNOWN, pose) for pose in keyframes])
        for pose in poses:
            np.testing.assert_allclose(compose(fit.transform, pose).center, compose(KNOWN, pose).center, atol=1e-9)

    def test_closure_under_pre_composition(self):
        src = random_poses(7, seed=3)
        dst = [compose(KNOWN, pose) for pose in src]
        pre = SimilarityTransform(0.7, Quaternion.from_axis_angle((1.0, -1.0, 0.5), 1.3), (-2.0, 0.5, 4.0))
        fit = fit_similarity([compose(pre, pose) for pose in src], dst)
        assert_transform_close(fit.transform, pre.inverse().then(KNOWN))

    def test_reflection_is_never_returned(self):
        src = random_poses(6, seed=4)
        mirrored = [pose._replace(translation=(-pose.center[0], pose.center[1], pose.center[2])) for pose in src]
        fit = fit_similarity(src, mirrored)
        assert np.linalg.det(fit.transform.rotation.to_matrix()) == pytest.approx(1.0)

    def test_collinear_centres(self):
        src = collinear_poses(5)
        dst = [compose(KNOWN, pose) for pose in src]
        with pytest.raises(DegenerateConfiguration):
            fit_similarity(src, dst)
        fit = fit_similarity(src, dst, orientation_fallback=True)
        assert_transform_close(fit.transform, KNOWN)

    def test_coincident_centres(self):
        src = [pose._replace(translation=(1.0, 1.0, 1.0)) for pose in random_poses(4)]
        with pytest.raises(DegenerateConfiguration):
            fit_similarity(src, src)
        assert fit_similarity(src, src, orientation_fallback=True).transform.scale == 1.0

    def test_too_few_and_mismatched(self):
        poses = random_poses(4)
        with pytest.raises(DegenerateConfiguration):
            fit_similarity(poses[:2], poses[:2])
        with pytest.raises(CountMismatch):
            fit_similarity(poses, poses[:3])

    def test_random_transforms_are_recovered(self):
        rng = np.random.default_rng(11)
        src = random_poses(6, seed=9)
        for rotation in random_quaternions(500, seed=12):
            truth = SimilarityTransform(float(10.0 ** rng.uniform(-1.0, 1.0)), rotation.normalized(),
                                        tuple(rng.normal(scale=5.0, size=3)))
            fit = fit_similarity(src, [compose(truth, pose) for pose in src])
            assert_transform_close(fit.transform, truth)
            assert fit.residual_rms < 1e-9


class TestChunkPlan:
    @staticmethod
    def _trajectory(seconds: float, fps: float = 30.0) -> Trajectory:
        pose = CameraPose(Quaternion(), (0.0, 0.0, 0.0), INTRINSICS)
        return Trajectory((pose,) * int(seconds * fps), fps)

    def test_twenty_seconds_gives_two_chunks(self):
        traj = self._trajectory(20.0)
        indices = uniform_keyframe_indices(traj.num_frames, 13)
        plan = make_chunk_plan(indices, traj, 10.0)
        assert plan.num_chunks == 2
        assert plan.shared == (6,)
        assert plan.keyframe_ranges == ((0, 6), (6, 12))
        assert plan.chunk_keyframe_indices(0)[-1] == plan.chunk_keyframe_indices(1)[0]

    def test_eight_seconds_is_one_chunk(self):
        traj = self._trajectory(8.0)
        plan = make_chunk_plan(uniform_keyframe_indices(traj.num_frames, 6), traj, 10.0)
        assert plan.num_chunks == 1
        assert plan.shared == ()
        assert plan.frame_ranges == ((0, 240),)

    def test_none_disables_chunking(self):
        traj = self._trajectory(40.0)
        assert make_chunk_plan(uniform_keyframe_indices(traj.num_frames, 20), traj, None).num_chunks == 1

    @pytest.mark.parametrize("seconds, count, duration", [(20.0, 13, 10.0), (35.0, 30, 10.0), (12.0, 9, 3.0),
                                                         (20.0, 3, 10.0), (60.0, 35, 10.0)])
    def test_every_frame_in_exactly_one_chunk(self, seconds, count, duration):
        traj = self._trajectory(seconds)
        indices = uniform_keyframe_indices(traj.num_frames, count)
        plan = make_chunk_plan(indices, traj, duration)
        assert plan.frame_ranges[0][0] == 0 and plan.frame_ranges[-1][1] == traj.num_frames
        for (_, stop), (start, _) in zip(plan.frame_ranges, plan.frame_ranges[1:]):
            assert start == stop
        assignment = assign_frames_to_chunks(traj.num_frames, plan.frame_ranges)
        assert np.bincount(assignment).sum() == traj.num_frames
        gap = max(np.diff(indices)) / traj.fps
        for chunk in range(plan.num_chunks):
            first, last = plan.chunk_keyframe_indices(chunk)[0], plan.chunk_keyframe_indices(chunk)[-1]
            assert (last - first) / traj.fps < duration + gap
            # boundary keyframe frames belong to the earlier chunk
            if chunk + 1 < plan.num_chunks:
                assert assignment[last] == chunk

    def test_json_round_trip(self):
        traj = self._trajectory(20.0)
        plan = make_chunk_plan(uniform_keyframe_indices(traj.num_frames, 13), traj)
        assert ChunkPlan.from_json(plan.to_json()) == plan

    def test_invalid_indices(self):
        traj = self._trajectory(2.0)
        with pytest.raises(ValueError):
            make_chunk_plan([0, 5, 5], traj)
        with pytest.raises(ValueError):
            make_chunk_plan([0, 60], traj)
        with pytest.raises(ValueError):
            make_chunk_plan([0, 30], traj, 0.0)


class TestAlignChunks:
    @staticmethod
    def _setup():
        traj = Trajectory(tuple(random_poses(40, seed=5, spread=3.0)), 2.0)
        plan = make_chunk_plan(uniform_keyframe_indices(traj.num_frames, 8), traj, 10.0)
        assert plan.num_chunks == 2
        return traj, plan

    @staticmethod
    def _inputs(traj, plan, chunk):
        return [traj.poses[index] for index in plan.chunk_keyframe_indices(chunk)]

    def test_pre_aligned_chunks(self):
        traj, plan = self._setup()
        chunks = [ChunkReconstruction(GaussianScene.empty(), tuple(self._inputs(traj, plan, chunk)))
                  for chunk in range(plan.num_chunks)]
        aligned = align_chunks(plan, chunks, traj)
        for transform in aligned.transforms + aligned.corrections:
            assert_transform_close(transform, SimilarityTransform.identity(), atol=1e-8)
        assert max(aligned.boundary_mismatch) < 1e-9

    def test_misaligned_second_chunk(self):
        traj, plan = self._setup()
        frame = SimilarityTransform(1.3, Quaternion.from_axis_angle((0.0, 0.0, 1.0), math.radians(15.0)),
                                    (0.5, -1.0, 2.0))
        noise = np.random.default_rng(6).normal(scale=0.01, size=(len(self._inputs(traj, plan, 1)), 3))
        second = tuple(compose(frame, pose)._replace(translation=tuple(compose(frame, pose).center + offset))
                       for pose, offset in zip(self._inputs(traj, plan, 1), noise))
        chunks = [ChunkReconstruction(GaussianScene.empty(), tuple(self._inputs(traj, plan, 0))),
                  ChunkReconstruction(GaussianScene.empty(), second)]
        aligned = align_chunks(plan, chunks, traj)
        assert aligned.boundary_mismatch[0] < 1e-6
        shared = traj.poses[plan.keyframe_indices[plan.shared[0]]]
        mapped = compose(aligned.transforms[1], shared)
        assert mapped.rotation.is_close(second[0].rotation, atol=1e-6)
        assert aligned.transforms[1].scale == pytest.approx(1.3, rel=0.05)
        assert aligned.corrections[1].scale == 1.0

    def test_shared_pose_renders_continue_across_chunks(self, small_room):
        intrinsics = Intrinsics.from_fov(RESOLUTION)
        eyes = [(2.5 * math.cos(angle), 2.5 * math.sin(angle), 1.4) for angle in np.linspace(0.0, math.pi, 12)]
        traj = Trajectory(tuple(look_at(eye, (0.0, 0.0, 1.0), intrinsics) for eye in eyes), 1.0)
        plan = make_chunk_plan(uniform_keyframe_indices(traj.num_frames, 7), traj, 6.0)
        assert plan.num_chunks == 2
        keyframes = oracle_keyframes(small_room, [traj.poses[index] for index in plan.keyframe_indices],
                                     resolution=RESOLUTION, indices=plan.keyframe_indices)
        scene = reconstruct(keyframes, default_voxel_size(*small_room.bounds()))
        frame = SimilarityTransform(1.7, Quaternion.from_axis_angle((1.0, 0.5, -0.2), 0.8), (3.0, -2.0, 0.5))
        chunks = [ChunkReconstruction(scene, tuple(self._inputs(traj, plan, 0))),
                  ChunkReconstruction(scene.transformed(frame),
                                      tuple(compose(frame, pose) for pose in self._inputs(traj, plan, 1)))]
        aligned = align_chunks(plan, chunks, traj)
        assert aligned.boundary_mismatch[0] < 1e-6
        shared = traj.poses[plan.keyframe_indices[plan.shared[0]]]
        before, after = (render(aligned.scenes[chunk], compose(aligned.transforms[chunk], shared), RESOLUTION).color
                         for chunk in range(2))
        assert np.abs(before - after).mean() < 2.0 / 255.0

    def test_degenerate_chunk_reports_index(self):
        poses = collinear_poses(20)
        traj = Trajectory(tuple(random_poses(20, seed=1, spread=3.0)[:9] + poses[9:]), 1.0)
        plan = make_chunk_plan([0, 4, 9, 12, 15, 19], traj, 10.0)
        chunks = [ChunkReconstruction(GaussianScene.empty(), tuple(self._inputs(traj, plan, chunk)))
                  for chunk in range(plan.num_chunks)]
        with pytest.raises(DegenerateConfiguration) as error:
            align_chunks(plan, chunks, traj, orientation_fallback=False)
        assert error.value.chunk_index == 1

    def test_count_mismatch(self):
        traj, plan = self._setup()
        with pytest.raises(CountMismatch):
            align_chunks(plan, [ChunkReconstruction(GaussianScene.empty(), ())], traj)

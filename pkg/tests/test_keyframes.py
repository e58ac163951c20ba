import json
import math

import numpy as np
import pytest

from errors import InvalidCount
from geometry import CameraPose, Intrinsics, Quaternion, unproject_pixels
from keyframes import (GenerationBatch, coverage_keyframes, coverage_mask, coverage_ratio, make_keyframe_plan,
                       plan_generation_batches, select_keyframes, uniform_keyframe_indices, validate_schedule)
from scene_synth import PointCloud, SceneRecipe, generate_trajectory, pixel_grid, recipe_bounds

GRID = (10, 10)
GRID_POSE = CameraPose(Quaternion(), (0.0, 0.0, 0.0), Intrinsics(10.0, 10.0, 0.0, 0.0))


def plane_points(pose: CameraPose, resolution, depth: float = 1.0, rows=None) -> np.ndarray:
    """One point per pixel centre, unprojected to a fronto-parallel plane."""
    pixels = pixel_grid(resolution).astype(np.float64)
    if rows is not None:
        pixels = pixels[np.isin(pixels[:, 1], rows)]
    return unproject_pixels(pixels, np.full(len(pixels), depth), pose)


class TestCoverageRatio:
    def test_empty_cloud(self, identity_pose, resolution):
        assert coverage_ratio(PointCloud.empty(), identity_pose, resolution, 2) == 0.0

    def test_points_behind_camera(self, identity_pose, resolution):
        points = plane_points(identity_pose, resolution) * np.array([1.0, 1.0, -1.0])
        assert coverage_ratio(PointCloud(points), identity_pose, resolution, 2) == 0.0

    def test_full_plane(self, identity_pose, resolution):
        sparse = plane_points(identity_pose, resolution)[::2]
        assert coverage_ratio(PointCloud(sparse), identity_pose, resolution, 2) == 1.0

    def test_single_point_footprint(self, identity_pose, resolution):
        mask = coverage_mask(np.array([[0.0, 0.0, 2.0]]), identity_pose, resolution, splat_radius_px=2)
        assert mask.sum() == 25
        assert mask[22:27, 30:35].all()

    def test_negative_radius(self, identity_pose, resolution):
        with pytest.raises(ValueError):
            coverage_mask(np.zeros((1, 3)), identity_pose, resolution, splat_radius_px=-1)

    def test_observed_mask_normalises(self, identity_pose, resolution):
        observed = np.zeros((48, 64), dtype=bool)
        observed[:, :32] = True
        points = plane_points(identity_pose, resolution)
        half = PointCloud(points[points[:, 0] < -0.005])
        assert coverage_ratio(half, identity_pose, resolution, 0, observed) == pytest.approx(1.0)
        assert coverage_ratio(half, identity_pose, resolution, 0) == pytest.approx(0.5)

    def test_depth_test_drops_occluded_points(self, identity_pose, resolution):
        behind = PointCloud(plane_points(identity_pose, resolution, depth=3.0))
        in_front = PointCloud(plane_points(identity_pose, resolution, depth=0.5))
        surface = np.ones((48, 64))
        assert coverage_ratio(behind, identity_pose, resolution, 0) == 1.0
        assert coverage_ratio(behind, identity_pose, resolution, 0, depth_map=surface) == 0.0
        assert coverage_ratio(in_front, identity_pose, resolution, 0, depth_map=surface) == 1.0
        assert coverage_ratio(behind, identity_pose, resolution, 0, depth_map=np.zeros((48, 64))) == 1.0


class TestSelectKeyframes:
    def test_hand_traced_selection(self):
        first = PointCloud(plane_points(GRID_POSE, GRID, rows=range(8)))
        second = PointCloud(plane_points(GRID_POSE, GRID, rows=[8, 9]))
        third = PointCloud(plane_points(GRID_POSE, GRID, rows=[0]))
        report = select_keyframes([first, second, third], [GRID_POSE] * 3, 0.9, GRID, 0)
        assert report.ratios == pytest.approx((1.0, 0.8, 1.0))
        assert report.selected_indices == [0, 1]

    def test_without_merge_third_frame_would_be_selected(self):
        first = PointCloud(plane_points(GRID_POSE, GRID, rows=range(8)))
        assert coverage_ratio(first, GRID_POSE, GRID, 0) == pytest.approx(0.8)

    def test_tau_zero_selects_first_only(self, small_room, resolution):
        report = self._room_report(small_room, resolution, 0.0)
        assert report.selected_indices == [0]

    def test_tau_above_one_selects_all(self, small_room, resolution):
        report = self._room_report(small_room, resolution, 1.01)
        assert report.count == len(report.selected)

    def test_unselected_frames_meet_threshold(self, small_room, resolution):
        report = self._room_report(small_room, resolution, 0.9)
        assert report.selected[0] and report.ratios[0] == 1.0
        for ratio, selected in zip(report.ratios, report.selected):
            assert selected or ratio >= 0.9
        assert json.loads(json.dumps(report.to_json()))["selected"] == report.selected_indices

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            select_keyframes([], [], 0.9, GRID)
        with pytest.raises(ValueError):
            select_keyframes([PointCloud.empty()], [GRID_POSE], 1.5, GRID)

    @staticmethod
    def _room_report(scene, resolution, tau):
        traj = generate_trajectory("orbit", 2.0, 4.0, 0, recipe_bounds(SceneRecipe("room")), resolution,
                                   sweep_deg=180.0)
        return coverage_keyframes(scene, traj, tau, resolution, stride=2)


class TestUniformIndices:
    def test_endpoints(self):
        assert uniform_keyframe_indices(10, 2) == [0, 9]

    def test_thirds(self):
        assert uniform_keyframe_indices(9, 3) == [0, 4, 8]

    def test_gap_bound(self):
        indices = uniform_keyframe_indices(600, 35)
        assert len(indices) == 35
        assert indices[0] == 0 and indices[-1] == 599
        assert np.all(np.diff(indices) > 0)
        assert np.diff(indices).max() <= math.ceil(599 / 34)

    def test_halves_round_up(self):
        assert uniform_keyframe_indices(4, 3) == [0, 2, 3]

    @pytest.mark.parametrize("n_frames, count", [(10, 1), (5, 6), (1, 2)])
    def test_invalid_count(self, n_frames, count):
        with pytest.raises(InvalidCount):
            uniform_keyframe_indices(n_frames, count)


class TestGenerationBatches:
    def test_full_window_is_one_batch(self):
        batches = plan_generation_batches(8, 8)
        assert len(batches) == 1
        assert batches[0].targets == tuple(range(8))
        assert batches[0].conditioning == ()

    def test_under_capacity(self):
        batches = plan_generation_batches(4, 8)
        assert [batch.targets for batch in batches] == [(0, 1, 2, 3)]

    def test_fourteen_keyframes(self):
        batches = plan_generation_batches(14, 8)
        assert batches[0].targets == (0, 2, 4, 6, 7, 9, 11, 13)
        for batch in batches[1:]:
            assert len(batch.targets) <= 6
            assert len(batch.conditioning) == 2
            assert batch.conditioning[0] < min(batch.targets) and batch.conditioning[1] > max(batch.targets)
        validate_schedule(batches, 14, 8)

    @pytest.mark.parametrize("count", range(1, 60))
    @pytest.mark.parametrize("window", [2, 3, 8])
    def test_schedule_is_valid(self, count, window):
        validate_schedule(plan_generation_batches(count, window), count, window)

    def test_long_runs_fill_left_to_right(self):
        batches = plan_generation_batches(40, 4)
        assert batches[0].targets == (0, 13, 26, 39)
        assert batches[1] == ((1, 2), (0, 13))
        assert batches[2] == ((3, 4), (2, 13))

    def test_validator_rejects_bad_schedules(self):
        with pytest.raises(ValueError):
            validate_schedule([GenerationBatch((1,), (0,)), GenerationBatch((0,), ())], 2, 8)
        with pytest.raises(ValueError):
            validate_schedule([GenerationBatch((0, 1), ()), GenerationBatch((1,), (0,))], 2, 8)
        with pytest.raises(ValueError):
            validate_schedule([GenerationBatch((0,), ())], 2, 8)

    def test_invalid_arguments(self):
        with pytest.raises(InvalidCount):
            plan_generation_batches(0)
        with pytest.raises(ValueError):
            plan_generation_batches(5, 1)


class TestKeyframePlan:
    def test_plan_json(self):
        plan = make_keyframe_plan(600, 14)
        data = json.loads(json.dumps(plan.to_json()))
        assert set(data) == {"count", "indices", "batches"}
        assert data["indices"][0] == 0 and data["indices"][-1] == 599
        assert data["batches"][0]["conditioning"] == []

    def test_single_frame(self):
        plan = make_keyframe_plan(1, 3)
        assert plan.indices == (0,)
        assert plan.count == 1

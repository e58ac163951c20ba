import logging
from typing import List, NamedTuple, Optional, Sequence, Tuple

import cv2
import numpy as np
from tqdm import tqdm

import constants
from errors import InvalidCount
from geometry import CameraPose, Trajectory, in_frustum, project_points
from renderer import render
from scene_synth import GaussianScene, PointCloud, points_from_frame

logger = logging.getLogger(__name__)

DEPTH_TEST_TOLERANCE = 0.05


class CoverageReport(NamedTuple):
    tau: float
    ratios: Tuple[float, ...]
    selected: Tuple[bool, ...]

    @property
    def selected_indices(self) -> List[int]:
        return [index for index, flag in enumerate(self.selected) if flag]

    @property
    def count(self) -> int:
        return sum(self.selected)

    def to_json(self) -> dict:
        return {"tau": self.tau, "ratios": list(self.ratios), "selected": self.selected_indices}


class GenerationBatch(NamedTuple):
    targets: Tuple[int, ...]
    conditioning: Tuple[int, ...]


class KeyframePlan(NamedTuple):
    count: int
    indices: Tuple[int, ...]
    batches: Tuple[GenerationBatch, ...]

    def to_json(self) -> dict:
        return {"count": self.count, "indices": list(self.indices),
                "batches": [{"targets": list(batch.targets), "conditioning": list(batch.conditioning)}
                            for batch in self.batches]}


def coverage_mask(points: np.ndarray, pose: CameraPose, resolution: Tuple[int, int],
                  splat_radius_px: int = constants.SPLAT_RADIUS_PX,
                  depth_map: Optional[np.ndarray] = None,
                  depth_tolerance: float = DEPTH_TEST_TOLERANCE) -> np.ndarray:
    """
    (H, W) bool mask of pixels marked by the (2r + 1)^2 footprint of every in-frustum
    point. With `depth_map`, points further than the surface seen at their pixel
    (by more than `depth_tolerance`, relative) are occluded and mark nothing.
    """
    if splat_radius_px < 0:
        raise ValueError("splat_radius_px must be non-negative")
    width, height = resolution
    mask = np.zeros((height, width), dtype=np.uint8)
    if len(points) == 0:
        return mask.astype(bool)

    pixels, depth = project_points(points, pose)
    inside = in_frustum(pixels, depth, resolution)
    # pixel centres sit on integer coordinates, as in the rasterizer
    columns = np.minimum(np.floor(pixels[inside, 0] + 0.5).astype(np.int64), width - 1)
    rows = np.minimum(np.floor(pixels[inside, 1] + 0.5).astype(np.int64), height - 1)
    if depth_map is not None:
        surface = depth_map[rows, columns]
        visible = (surface <= 0.0) | (depth[inside] <= surface * (1.0 + depth_tolerance))
        rows, columns = rows[visible], columns[visible]
    mask[rows, columns] = 1
    if splat_radius_px > 0 and len(rows):
        kernel = np.ones((2 * splat_radius_px + 1, 2 * splat_radius_px + 1), dtype=np.uint8)
        mask = cv2.dilate(mask, kernel)
    return mask.astype(bool)


def coverage_ratio(cloud: PointCloud, pose: CameraPose, resolution: Tuple[int, int],
                   splat_radius_px: int = constants.SPLAT_RADIUS_PX,
                   observed: Optional[np.ndarray] = None,
                   depth_map: Optional[np.ndarray] = None) -> float:
    mask = coverage_mask(cloud.points, pose, resolution, splat_radius_px, depth_map)
    if observed is None:
        return float(mask.sum()) / mask.size
    total = int(observed.sum())
    if total == 0:
        return 1.0
    return float((mask & observed).sum()) / total


def select_keyframes(clouds: Sequence[PointCloud], poses: Sequence[CameraPose], tau: float,
                     resolution: Tuple[int, int],
                     splat_radius_px: int = constants.SPLAT_RADIUS_PX,
                     observed_masks: Optional[Sequence[np.ndarray]] = None,
                     depth_maps: Optional[Sequence[np.ndarray]] = None) -> CoverageReport:
    """
    Greedy coverage selection: frame 0 seeds the accumulated cloud; every later frame
    is tested against the cloud accumulated so far and joins the selection (and the
    cloud) when its coverage falls below tau.
    """
    if not clouds or len(clouds) != len(poses):
        raise ValueError("select_keyframes needs one cloud per pose and at least one frame")
    if not 0.0 <= tau <= 1.01:
        raise ValueError("tau must lie in [0, 1.01], got {}".format(tau))

    ratios = [1.0]
    selected = [True]
    accumulated = [clouds[0].points]
    merged = clouds[0].points
    for index in range(1, len(clouds)):
        if len(accumulated) > 1:
            merged = np.concatenate(accumulated, axis=0)
            accumulated = [merged]
        observed = None if observed_masks is None else observed_masks[index]
        depth_map = None if depth_maps is None else depth_maps[index]
        ratio = coverage_ratio(PointCloud(merged), poses[index], resolution, splat_radius_px, observed, depth_map)
        ratios.append(ratio)
        is_key = ratio < tau
        selected.append(is_key)
        if is_key:
            accumulated.append(clouds[index].points)

    report = CoverageReport(float(tau), tuple(ratios), tuple(selected))
    logger.debug("Selected %d of %d frames at tau=%.3f", report.count, len(selected), tau)
    return report


class FrameObservations(NamedTuple):
    clouds: List[PointCloud]
    observed: List[np.ndarray]  # alpha >= 0.5
    depths: List[np.ndarray]


def frame_clouds(scene: GaussianScene, traj: Trajectory, resolution: Tuple[int, int],
                 stride: int = constants.POINT_STRIDE,
                 settings: constants.RenderSettings = constants.DEFAULT_RENDER_SETTINGS,
                 progress: bool = False) -> FrameObservations:
    """Visible-point clouds, observed masks and depth maps for every pose of a trajectory."""
    observations = FrameObservations([], [], [])
    for index, pose in enumerate(tqdm(traj.poses, desc="visible points", disable=not progress)):
        frame = render(scene, pose, resolution, settings)
        observations.clouds.append(points_from_frame(frame, pose, stride, index))
        observations.observed.append(frame.alpha >= constants.VALID_ALPHA)
        observations.depths.append(np.where(frame.alpha >= constants.VALID_ALPHA, frame.depth, 0.0))
    return observations


def coverage_keyframes(scene: GaussianScene, traj: Trajectory, tau: float = constants.DEFAULT_TAU,
                       resolution: Tuple[int, int] = constants.DEFAULT_RESOLUTION,
                       stride: int = constants.POINT_STRIDE,
                       splat_radius_px: int = constants.SPLAT_RADIUS_PX,
                       observed_only: bool = True,
                       settings: constants.RenderSettings = constants.DEFAULT_RENDER_SETTINGS,
                       progress: bool = False,
                       depth_test: bool = False) -> CoverageReport:
    observations = frame_clouds(scene, traj, resolution, stride, settings, progress)
    return select_keyframes(observations.clouds, traj.poses, tau, resolution, splat_radius_px,
                            observations.observed if observed_only else None,
                            observations.depths if depth_test else None)


def uniform_keyframe_indices(n_frames: int, count: int) -> List[int]:
    """round(j * (n - 1) / (K - 1)) with halves rounded up, in integer arithmetic."""
    if count < 2 or count > n_frames:
        raise InvalidCount("Keyframe count {} outside [2, {}]".format(count, n_frames))
    span = n_frames - 1
    return [(2 * j * span + (count - 1)) // (2 * (count - 1)) for j in range(count)]


def plan_generation_batches(count: int, window: int = constants.CONTEXT_WINDOW) -> List[GenerationBatch]:
    """
    Two-stage schedule over keyframe positions 0..K-1. The first batch generates
    `window` uniformly spread keyframes from the input image alone; each remaining
    run between two generated keyframes is filled left to right in batches
    conditioned on the nearest generated keyframe on either side.
    """
    if count < 1:
        raise InvalidCount("Keyframe count must be positive, got {}".format(count))
    if window < 2:
        raise ValueError("Context window must be at least 2, got {}".format(window))
    if count <= window:
        return [GenerationBatch(tuple(range(count)), ())]

    first = uniform_keyframe_indices(count, window)
    batches = [GenerationBatch(tuple(first), ())]
    generated = np.zeros(count, dtype=bool)
    generated[first] = True

    position = 0
    while position < count:
        if generated[position]:
            position += 1
            continue
        left = position - 1
        right = position
        while not generated[right]:
            right += 1
        # a two-frame window only has room for the left neighbour
        conditioning = (left, right) if window > 2 else (left,)
        capacity = window - len(conditioning)
        targets = tuple(range(position, min(position + capacity, right)))
        batches.append(GenerationBatch(targets, conditioning))
        generated[list(targets)] = True
        position = targets[-1] + 1
    return batches


def make_keyframe_plan(n_frames: int, count: int, window: int = constants.CONTEXT_WINDOW) -> KeyframePlan:
    if n_frames == 1 and count >= 1:
        return KeyframePlan(1, (0,), (GenerationBatch((0,), ()),))
    indices = uniform_keyframe_indices(n_frames, count)
    return KeyframePlan(count, tuple(indices), tuple(plan_generation_batches(count, window)))


def validate_schedule(batches: Sequence[GenerationBatch], count: int, window: int) -> None:
    """Raises ValueError unless every position is generated once, after its conditioners."""
    generated = set()
    for batch in batches:
        if len(batch.targets) + len(batch.conditioning) > window:
            raise ValueError("Batch {} exceeds the context window {}".format(batch, window))
        missing = [index for index in batch.conditioning if index not in generated]
        if missing:
            raise ValueError("Conditioning keyframes {} not generated yet".format(missing))
        repeated = generated.intersection(batch.targets)
        if repeated:
            raise ValueError("Keyframes {} generated twice".format(sorted(repeated)))
        generated.update(batch.targets)
    if generated != set(range(count)):
        raise ValueError("Schedule misses keyframes {}".format(sorted(set(range(count)) - generated)))

"""
Reconstruction stand-in (keyframe depths fused into per-voxel gaussians),
similarity alignment of the input trajectory to each reconstruction and
temporal chunking with exact shared-keyframe stitching.
"""
import logging
import math
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import constants
from errors import CountMismatch, DegenerateConfiguration, NoValidDepth
from geometry import (CameraPose, Quaternion, SimilarityTransform, Trajectory, average_quaternions, compose,
                      quat_from_rotation_matrix, unproject_pixels)
from scene_synth import GaussianScene, pixel_grid

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-9


class SimilarityFit(NamedTuple):
    transform: SimilarityTransform
    residual_rms: float
    residuals: np.ndarray


class ChunkPlan(NamedTuple):
    keyframe_indices: Tuple[int, ...]  # dense indices of all keyframes
    keyframe_ranges: Tuple[Tuple[int, int], ...]  # inclusive positions into keyframe_indices
    shared: Tuple[int, ...]  # positions of keyframes shared by consecutive chunks
    frame_ranges: Tuple[Tuple[int, int], ...]  # half-open dense frame ranges

    @property
    def num_chunks(self) -> int:
        return len(self.keyframe_ranges)

    def chunk_positions(self, chunk: int) -> List[int]:
        first, last = self.keyframe_ranges[chunk]
        return list(range(first, last + 1))

    def chunk_keyframe_indices(self, chunk: int) -> List[int]:
        return [self.keyframe_indices[position] for position in self.chunk_positions(chunk)]

    def to_json(self) -> dict:
        return {"keyframe_indices": list(self.keyframe_indices),
                "keyframe_ranges": [list(r) for r in self.keyframe_ranges],
                "shared": list(self.shared),
                "frame_ranges": [list(r) for r in self.frame_ranges]}

    @classmethod
    def from_json(cls, data: dict) -> "ChunkPlan":
        return cls(tuple(data["keyframe_indices"]), tuple(tuple(r) for r in data["keyframe_ranges"]),
                   tuple(data["shared"]), tuple(tuple(r) for r in data["frame_ranges"]))


class ChunkReconstruction(NamedTuple):
    scene: GaussianScene
    estimated_poses: Tuple[CameraPose, ...]  # the chunk's keyframes, expressed in the chunk's frame


class AlignedReconstruction(NamedTuple):
    plan: ChunkPlan
    scenes: Tuple[GaussianScene, ...]
    transforms: Tuple[SimilarityTransform, ...]  # input trajectory frame -> chunk frame, corrections included
    corrections: Tuple[SimilarityTransform, ...]
    residuals: Tuple[np.ndarray, ...]  # per-keyframe centre error of each chunk after correction
    boundary_mismatch: Tuple[float, ...]  # per shared keyframe


def default_voxel_size(lo: np.ndarray, hi: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(hi) - np.asarray(lo))) / constants.VOXELS_PER_DIAGONAL


def _keyframe_points(keyframe) -> Tuple[np.ndarray, np.ndarray]:
    height, width = keyframe.alpha.shape
    pixels = pixel_grid((width, height))
    alpha = keyframe.alpha.reshape(-1)
    depth = keyframe.depth.reshape(-1).astype(np.float64)
    valid = (alpha >= constants.VALID_ALPHA) & np.isfinite(depth) & (depth > constants.NEAR_PLANE)
    points = unproject_pixels(pixels[valid].astype(np.float64), depth[valid], keyframe.pose)
    colors = keyframe.image.reshape(-1, 3)[valid].astype(np.float64)
    return points, colors


def reconstruct(keyframes: Sequence, voxel_size: Optional[float] = None,
                background=(0.0, 0.0, 0.0), opacity: float = constants.RECONSTRUCTED_OPACITY) -> GaussianScene:
    """
    Fuses keyframes (objects with `image`, `depth`, `alpha` and `pose`) into one
    isotropic gaussian per occupied voxel. Points inside a voxel are reduced in
    coordinate order, so the result does not depend on keyframe order.
    """
    if not keyframes:
        raise ValueError("reconstruct needs at least one keyframe")
    parts = [_keyframe_points(keyframe) for keyframe in keyframes]
    points = np.concatenate([part[0] for part in parts], axis=0)
    colors = np.concatenate([part[1] for part in parts], axis=0)
    if len(points) == 0:
        raise NoValidDepth("No keyframe pixel has valid depth")

    if voxel_size is None:
        voxel_size = default_voxel_size(points.min(axis=0), points.max(axis=0))
    voxel_size = max(voxel_size, constants.EPSILON)

    keys = np.floor(points / voxel_size).astype(np.int64)
    order = np.lexsort((colors[:, 2], colors[:, 1], colors[:, 0],
                        points[:, 2], points[:, 1], points[:, 0],
                        keys[:, 2], keys[:, 1], keys[:, 0]))
    keys, points, colors = keys[order], points[order], colors[order]
    starts = np.flatnonzero(np.concatenate([[True], np.any(keys[1:] != keys[:-1], axis=1)]))
    counts = np.diff(np.append(starts, len(keys))).astype(np.float64)

    centroids = np.add.reduceat(points, starts, axis=0) / counts[:, None]
    mean_colors = np.add.reduceat(colors, starts, axis=0) / counts[:, None]
    spread = np.add.reduceat(points * points, starts, axis=0) / counts[:, None] - centroids ** 2
    point_std = np.sqrt(np.maximum(spread, 0.0).mean(axis=1))
    scales = np.maximum(voxel_size / 2.0, point_std)

    n_voxels = len(starts)
    scene = GaussianScene(centroids, np.repeat(scales[:, None], 3, axis=1),
                          np.tile((1.0, 0.0, 0.0, 0.0), (n_voxels, 1)), np.full(n_voxels, opacity),
                          np.clip(mean_colors, 0.0, 1.0), background)
    logger.debug("Reconstructed %d gaussians from %d points (voxel %.4f)", n_voxels, len(points), voxel_size)
    return scene


def _relative_rotation(src: Sequence[CameraPose], dst: Sequence[CameraPose]) -> Quaternion:
    return average_quaternions([b.rotation.multiply(a.rotation.conjugate()) for a, b in zip(src, dst)])


def fit_similarity(src: Sequence[CameraPose], dst: Sequence[CameraPose],
                   orientation_fallback: bool = False) -> SimilarityFit:
    """
    Least-squares similarity S with S(c_src) ~ c_dst over camera centres (Umeyama).
    When the centres are collinear the rotation about their line is unobservable;
    with `orientation_fallback` the rotation comes from the mean relative camera
    orientation and the scale from the centre spread, otherwise the configuration
    is rejected. Coincident centres are only accepted with the fallback (scale 1).
    """
    if len(src) != len(dst):
        raise CountMismatch("fit_similarity got {} source and {} target poses".format(len(src), len(dst)))
    if len(src) < (1 if orientation_fallback else 3):
        raise DegenerateConfiguration("Need at least 3 poses for a similarity fit, got {}".format(len(src)))

    source = np.array([pose.center for pose in src])
    target = np.array([pose.center for pose in dst])
    source_mean, target_mean = source.mean(axis=0), target.mean(axis=0)
    x = source - source_mean
    y = target - target_mean

    singular = np.linalg.svd(x, compute_uv=False)
    extent = max(float(singular[0]) if len(singular) else 0.0, float(np.abs(source).max()), 1.0)
    rank = int(np.sum(singular > RANK_TOLERANCE * extent))

    if rank >= 2:
        covariance = y.T @ x / len(src)
        u, d, vt = np.linalg.svd(covariance)
        sign = np.eye(3)
        sign[2, 2] = np.sign(np.linalg.det(u) * np.linalg.det(vt)) or 1.0
        rotation_matrix = u @ sign @ vt
        variance = np.mean(np.sum(x * x, axis=1))
        scale = float(np.trace(np.diag(d) @ sign) / variance)
        rotation = quat_from_rotation_matrix(rotation_matrix)
    elif not orientation_fallback:
        what = "collinear" if rank == 1 else "coincident"
        raise DegenerateConfiguration("Camera centres are {}".format(what))
    else:
        rotation = _relative_rotation(src, dst)
        source_spread = float(np.linalg.norm(x))
        scale = float(np.linalg.norm(y)) / source_spread if rank == 1 else 1.0
        rotation_matrix = rotation.to_matrix()

    translation = target_mean - scale * rotation_matrix @ source_mean
    transform = SimilarityTransform(scale, rotation.canonical(), tuple(float(v) for v in translation))
    residuals = np.linalg.norm(transform.apply_points(source) - target, axis=1)
    return SimilarityFit(transform, float(np.sqrt(np.mean(residuals ** 2))), residuals)


def make_chunk_plan(keyframe_indices: Sequence[int], traj: Trajectory,
                    chunk_duration_s: Optional[float] = constants.CHUNK_DURATION_S) -> ChunkPlan:
    """
    Balanced temporal partition: ceil(span / duration) chunks whose boundaries are
    the keyframes nearest to evenly spaced target times (earlier keyframe on ties).
    A span that is not an exact multiple of the duration can leave a chunk longer
    than `chunk_duration_s` by less than one keyframe gap. None means one chunk.
    """
    indices = [int(index) for index in keyframe_indices]
    if not indices or any(b <= a for a, b in zip(indices, indices[1:])):
        raise ValueError("Keyframe indices must be non-empty and strictly increasing")
    if indices[0] < 0 or indices[-1] >= traj.num_frames:
        raise ValueError("Keyframe indices out of trajectory bounds")
    if chunk_duration_s is not None and chunk_duration_s <= 0:
        raise ValueError("chunk_duration_s must be positive")

    times = np.asarray(indices, dtype=np.float64) / traj.fps
    span = times[-1] - times[0]
    n_chunks = 1
    if chunk_duration_s is not None and len(indices) > 2:
        n_chunks = min(max(1, math.ceil(span / chunk_duration_s - 1e-9)), len(indices) - 1)

    boundaries = [0]
    for chunk in range(1, n_chunks):
        target = times[0] + chunk * span / n_chunks
        low, high = boundaries[-1] + 1, len(indices) - 1 - (n_chunks - chunk)
        candidates = np.arange(low, high + 1)
        boundaries.append(int(candidates[np.argmin(np.abs(times[candidates] - target))]))
    boundaries.append(len(indices) - 1)

    keyframe_ranges = tuple((boundaries[j], boundaries[j + 1]) for j in range(n_chunks))
    frame_ranges = []
    for j in range(n_chunks):
        start = 0 if j == 0 else indices[boundaries[j]] + 1
        stop = traj.num_frames if j == n_chunks - 1 else indices[boundaries[j + 1]] + 1
        frame_ranges.append((start, stop))
    plan = ChunkPlan(tuple(indices), keyframe_ranges, tuple(boundaries[1:-1]), tuple(frame_ranges))
    logger.debug("Chunk plan: %s", plan.keyframe_ranges)
    return plan


def boundary_correction(transform: SimilarityTransform, input_pose: CameraPose,
                        estimated_pose: CameraPose) -> SimilarityTransform:
    """Rigid map, in the chunk frame, taking the transformed shared keyframe exactly onto its estimate."""
    mapped = compose(transform, input_pose)
    rotation = estimated_pose.rotation.multiply(mapped.rotation.conjugate()).normalized()
    translation = estimated_pose.center - rotation.to_matrix() @ mapped.center
    return SimilarityTransform(1.0, rotation, tuple(float(v) for v in translation))


def align_chunks(plan: ChunkPlan, chunks: Sequence[ChunkReconstruction], traj: Trajectory,
                 orientation_fallback: bool = True) -> AlignedReconstruction:
    if len(chunks) != plan.num_chunks:
        raise CountMismatch("Plan has {} chunks, got {} reconstructions".format(plan.num_chunks, len(chunks)))

    fitted = []
    for chunk_index, chunk in enumerate(chunks):
        inputs = [traj.poses[index] for index in plan.chunk_keyframe_indices(chunk_index)]
        if len(inputs) != len(chunk.estimated_poses):
            raise CountMismatch("chunk {}: {} keyframes but {} estimated poses".format(
                chunk_index, len(inputs), len(chunk.estimated_poses)))
        try:
            fitted.append(fit_similarity(inputs, chunk.estimated_poses, orientation_fallback).transform)
        except DegenerateConfiguration as error:
            raise DegenerateConfiguration(str(error), chunk_index) from error

    transforms = [fitted[0]]
    corrections = [SimilarityTransform.identity()]
    for chunk_index in range(1, plan.num_chunks):
        shared_index = plan.keyframe_indices[plan.shared[chunk_index - 1]]
        correction = boundary_correction(fitted[chunk_index], traj.poses[shared_index],
                                         chunks[chunk_index].estimated_poses[0])
        corrections.append(correction)
        transforms.append(fitted[chunk_index].then(correction))

    residuals = []
    for chunk_index, chunk in enumerate(chunks):
        inputs = [traj.poses[index] for index in plan.chunk_keyframe_indices(chunk_index)]
        mapped = np.array([compose(transforms[chunk_index], pose).center for pose in inputs])
        estimated = np.array([pose.center for pose in chunk.estimated_poses])
        residuals.append(np.linalg.norm(mapped - estimated, axis=1))
    mismatch = tuple(float(residuals[j][0]) for j in range(1, plan.num_chunks))
    if mismatch:
        logger.debug("Shared keyframe mismatch after correction: %s", mismatch)

    return AlignedReconstruction(plan, tuple(chunk.scene for chunk in chunks), tuple(transforms),
                                 tuple(corrections), tuple(residuals), mismatch)

"""
Procedural ground truth: gaussian scenes, camera trajectories and the oracles
standing in for a reconstruction network's point clouds and a generator's
keyframes. Every generator is a pure function of its parameters and seed.
"""
import logging
import math
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

import constants
from errors import UnknownKind, UnknownRecipe
from geometry import (CameraPose, Intrinsics, Quaternion, SimilarityTransform, Trajectory, look_at,
                      unproject_pixels)
from renderer import render

logger = logging.getLogger(__name__)

RECIPES = ("room", "cloudfield", "checker-plane")
TRAJECTORY_KINDS = ("orbit", "dolly", "smooth-random-walk")
CORRUPTIONS = ("none", "noise", "drift")

Bounds = Tuple[np.ndarray, np.ndarray]


class Gaussian3D(NamedTuple):
    mean: Tuple[float, float, float]
    scale: Tuple[float, float, float]
    orientation: Quaternion
    opacity: float
    color: Tuple[float, float, float]


class GaussianScene:
    """Struct-of-arrays container; every array is float32 so the binary file format round-trips exactly."""

    def __init__(self, means, scales, rotations, opacities, colors, background=(0.0, 0.0, 0.0)):
        self.means = np.ascontiguousarray(means, dtype=np.float32).reshape(-1, 3)
        self.scales = np.ascontiguousarray(scales, dtype=np.float32).reshape(-1, 3)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float32).reshape(-1, 4)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float32).reshape(-1)
        self.colors = np.ascontiguousarray(colors, dtype=np.float32).reshape(-1, 3)
        self.background = np.asarray(background, dtype=np.float32).reshape(3)

        count = self.means.shape[0]
        if not all(array.shape[0] == count for array in (self.scales, self.rotations, self.opacities, self.colors)):
            raise ValueError("Gaussian attribute arrays have inconsistent lengths")
        if count and (self.scales.min() <= 0 or not np.all(np.isfinite(self.means))):
            raise ValueError("Gaussian scales must be positive and means finite")
        if count and (self.opacities.min() < 0 or self.opacities.max() > 1):
            raise ValueError("Gaussian opacities must lie in [0, 1]")

    def __len__(self):
        return self.means.shape[0]

    def __getitem__(self, index: int) -> Gaussian3D:
        return Gaussian3D(tuple(float(v) for v in self.means[index]),
                          tuple(float(v) for v in self.scales[index]),
                          Quaternion(*(float(v) for v in self.rotations[index])),
                          float(self.opacities[index]),
                          tuple(float(v) for v in self.colors[index]))

    @classmethod
    def empty(cls, background=(0.0, 0.0, 0.0)) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)), background)

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D], background=(0.0, 0.0, 0.0)) -> "GaussianScene":
        if not gaussians:
            return cls.empty(background)
        return cls([g.mean for g in gaussians], [g.scale for g in gaussians],
                   [tuple(g.orientation) for g in gaussians], [g.opacity for g in gaussians],
                   [g.color for g in gaussians], background)

    def subset(self, indices) -> "GaussianScene":
        return GaussianScene(self.means[indices], self.scales[indices], self.rotations[indices],
                             self.opacities[indices], self.colors[indices], self.background)

    def bounds(self) -> Bounds:
        return self.means.min(axis=0).astype(np.float64), self.means.max(axis=0).astype(np.float64)

    def transformed(self, transform: SimilarityTransform) -> "GaussianScene":
        means = transform.apply_points(self.means.astype(np.float64))
        rotations = quaternion_products(transform.rotation.as_array(), self.rotations.astype(np.float64))
        return GaussianScene(means, self.scales.astype(np.float64) * transform.scale, rotations,
                             self.opacities, self.colors, self.background)

    def equals(self, other: "GaussianScene") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(
            (self.means, self.scales, self.rotations, self.opacities, self.colors, self.background),
            (other.means, other.scales, other.rotations, other.opacities, other.colors, other.background)))


class PointCloud(NamedTuple):
    points: np.ndarray  # (N, 3)
    frame_indices: Optional[np.ndarray] = None

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def concatenate(cls, clouds: Sequence["PointCloud"]) -> "PointCloud":
        if not clouds:
            return cls.empty()
        points = np.concatenate([cloud.points for cloud in clouds], axis=0)
        if any(cloud.frame_indices is None for cloud in clouds):
            return cls(points)
        return cls(points, np.concatenate([cloud.frame_indices for cloud in clouds]))


class SceneRecipe(NamedTuple):
    name: str = "room"
    primitive_budget: int = 50000
    half_extent: float = 4.0
    height: float = 3.0


class Corruption(NamedTuple):
    kind: str = "none"
    amount: float = 0.0


class Keyframe(NamedTuple):
    index: int
    pose: CameraPose
    image: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    render_pose: CameraPose


def quaternion_products(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = left
    w2, x2, y2, z2 = right[:, 0], right[:, 1], right[:, 2], right[:, 3]
    out = np.stack([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                    w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                    w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                    w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2], axis=1)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def recipe_bounds(recipe: SceneRecipe) -> Bounds:
    if recipe.name not in RECIPES:
        raise UnknownRecipe("Unknown scene recipe '{}', expected one of {}".format(recipe.name, RECIPES))
    half = recipe.half_extent
    top = 0.0 if recipe.name == "checker-plane" else recipe.height
    return np.array([-half, -half, 0.0]), np.array([half, half, top])


def _frames_from_normals(normals: np.ndarray) -> np.ndarray:
    """(w, x, y, z) orientations whose local z axis is each normal."""
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    helper = np.where(np.abs(normals[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    tangent = np.cross(helper, normals)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    bitangent = np.cross(normals, tangent)
    matrices = np.stack([tangent, bitangent, normals], axis=2)
    xyzw = Rotation.from_matrix(matrices).as_quat()
    return xyzw[:, [3, 0, 1, 2]]


def _checker(points: np.ndarray, cell: float) -> np.ndarray:
    return (np.floor(points / cell).astype(np.int64).sum(axis=1) % 2).astype(np.float64)


def _surface(rng, origin, u_axis, v_axis, u_len: float, v_len: float, count: int, base_color) -> dict:
    u_axis, v_axis = np.asarray(u_axis, dtype=np.float64), np.asarray(v_axis, dtype=np.float64)
    n_u = max(1, int(math.floor(math.sqrt(count * u_len / v_len))))
    n_v = max(1, count // n_u)
    step_u, step_v = u_len / n_u, v_len / n_v
    grid_u, grid_v = np.meshgrid((np.arange(n_u) + 0.5) * step_u, (np.arange(n_v) + 0.5) * step_v, indexing="ij")
    means = (np.asarray(origin, dtype=np.float64)
             + grid_u.reshape(-1, 1) * u_axis + grid_v.reshape(-1, 1) * v_axis)
    normal = np.cross(u_axis, v_axis)
    orientation = quat_from_columns(u_axis, v_axis, normal)
    scale = (0.7 * step_u, 0.7 * step_v, 0.02 * min(step_u, step_v))

    shade = 0.55 + 0.45 * _checker(means, 0.5)
    colors = np.asarray(base_color)[None] * shade[:, None] + rng.uniform(-0.05, 0.05, size=(len(means), 3))
    return dict(means=means, scales=np.tile(scale, (len(means), 1)), rotations=np.tile(orientation, (len(means), 1)),
                opacities=np.full(len(means), 0.95), colors=np.clip(colors, 0.0, 1.0))


def quat_from_columns(u_axis, v_axis, normal) -> np.ndarray:
    matrix = np.stack([u_axis, v_axis, normal], axis=1)
    x, y, z, w = Rotation.from_matrix(matrix).as_quat()
    return np.array([w, x, y, z])


def _sphere(rng, center, radius: float, count: int, base_color) -> dict:
    index = np.arange(count) + 0.5
    polar = np.arccos(1.0 - 2.0 * index / count)
    azimuth = math.pi * (1.0 + 5.0 ** 0.5) * index
    normals = np.stack([np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)], axis=1)
    spacing = math.sqrt(4.0 * math.pi * radius * radius / count)
    shade = 0.6 + 0.4 * (np.sin(6.0 * polar) * np.cos(4.0 * azimuth) > 0)
    colors = np.asarray(base_color)[None] * shade[:, None] + rng.uniform(-0.04, 0.04, size=(count, 3))
    return dict(means=np.asarray(center) + radius * normals,
                scales=np.tile((0.7 * spacing, 0.7 * spacing, 0.02 * spacing), (count, 1)),
                rotations=_frames_from_normals(normals), opacities=np.full(count, 0.95),
                colors=np.clip(colors, 0.0, 1.0))


def _merge(parts: List[dict], background) -> GaussianScene:
    return GaussianScene(*(np.concatenate([part[key] for part in parts], axis=0)
                           for key in ("means", "scales", "rotations", "opacities", "colors")),
                         background=background)


def _room(recipe: SceneRecipe, rng) -> GaussianScene:
    half, height = recipe.half_extent, recipe.height
    side = 2.0 * half
    surfaces = [
        ((-half, -half, 0.0), (1, 0, 0), (0, 1, 0), side, side, (0.75, 0.6, 0.45)),  # floor
        ((-half, -half, height), (0, 1, 0), (1, 0, 0), side, side, (0.9, 0.9, 0.85)),  # ceiling
        ((-half, -half, 0.0), (0, 0, 1), (1, 0, 0), height, side, (0.8, 0.35, 0.3)),
        ((half, -half, 0.0), (0, 0, 1), (0, 1, 0), height, side, (0.3, 0.6, 0.8)),
        ((half, half, 0.0), (0, 0, 1), (-1, 0, 0), height, side, (0.4, 0.75, 0.4)),
        ((-half, half, 0.0), (0, 0, 1), (0, -1, 0), height, side, (0.85, 0.8, 0.35)),
    ]
    total_area = sum(u_len * v_len for _, _, _, u_len, v_len, _ in surfaces)
    surface_budget = 0.9 * recipe.primitive_budget
    parts = [_surface(rng, origin, u, v, u_len, v_len, int(surface_budget * u_len * v_len / total_area), color)
             for origin, u, v, u_len, v_len, color in surfaces]

    n_props = 4
    prop_budget = recipe.primitive_budget - int(surface_budget)
    for k in range(n_props):
        radius = rng.uniform(0.25, 0.45) * half / 4.0
        distance = rng.uniform(0.0, 0.375 * half - radius)
        angle = 2.0 * math.pi * k / n_props + rng.uniform(0.0, 0.5)
        center = (distance * math.cos(angle), distance * math.sin(angle), radius + rng.uniform(0.0, 0.6))
        parts.append(_sphere(rng, center, radius, prop_budget // n_props, rng.uniform(0.2, 0.95, size=3)))
    return _merge(parts, background=(0.0, 0.0, 0.0))


def _cloudfield(recipe: SceneRecipe, rng) -> GaussianScene:
    half, height = recipe.half_extent, recipe.height
    n_clusters = 12
    per_cluster = recipe.primitive_budget // n_clusters
    reach = 0.45 * half
    parts = []
    for _ in range(n_clusters):
        center = np.array([rng.uniform(-0.3, 0.3) * half, rng.uniform(-0.3, 0.3) * half,
                           rng.uniform(0.3, 0.7) * height])
        means = center + rng.normal(0.0, 0.06 * half, size=(per_cluster, 3))
        radial = np.linalg.norm(means[:, :2], axis=1, keepdims=True)
        means[:, :2] *= np.minimum(1.0, reach / np.maximum(radial, 1e-9))
        means[:, 2] = np.clip(means[:, 2], 0.0, height)
        rotations = rng.normal(size=(per_cluster, 4))
        rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
        base = rng.uniform(0.1, 1.0, size=3)
        parts.append(dict(means=means, scales=rng.uniform(0.02, 0.08, size=(per_cluster, 3)) * half / 4.0,
                          rotations=rotations, opacities=rng.uniform(0.5, 1.0, size=per_cluster),
                          colors=np.clip(base + rng.normal(0.0, 0.08, size=(per_cluster, 3)), 0.0, 1.0)))
    return _merge(parts, background=(0.05, 0.05, 0.1))


def _checker_plane(recipe: SceneRecipe, rng) -> GaussianScene:
    half = recipe.half_extent
    part = _surface(rng, (-half, -half, 0.0), (1, 0, 0), (0, 1, 0), 2 * half, 2 * half,
                    recipe.primitive_budget, (0.95, 0.95, 0.95))
    part["means"][:, 2] = 0.0
    return _merge([part], background=(0.1, 0.1, 0.15))


def generate_scene(recipe: SceneRecipe, seed: int) -> GaussianScene:
    recipe_bounds(recipe)
    rng = np.random.default_rng(seed)
    builder = {"room": _room, "cloudfield": _cloudfield, "checker-plane": _checker_plane}[recipe.name]
    scene = builder(recipe, rng)
    logger.debug("Generated %s scene (seed %d) with %d gaussians", recipe.name, seed, len(scene))
    return scene


def _capped_step(step_deg: float) -> float:
    if step_deg > constants.MAX_ROTATION_STEP_DEG:
        logger.debug("Capping the per-frame rotation at %.1f degrees", constants.MAX_ROTATION_STEP_DEG)
    return min(step_deg, constants.MAX_ROTATION_STEP_DEG)


def generate_trajectory(kind: str, duration_s: float, fps: float, seed: int, scene_bounds: Bounds,
                        resolution: Tuple[int, int] = constants.DEFAULT_RESOLUTION,
                        fov_deg: float = constants.DEFAULT_FOV_DEG,
                        radius: Optional[float] = None,
                        sweep_deg: float = 180.0,
                        elevation_deg: Optional[float] = None) -> Trajectory:
    if kind not in TRAJECTORY_KINDS:
        raise UnknownKind("Unknown trajectory kind '{}', expected one of {}".format(kind, TRAJECTORY_KINDS))
    if duration_s <= 0 or fps <= 0:
        raise ValueError("duration_s and fps must be positive")

    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(scene_bounds[0], dtype=np.float64), np.asarray(scene_bounds[1], dtype=np.float64)
    pivot = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    reach = min(half[0], half[1])
    planar = half[2] < 1e-6
    intrinsics = Intrinsics.from_fov(resolution, fov_deg)
    n_frames = max(1, int(round(duration_s * fps)))
    times = np.arange(n_frames) / fps

    if kind == "orbit":
        radius = 0.65 * reach if radius is None else radius
        elevation = math.radians((40.0 if planar else 0.0) if elevation_deg is None else elevation_deg)
        start = rng.uniform(0.0, 2.0 * math.pi)
        step = _capped_step(sweep_deg / n_frames)
        angles = start + math.radians(step) * np.arange(n_frames)
        offsets = np.stack([np.cos(elevation) * np.cos(angles), np.cos(elevation) * np.sin(angles),
                            np.full(n_frames, np.sin(elevation))], axis=1)
        poses = [look_at(pivot + radius * offset, pivot, intrinsics) for offset in offsets]

    elif kind == "dolly":
        heading = rng.uniform(0.0, 2.0 * math.pi)
        direction = np.array([math.cos(heading), math.sin(heading), 0.0])
        height = 0.5 * reach if planar else 0.0
        start = pivot - 0.8 * reach * direction + (0.0, 0.0, height)
        end = pivot - 0.45 * reach * direction + (0.0, 0.0, height)
        span = max(n_frames - 1, 1)
        fractions = np.arange(n_frames) / span
        # the view pans across the heading while the camera travels along it
        pan = math.radians(_capped_step(constants.DOLLY_PAN_DEG / span) * span)
        yaw = heading + pan * (fractions - 0.5)
        forwards = np.stack([np.cos(yaw), np.sin(yaw), np.full(n_frames, -0.5 if planar else 0.0)], axis=1)
        poses = [look_at(start + f * (end - start), start + f * (end - start) + forward, intrinsics)
                 for f, forward in zip(fractions, forwards)]

    else:
        frequencies = rng.uniform(0.02, 0.06, size=(4, 3))
        phases = rng.uniform(0.0, 2.0 * math.pi, size=(4, 3))
        amplitudes = rng.uniform(0.25, 0.6, size=3)

        def wave(row: int) -> np.ndarray:
            return sum(np.sin(2.0 * math.pi * frequencies[row, k] * times + phases[row, k]) for k in range(3)) / 3.0

        angles = rng.uniform(0.0, 2.0 * math.pi) + sum(
            amplitudes[k] * np.sin(2.0 * math.pi * frequencies[0, k] * times + phases[0, k]) for k in range(3))
        radii = reach * (0.675 + 0.1 * wave(1))
        heights = np.full(n_frames, 0.5 * reach) if planar else 0.2 * half[2] * wave(2)
        eyes = pivot + np.stack([radii * np.cos(angles), radii * np.sin(angles), heights], axis=1)
        targets = pivot + 0.3 * reach * np.stack([wave(3), np.roll(wave(3), n_frames // 3), np.zeros(n_frames)],
                                                 axis=1)
        poses = [look_at(eye, target, intrinsics) for eye, target in zip(eyes, targets)]

    return Trajectory(tuple(poses), float(fps))


def pixel_grid(resolution: Tuple[int, int], stride: int = 1) -> np.ndarray:
    """(N, 2) pixel centres of a strided grid, one per stride x stride block."""
    width, height = resolution
    offset = stride // 2
    xs, ys = np.meshgrid(np.arange(offset, width, stride), np.arange(offset, height, stride), indexing="xy")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)


def visible_points(scene: GaussianScene, pose: CameraPose, resolution: Tuple[int, int],
                   stride: int = constants.POINT_STRIDE, frame_index: int = 0,
                   settings: constants.RenderSettings = constants.DEFAULT_RENDER_SETTINGS) -> PointCloud:
    frame = render(scene, pose, resolution, settings)
    return points_from_frame(frame, pose, stride, frame_index)


def points_from_frame(frame, pose: CameraPose, stride: int = constants.POINT_STRIDE,
                      frame_index: int = 0) -> PointCloud:
    height, width = frame.alpha.shape
    pixels = pixel_grid((width, height), stride)
    alpha = frame.alpha[pixels[:, 1], pixels[:, 0]]
    depth = frame.depth[pixels[:, 1], pixels[:, 0]].astype(np.float64)
    valid = (alpha >= constants.VALID_ALPHA) & (depth > constants.NEAR_PLANE)
    points = unproject_pixels(pixels[valid].astype(np.float64), depth[valid], pose)
    return PointCloud(points, np.full(len(points), frame_index, dtype=np.int64))


def drift_rotation(axis: np.ndarray, keyframe_position: int, rate: float) -> Quaternion:
    return Quaternion.from_axis_angle(axis, keyframe_position * rate)


def oracle_keyframes(scene: GaussianScene, poses: Sequence[CameraPose],
                     corruption: Corruption = Corruption(),
                     resolution: Tuple[int, int] = constants.DEFAULT_RESOLUTION,
                     seed: int = 0, indices: Optional[Sequence[int]] = None,
                     settings: constants.RenderSettings = constants.DEFAULT_RENDER_SETTINGS) -> List[Keyframe]:
    """
    Ground-truth renders at the given poses. `noise` adds i.i.d. gaussian pixel
    noise of std `amount`; `drift` renders keyframe k from its pose rotated by
    k * `amount` radians about a seeded axis through the camera centre, while the
    keyframe still reports the nominal pose.
    """
    if corruption.kind not in CORRUPTIONS:
        raise UnknownKind("Unknown corruption '{}', expected one of {}".format(corruption.kind, CORRUPTIONS))
    if not poses:
        raise ValueError("oracle_keyframes needs at least one pose")

    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    indices = list(range(len(poses))) if indices is None else list(indices)

    keyframes = []
    for position, pose in enumerate(poses):
        render_pose = pose
        if corruption.kind == "drift" and corruption.amount != 0.0:
            perturbation = drift_rotation(axis, position, corruption.amount)
            render_pose = pose._replace(rotation=perturbation.multiply(pose.rotation).normalized())
        frame = render(scene, render_pose, resolution, settings)
        image = frame.color
        if corruption.kind == "noise" and corruption.amount > 0.0:
            noise = rng.normal(0.0, corruption.amount, size=image.shape)
            image = np.clip(image + noise, 0.0, 1.0).astype(np.float32)
        keyframes.append(Keyframe(indices[position], pose, image, frame.depth, frame.alpha, render_pose))
    return keyframes

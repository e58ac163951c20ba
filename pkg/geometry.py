"""
Rigid-body math shared by every stage: quaternions, camera poses, similarity
transforms, pinhole projection and trajectory interpolation.

Conventions: quaternions are (w, x, y, z); poses are world-from-camera with a
right-handed camera frame looking down +z (x right, y down).
"""
import math
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

import constants
from errors import EmptyTrajectory, InvalidFactor, NonOrthonormalInput

Vector3 = Tuple[float, float, float]


class Quaternion(NamedTuple):
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @classmethod
    def from_array(cls, values) -> "Quaternion":
        values = np.asarray(values, dtype=np.float64)
        norm = np.linalg.norm(values)
        if norm < constants.EPSILON:
            return cls()
        values = values / norm
        return cls(float(values[0]), float(values[1]), float(values[2]), float(values[3]))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        return cls.from_array(np.concatenate([[math.cos(half)], math.sin(half) * axis]))

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)

    def normalized(self) -> "Quaternion":
        return Quaternion.from_array(self.as_array())

    def canonical(self) -> "Quaternion":
        for value in self:
            if abs(value) > constants.EPSILON:
                if value < 0:
                    return Quaternion(-self.w, -self.x, -self.y, -self.z)
                return self
        return self

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def multiply(self, other: "Quaternion") -> "Quaternion":
        w1, x1, y1, z1 = self
        w2, x2, y2, z2 = other
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self
        return Rotation.from_quat([x, y, z, w]).as_matrix()

    def angle_to(self, other: "Quaternion") -> float:
        """Rotation angle (radians) taking this rotation to `other`."""
        return 2.0 * _quaternion_angle(self.normalized().as_array(), other.normalized().as_array())

    def is_close(self, other: "Quaternion", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.canonical().as_array(), other.canonical().as_array(), atol=atol))


class Intrinsics(NamedTuple):
    fx: float
    fy: float
    cx: float
    cy: float

    @classmethod
    def from_fov(cls, resolution: Tuple[int, int], fov_deg: float = constants.DEFAULT_FOV_DEG) -> "Intrinsics":
        width, height = resolution
        focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(focal, focal, width / 2.0, height / 2.0)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


class CameraPose(NamedTuple):
    rotation: Quaternion
    translation: Vector3
    intrinsics: Intrinsics

    @property
    def center(self) -> np.ndarray:
        return np.array(self.translation, dtype=np.float64)

    def rotation_matrix(self) -> np.ndarray:
        return self.rotation.to_matrix()

    def world_to_camera(self) -> Tuple[np.ndarray, np.ndarray]:
        rotation = self.rotation_matrix().T
        return rotation, -rotation @ self.center

    def as_vector7(self) -> np.ndarray:
        return np.concatenate([self.rotation.canonical().as_array(), self.center])


class Trajectory(NamedTuple):
    poses: Tuple[CameraPose, ...]
    fps: float

    @property
    def num_frames(self) -> int:
        return len(self.poses)

    @property
    def duration_s(self) -> float:
        return self.num_frames / self.fps

    def centers(self) -> np.ndarray:
        return np.array([pose.translation for pose in self.poses], dtype=np.float64).reshape(-1, 3)

    def subsample(self, fps: float) -> "Trajectory":
        """Every k-th pose so that the frame rate drops to at most `fps`."""
        step = max(1, int(round(self.fps / fps)))
        return Trajectory(tuple(self.poses[::step]), self.fps / step)

    def reversed(self) -> "Trajectory":
        return Trajectory(tuple(reversed(self.poses)), self.fps)


class SimilarityTransform(NamedTuple):
    scale: float = 1.0
    rotation: Quaternion = Quaternion()
    translation: Vector3 = (0.0, 0.0, 0.0)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.scale * self.rotation.to_matrix()
        out[:3, 3] = self.translation
        return out

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.to_matrix().T + np.asarray(self.translation)

    def then(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """The transform applying `self` first and `other` second."""
        rotation = other.rotation.to_matrix()
        translation = other.scale * rotation @ np.asarray(self.translation) + np.asarray(other.translation)
        return SimilarityTransform(other.scale * self.scale,
                                   other.rotation.multiply(self.rotation).normalized(),
                                   tuple(float(v) for v in translation))

    def inverse(self) -> "SimilarityTransform":
        rotation_t = self.rotation.to_matrix().T
        translation = -rotation_t @ np.asarray(self.translation) / self.scale
        return SimilarityTransform(1.0 / self.scale, self.rotation.conjugate(),
                                   tuple(float(v) for v in translation))


def _quaternion_angle(a: np.ndarray, b: np.ndarray) -> float:
    if a @ b < 0:
        b = -b
    return 2.0 * math.atan2(np.linalg.norm(a - b), np.linalg.norm(a + b))


def quat_from_rotation_matrix(matrix) -> Quaternion:
    matrix = np.asarray(matrix, dtype=np.float64)
    deviation = float(np.abs(matrix.T @ matrix - np.eye(3)).max())
    deviation = max(deviation, abs(float(np.linalg.det(matrix)) - 1.0))
    if deviation > constants.ORTHONORMAL_TOLERANCE:
        raise NonOrthonormalInput(deviation)
    x, y, z, w = Rotation.from_matrix(matrix).as_quat()
    return Quaternion.from_array([w, x, y, z]).canonical()


def slerp(q0: Quaternion, q1: Quaternion, t: float) -> Quaternion:
    a = q0.normalized().as_array()
    b = q1.normalized().as_array()
    if a @ b < 0:
        b = -b
    theta = _quaternion_angle(a, b)
    if 2.0 * theta < constants.SLERP_LINEAR_THRESHOLD:
        out = (1.0 - t) * a + t * b
    else:
        out = (math.sin((1.0 - t) * theta) * a + math.sin(t * theta) * b) / math.sin(theta)
    return Quaternion.from_array(out).canonical()


def interpolate_pose(p0: CameraPose, p1: CameraPose, t: float) -> CameraPose:
    translation = (1.0 - t) * p0.center + t * p1.center
    return CameraPose(slerp(p0.rotation, p1.rotation, t), tuple(float(v) for v in translation), p0.intrinsics)


def interpolate_trajectory(traj: Trajectory, factor: int) -> Trajectory:
    if traj.num_frames == 0:
        raise EmptyTrajectory("Cannot interpolate an empty trajectory")
    if factor < 1:
        raise InvalidFactor("Interpolation factor must be >= 1, got {}".format(factor))
    if factor == 1:
        return traj
    if traj.num_frames < 2:
        raise EmptyTrajectory("Need at least two poses to interpolate with factor {}".format(factor))

    poses = []
    for start, end in zip(traj.poses[:-1], traj.poses[1:]):
        poses.append(start)
        for step in range(1, factor):
            poses.append(interpolate_pose(start, end, step / factor))
    poses.append(traj.poses[-1])
    return Trajectory(tuple(poses), traj.fps * factor)


def project_points(points: np.ndarray, pose: CameraPose) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (N, 2) and camera-space depths (N,) without any culling."""
    rotation, translation = pose.world_to_camera()
    camera = np.asarray(points, dtype=np.float64).reshape(-1, 3) @ rotation.T + translation
    depth = camera[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pose.intrinsics.fx * camera[:, 0] / depth + pose.intrinsics.cx
        v = pose.intrinsics.fy * camera[:, 1] / depth + pose.intrinsics.cy
    return np.stack([u, v], axis=1), depth


def in_frustum(pixels: np.ndarray, depth: np.ndarray, resolution: Tuple[int, int]) -> np.ndarray:
    width, height = resolution
    return ((depth > constants.NEAR_PLANE)
            & (pixels[:, 0] >= 0) & (pixels[:, 0] < width)
            & (pixels[:, 1] >= 0) & (pixels[:, 1] < height))


def project_point(point, pose: CameraPose, resolution: Tuple[int, int]) -> Optional[Tuple[float, float, float]]:
    pixels, depth = project_points(np.asarray(point, dtype=np.float64)[None], pose)
    if not in_frustum(pixels, depth, resolution)[0]:
        return None
    return float(pixels[0, 0]), float(pixels[0, 1]), float(depth[0])


def unproject_pixels(pixels: np.ndarray, depth: np.ndarray, pose: CameraPose) -> np.ndarray:
    intrinsics = pose.intrinsics
    camera = np.stack([(pixels[:, 0] - intrinsics.cx) / intrinsics.fx * depth,
                       (pixels[:, 1] - intrinsics.cy) / intrinsics.fy * depth,
                       depth], axis=1)
    return camera @ pose.rotation_matrix().T + pose.center


def compose(transform: SimilarityTransform, pose: CameraPose) -> CameraPose:
    center = transform.apply_points(pose.center[None])[0]
    rotation = transform.rotation.multiply(pose.rotation).normalized()
    return CameraPose(rotation, tuple(float(v) for v in center), pose.intrinsics)


def apply_transform_to_trajectory(transform: SimilarityTransform, traj: Trajectory) -> Trajectory:
    return Trajectory(tuple(compose(transform, pose) for pose in traj.poses), traj.fps)


def look_at(eye, target, intrinsics: Intrinsics, up=(0.0, 0.0, 1.0)) -> CameraPose:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=1)
    return CameraPose(quat_from_rotation_matrix(rotation), tuple(float(v) for v in eye), intrinsics)


def average_quaternions(quaternions: Sequence[Quaternion]) -> Quaternion:
    """Sign-invariant mean rotation: dominant eigenvector of sum(q q^T)."""
    stacked = np.array([q.normalized().as_array() for q in quaternions])
    _, vectors = np.linalg.eigh(stacked.T @ stacked)
    return Quaternion.from_array(vectors[:, -1]).canonical()

"""
Forward 3D Gaussian splatting rasterizer.

Per frame: every gaussian is projected to a screen-space 2D gaussian (EWA
footprint through the linearised perspective Jacobian), culled, depth sorted
once globally, binned into 16x16 tiles and composited front to back per pixel.
The per-gaussian and per-tile loops are numba kernels; tiles are processed in
parallel and each tile owns its pixels, so the result does not depend on the
thread schedule.
"""
import logging
import math
import time
from typing import Iterator, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numba import njit, prange

import constants
from errors import UncoveredFrameIndex
from geometry import CameraPose, SimilarityTransform, Trajectory, compose

logger = logging.getLogger(__name__)


class RenderedFrame(NamedTuple):
    color: np.ndarray  # (H, W, 3) float32
    alpha: np.ndarray  # (H, W) float32
    depth: np.ndarray  # (H, W) float32, expected depth where alpha > 0


class SplatProjection(NamedTuple):
    mean2d: np.ndarray  # (N, 2) px
    cov2d: np.ndarray  # (N, 3) xx, xy, yy in px^2
    conic: np.ndarray  # (N, 3) inverse covariance
    depth: np.ndarray  # (N,)
    radius: np.ndarray  # (N,) px
    visible: np.ndarray  # (N,) bool


@njit(parallel=True, cache=True)
def _project_kernel(means, scales, quats, opacities, view_rotation, view_translation,
                    fx, fy, cx, cy, width, height, near, low_pass, footprint_sigmas, min_peak,
                    out_mean2d, out_cov2d, out_conic, out_depth, out_radius, out_visible):
    lim_x = 1.3 * 0.5 * width / fx
    lim_y = 1.3 * 0.5 * height / fy
    for n in prange(means.shape[0]):
        out_visible[n] = False
        px = (view_rotation[0, 0] * means[n, 0] + view_rotation[0, 1] * means[n, 1]
              + view_rotation[0, 2] * means[n, 2] + view_translation[0])
        py = (view_rotation[1, 0] * means[n, 0] + view_rotation[1, 1] * means[n, 1]
              + view_rotation[1, 2] * means[n, 2] + view_translation[1])
        pz = (view_rotation[2, 0] * means[n, 0] + view_rotation[2, 1] * means[n, 1]
              + view_rotation[2, 2] * means[n, 2] + view_translation[2])
        out_depth[n] = pz
        if pz <= near or opacities[n] < min_peak:
            continue

        # world covariance R diag(s^2) R^T
        qw, qx, qy, qz = quats[n, 0], quats[n, 1], quats[n, 2], quats[n, 3]
        qn = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        qw, qx, qy, qz = qw / qn, qx / qn, qy / qn, qz / qn
        rot = np.empty((3, 3))
        rot[0, 0] = 1.0 - 2.0 * (qy * qy + qz * qz)
        rot[0, 1] = 2.0 * (qx * qy - qz * qw)
        rot[0, 2] = 2.0 * (qx * qz + qy * qw)
        rot[1, 0] = 2.0 * (qx * qy + qz * qw)
        rot[1, 1] = 1.0 - 2.0 * (qx * qx + qz * qz)
        rot[1, 2] = 2.0 * (qy * qz - qx * qw)
        rot[2, 0] = 2.0 * (qx * qz - qy * qw)
        rot[2, 1] = 2.0 * (qy * qz + qx * qw)
        rot[2, 2] = 1.0 - 2.0 * (qx * qx + qy * qy)
        cov = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    acc += rot[i, k] * scales[n, k] * scales[n, k] * rot[j, k]
                cov[i, j] = acc

        # Jacobian of the pinhole projection, evaluated at a frustum-clamped point
        tx = pz * min(lim_x, max(-lim_x, px / pz))
        ty = pz * min(lim_y, max(-lim_y, py / pz))
        jac = np.zeros((2, 3))
        jac[0, 0] = fx / pz
        jac[0, 2] = -fx * tx / (pz * pz)
        jac[1, 1] = fy / pz
        jac[1, 2] = -fy * ty / (pz * pz)
        t = np.zeros((2, 3))
        for i in range(2):
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    acc += jac[i, k] * view_rotation[k, j]
                t[i, j] = acc
        c2 = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                acc = 0.0
                for k in range(3):
                    for m in range(3):
                        acc += t[i, k] * cov[k, m] * t[j, m]
                c2[i, j] = acc
        a = c2[0, 0] + low_pass
        b = 0.5 * (c2[0, 1] + c2[1, 0])
        c = c2[1, 1] + low_pass
        det = a * c - b * b
        if det <= 0.0:
            continue

        mid = 0.5 * (a + c)
        lambda_max = mid + math.sqrt(max(0.1, mid * mid - det))
        radius = math.ceil(footprint_sigmas * math.sqrt(lambda_max))
        u = fx * px / pz + cx
        v = fy * py / pz + cy
        if u + radius < 0.0 or u - radius > width - 1 or v + radius < 0.0 or v - radius > height - 1:
            continue

        out_mean2d[n, 0] = u
        out_mean2d[n, 1] = v
        out_cov2d[n, 0] = a
        out_cov2d[n, 1] = b
        out_cov2d[n, 2] = c
        out_conic[n, 0] = c / det
        out_conic[n, 1] = -b / det
        out_conic[n, 2] = a / det
        out_radius[n] = radius
        out_visible[n] = True


@njit(cache=True)
def _bin_kernel(order, mean2d, radius, tiles_x, tiles_y, tile_size):
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, np.int64)
    rects = np.empty((order.shape[0], 4), np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        x0 = max(0, int(math.floor((mean2d[g, 0] - radius[g]) / tile_size)))
        x1 = min(tiles_x, int(math.floor((mean2d[g, 0] + radius[g]) / tile_size)) + 1)
        y0 = max(0, int(math.floor((mean2d[g, 1] - radius[g]) / tile_size)))
        y1 = min(tiles_y, int(math.floor((mean2d[g, 1] + radius[g]) / tile_size)) + 1)
        rects[k, 0] = x0
        rects[k, 1] = x1
        rects[k, 2] = y0
        rects[k, 3] = y1
        for ty in range(y0, y1):
            for tx in range(x0, x1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[-1], np.int64)
    cursor = offsets[:-1].copy()
    for k in range(order.shape[0]):
        for ty in range(rects[k, 2], rects[k, 3]):
            for tx in range(rects[k, 0], rects[k, 1]):
                tile = ty * tiles_x + tx
                ids[cursor[tile]] = order[k]
                cursor[tile] += 1
    return offsets, ids


@njit(parallel=True, cache=True)
def _rasterize_kernel(offsets, ids, mean2d, conic, colors, opacities, depths,
                      tiles_x, tiles_y, tile_size, width, height, background,
                      alpha_clamp, min_transmittance, out_color, out_alpha, out_depth):
    for tile in prange(tiles_x * tiles_y):
        tile_y = tile // tiles_x
        tile_x = tile - tile_y * tiles_x
        start = offsets[tile]
        end = offsets[tile + 1]
        for py in range(tile_y * tile_size, min((tile_y + 1) * tile_size, height)):
            for px in range(tile_x * tile_size, min((tile_x + 1) * tile_size, width)):
                transmittance = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                d = 0.0
                for k in range(start, end):
                    gid = ids[k]
                    dx = px - mean2d[gid, 0]
                    dy = py - mean2d[gid, 1]
                    power = -0.5 * (conic[gid, 0] * dx * dx + conic[gid, 2] * dy * dy) - conic[gid, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = min(alpha_clamp, opacities[gid] * math.exp(power))
                    weight = alpha * transmittance
                    r += colors[gid, 0] * weight
                    g += colors[gid, 1] * weight
                    b += colors[gid, 2] * weight
                    d += depths[gid] * weight
                    transmittance *= 1.0 - alpha
                    if transmittance < min_transmittance:
                        break
                accumulated = 1.0 - transmittance
                out_color[py, px, 0] = r + transmittance * background[0]
                out_color[py, px, 1] = g + transmittance * background[1]
                out_color[py, px, 2] = b + transmittance * background[2]
                out_alpha[py, px] = accumulated
                out_depth[py, px] = d / accumulated if accumulated > 0.0 else 0.0


def project_gaussians(scene, pose: CameraPose, resolution: Tuple[int, int],
                      settings: constants.RenderSettings = constants.DEFAULT_RENDER_SETTINGS) -> SplatProjection:
    width, height = resolution
    count = len(scene)
    mean2d = np.zeros((count, 2))
    cov2d = np.zeros((count, 3))
    conic = np.zeros((count, 3))
    depth = np.zeros(count)
    radius = np.zeros(count)
    visible = np.zeros(count, dtype=np.bool_)
    if count == 0:
        return SplatProjection(mean2d, cov2d, conic, depth, radius, visible)

    view_rotation, view_translation = pose.world_to_camera()
    intrinsics = pose.intrinsics
    _project_kernel(np.ascontiguousarray(scene.means, dtype=np.float64),
                    np.ascontiguousarray(scene.scales, dtype=np.float64),
                    np.ascontiguousarray(scene.rotations, dtype=np.float64),
                    np.ascontiguousarray(scene.opacities, dtype=np.float64),
                    np.ascontiguousarray(view_rotation), np.ascontiguousarray(view_translation),
                    float(intrinsics.fx), float(intrinsics.fy), float(intrinsics.cx), float(intrinsics.cy),
                    float(width), float(height), float(settings.near_plane), float(settings.low_pass),
                    float(constants.FOOTPRINT_SIGMAS), float(constants.MIN_PEAK_ALPHA),
                    mean2d, cov2d, conic, depth, radius, visible)
    return SplatProjection(mean2d, cov2d, conic, depth, radius, visible)


def depth_order(projection: SplatProjection) -> np.ndarray:
    """Visible gaussian indices sorted by view depth, ties broken by primitive index."""
    visible = np.flatnonzero(projection.visible)
    return visible[np.lexsort((visible, projection.depth[visible]))]


def render(scene, pose: CameraPose, resolution: Tuple[int, int],
           settings: constants.RenderSettings = constants.DEFAULT_RENDER_SETTINGS) -> RenderedFrame:
    width, height = resolution
    background = np.asarray(scene.background, dtype=np.float64)
    color = np.empty((height, width, 3))
    color[:] = background
    alpha = np.zeros((height, width))
    depth = np.zeros((height, width))
    if len(scene) == 0:
        return RenderedFrame(color.astype(np.float32), alpha.astype(np.float32), depth.astype(np.float32))

    projection = project_gaussians(scene, pose, resolution, settings)
    order = depth_order(projection)
    tile_size = settings.tile_size
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    offsets, ids = _bin_kernel(order.astype(np.int64), projection.mean2d, projection.radius,
                               tiles_x, tiles_y, tile_size)
    _rasterize_kernel(offsets, ids, projection.mean2d, projection.conic,
                      np.ascontiguousarray(scene.colors, dtype=np.float64),
                      np.ascontiguousarray(scene.opacities, dtype=np.float64),
                      projection.depth, tiles_x, tiles_y, tile_size, width, height, background,
                      float(settings.alpha_clamp), float(settings.min_transmittance), color, alpha, depth)
    return RenderedFrame(color.astype(np.float32), alpha.astype(np.float32), depth.astype(np.float32))


def assign_frames_to_chunks(num_frames: int, frame_ranges: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Chunk index per frame; a frame claimed by several ranges goes to the earliest chunk."""
    assignment = np.full(num_frames, -1, dtype=np.int64)
    for chunk, (start, stop) in reversed(list(enumerate(frame_ranges))):
        assignment[max(start, 0):min(stop, num_frames)] = chunk
    uncovered = np.flatnonzero(assignment < 0)
    if uncovered.size:
        raise UncoveredFrameIndex(int(uncovered[0]))
    return assignment


def iter_render_video(scenes, traj: Trajectory, resolution: Tuple[int, int],
                      frame_ranges: Optional[Sequence[Tuple[int, int]]] = None,
                      transforms: Optional[Sequence[SimilarityTransform]] = None,
                      settings: constants.RenderSettings = constants.DEFAULT_RENDER_SETTINGS,
                      assignment: Optional[np.ndarray] = None) -> Iterator[Tuple[int, RenderedFrame, float]]:
    """
    Yields (frame index, frame, seconds) per pose. `scenes` is either one scene
    or one scene per chunk; with chunks, poses are routed by `frame_ranges` (or an
    explicit per-frame `assignment`) and mapped through the chunk's transform.
    """
    if not isinstance(scenes, (list, tuple)):
        scenes = [scenes]
        assignment = np.zeros(traj.num_frames, dtype=np.int64)
    elif assignment is None:
        if frame_ranges is None:
            frame_ranges = [(0, traj.num_frames)] if len(scenes) == 1 else None
        if frame_ranges is None:
            raise UncoveredFrameIndex(0)
        assignment = assign_frames_to_chunks(traj.num_frames, frame_ranges)

    for index, pose in enumerate(traj.poses):
        chunk = int(assignment[index])
        if transforms is not None:
            pose = compose(transforms[chunk], pose)
        start = time.perf_counter()
        frame = render(scenes[chunk], pose, resolution, settings)
        yield index, frame, time.perf_counter() - start


def render_video(scenes, traj: Trajectory, resolution: Tuple[int, int],
                 frame_ranges: Optional[Sequence[Tuple[int, int]]] = None,
                 transforms: Optional[Sequence[SimilarityTransform]] = None,
                 settings: constants.RenderSettings = constants.DEFAULT_RENDER_SETTINGS
                 ) -> Tuple[list, list]:
    frames, seconds = [], []
    for _, frame, elapsed in iter_render_video(scenes, traj, resolution, frame_ranges, transforms, settings):
        frames.append(frame)
        seconds.append(elapsed)
    logger.debug("Rendered %d frames in %.3f s", len(frames), sum(seconds))
    return frames, seconds


def to_uint8(color: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(color, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)

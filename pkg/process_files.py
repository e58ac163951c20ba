import argparse
import json
import logging
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

import constants
from errors import EmptyTrajectory, MissingManifest
from geometry import CameraPose, Intrinsics, Quaternion, SimilarityTransform, Trajectory
from scene_synth import GaussianScene, Keyframe, PointCloud

logger = logging.getLogger(__name__)

POSE_CONVENTIONS = ("world_from_camera", "camera_from_world")
MANIFEST_NAME = "manifest.json"
SPLAT_RECORD = np.dtype([("mean", "<f4", 3), ("scale", "<f4", 3), ("quat", "<f4", 4),
                         ("opacity", "<f4"), ("rgb", "<f4", 3)])


# poses


def write_poses(traj: Trajectory, path, frame_indices: Optional[Sequence[int]] = None) -> None:
    """`frame_index qw qx qy qz tx ty tz fx fy cx cy` per line, world-from-camera, full float precision."""
    frame_indices = range(traj.num_frames) if frame_indices is None else frame_indices
    lines = ["# fps {!r}".format(float(traj.fps)), "# convention world_from_camera"]
    for index, pose in zip(frame_indices, traj.poses):
        values = tuple(pose.rotation) + tuple(pose.translation) + tuple(pose.intrinsics)
        lines.append(" ".join([str(int(index))] + [repr(float(v)) for v in values]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_pose_rows(path, convention: str = "world_from_camera",
                   fps: Optional[float] = None) -> Tuple[List[int], Trajectory]:
    if convention not in POSE_CONVENTIONS:
        raise ValueError("Unknown pose convention '{}', expected one of {}".format(convention, POSE_CONVENTIONS))
    indices, poses = [], []
    header_fps = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line.startswith("#"):
            words = line[1:].split()
            if len(words) == 2 and words[0] == "fps":
                header_fps = float(words[1])
            continue
        if not line:
            continue
        values = line.split()
        if len(values) != 12:
            raise ValueError("Malformed pose line in {}: '{}'".format(path, line))
        numbers = [float(v) for v in values[1:]]
        rotation = Quaternion(*numbers[0:4])
        translation = tuple(numbers[4:7])
        if convention == "camera_from_world":
            rotation = rotation.conjugate()
            translation = tuple(float(v) for v in -rotation.to_matrix() @ np.asarray(translation))
        indices.append(int(values[0]))
        poses.append(CameraPose(rotation, translation, Intrinsics(*numbers[7:11])))
    if not poses:
        raise EmptyTrajectory("No poses in {}".format(path))
    fps = fps if fps is not None else (header_fps if header_fps is not None else 30.0)
    return indices, Trajectory(tuple(poses), fps)


def read_poses(path, convention: str = "world_from_camera", fps: Optional[float] = None) -> Trajectory:
    return read_pose_rows(path, convention, fps)[1]


# scenes and clouds


def write_splat(scene: GaussianScene, path) -> None:
    records = np.zeros(len(scene), dtype=SPLAT_RECORD)
    records["mean"] = scene.means
    records["scale"] = scene.scales
    records["quat"] = scene.rotations
    records["opacity"] = scene.opacities
    records["rgb"] = scene.colors
    with open(path, "wb") as stream:
        stream.write(constants.SPLAT_MAGIC)
        stream.write(np.array([len(scene)], dtype="<u4").tobytes())
        stream.write(records.tobytes())


def read_splat(path, background=(0.0, 0.0, 0.0)) -> GaussianScene:
    data = Path(path).read_bytes()
    magic = constants.SPLAT_MAGIC
    if not data.startswith(magic):
        raise ValueError("{} is not a {} file".format(path, magic.decode()))
    count = int(np.frombuffer(data, dtype="<u4", count=1, offset=len(magic))[0])
    records = np.frombuffer(data, dtype=SPLAT_RECORD, count=count, offset=len(magic) + 4)
    return GaussianScene(records["mean"], records["scale"], records["quat"], records["opacity"], records["rgb"],
                         background)


def write_point_cloud(cloud: PointCloud, path) -> None:
    indices = cloud.frame_indices if cloud.frame_indices is not None else np.full(len(cloud), -1)
    with open(path, "w") as stream:
        for point, index in zip(cloud.points, indices):
            stream.write("{!r} {!r} {!r} {}\n".format(float(point[0]), float(point[1]), float(point[2]), int(index)))


def read_point_cloud(path) -> PointCloud:
    rows = np.loadtxt(path, ndmin=2)
    if rows.size == 0:
        return PointCloud.empty()
    return PointCloud(rows[:, :3], rows[:, 3].astype(np.int64))


# frames


def write_ppm(path, color: np.ndarray) -> None:
    """Binary P6 PPM of an (H, W, 3) RGB image in [0, 1] or uint8."""
    image = color if color.dtype == np.uint8 else np.floor(np.clip(color, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(image, cv2.COLOR_RGB2BGR)):
        raise IOError("Could not write {}".format(path))


def read_ppm(path) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise IOError("Could not read {}".format(path))
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def write_sidecar(path, array: np.ndarray) -> None:
    np.ascontiguousarray(array, dtype="<f4").tofile(str(path))


def read_sidecar(path, shape: Tuple[int, int]) -> np.ndarray:
    return np.fromfile(str(path), dtype="<f4").reshape(shape).astype(np.float32)


def write_frame(directory: Path, index: int, frame, sidecars: bool = False, prefix: str = "frame") -> Path:
    path = Path(directory) / "{}_{:04d}.ppm".format(prefix, index)
    write_ppm(path, frame.color)
    if sidecars:
        write_sidecar(path.with_suffix(".alpha.f32"), frame.alpha)
        write_sidecar(path.with_suffix(".depth.f32"), frame.depth)
    return path


# keyframe directories


def write_keyframes(keyframes: Sequence[Keyframe], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for keyframe in keyframes:
        path = directory / "keyframe_{:04d}.ppm".format(keyframe.index)
        write_ppm(path, keyframe.image)
        write_sidecar(path.with_suffix(".alpha.f32"), keyframe.alpha)
        write_sidecar(path.with_suffix(".depth.f32"), keyframe.depth)
    poses = Trajectory(tuple(keyframe.pose for keyframe in keyframes), 1.0)
    write_poses(poses, directory / "poses.txt", [keyframe.index for keyframe in keyframes])


def read_keyframes(directory, indices: Optional[Sequence[int]] = None) -> List[Keyframe]:
    """Reads a keyframe directory, optionally only the keyframes with the given dense indices."""
    directory = Path(directory)
    frame_indices, poses = read_pose_rows(directory / "poses.txt")
    wanted = None if indices is None else set(indices)
    keyframes = []
    for index, pose in zip(frame_indices, poses.poses):
        if wanted is not None and index not in wanted:
            continue
        path = directory / "keyframe_{:04d}.ppm".format(index)
        image = read_ppm(path).astype(np.float32) / 255.0
        shape = image.shape[:2]
        keyframes.append(Keyframe(index, pose, image, read_sidecar(path.with_suffix(".depth.f32"), shape),
                                  read_sidecar(path.with_suffix(".alpha.f32"), shape), pose))
    return keyframes


# label datasets


def save_label_dataset(samples, path) -> None:
    rows = [np.array([tuple(p.rotation) + tuple(p.translation) + tuple(p.intrinsics) for p in s.trajectory.poses])
            for s in samples]
    np.savez_compressed(path,
                        poses=np.concatenate(rows, axis=0),
                        offsets=np.cumsum([0] + [len(r) for r in rows]),
                        fps=np.array([s.trajectory.fps for s in samples]),
                        descriptors=np.stack([s.descriptor for s in samples]),
                        labels=np.array([s.label for s in samples], dtype=np.int64))


def load_label_dataset(path):
    from dataset import DensitySample

    data = np.load(path)
    samples = []
    for row in range(len(data["labels"])):
        chunk = data["poses"][data["offsets"][row]:data["offsets"][row + 1]]
        poses = tuple(CameraPose(Quaternion(*values[0:4]), tuple(values[4:7]), Intrinsics(*values[7:11]))
                      for values in chunk.tolist())
        samples.append(DensitySample(Trajectory(poses, float(data["fps"][row])),
                                     data["descriptors"][row].astype(np.float32), int(data["labels"][row])))
    return samples


# density checkpoints


def save_checkpoint(model, model_params: constants.ModelParams, path) -> None:
    """Flat little-endian f32 parameter vector plus a JSON manifest of shapes next to it."""
    path = Path(path)
    vector = parameters_to_vector(model.parameters()).detach().cpu().numpy()
    vector.astype("<f4").tofile(str(path))
    manifest = {"model_params": model_params._asdict(),
                "size": int(vector.size),
                "parameters": [{"name": name, "shape": list(parameter.shape)}
                               for name, parameter in model.named_parameters()]}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path):
    from model import DensityPredictor

    path = Path(path)
    manifest_path = path.with_suffix(".json")
    if not manifest_path.exists():
        raise MissingManifest("Checkpoint manifest {} not found".format(manifest_path))
    manifest = json.loads(manifest_path.read_text())
    model_params = constants.ModelParams(**manifest["model_params"])
    model = DensityPredictor(*model_params)
    vector = np.fromfile(str(path), dtype="<f4")
    if vector.size != manifest["size"] or vector.size != int(model.num_params):
        raise ValueError("Checkpoint {} holds {} values, model expects {}".format(path, vector.size,
                                                                                 model.num_params))
    vector_to_parameters(torch.from_numpy(vector.astype(np.float32)), model.parameters())
    model.eval()
    return model, model_params


# reconstructions


def transform_to_json(transform: SimilarityTransform) -> dict:
    return {"scale": float(transform.scale), "quat": [float(v) for v in transform.rotation],
            "t": [float(v) for v in transform.translation]}


def transform_from_json(data: dict) -> SimilarityTransform:
    return SimilarityTransform(float(data["scale"]), Quaternion(*data["quat"]), tuple(float(v) for v in data["t"]))


class StoredReconstruction(NamedTuple):
    scenes: Tuple[GaussianScene, ...]
    transforms: Tuple[SimilarityTransform, ...]
    frame_ranges: Tuple[Tuple[int, int], ...]
    input_trajectory: Trajectory
    resolution: Tuple[int, int]
    settings: constants.RenderSettings
    manifest: dict


def write_reconstruction(aligned, input_traj: Trajectory, directory, resolution: Tuple[int, int],
                         background=(0.0, 0.0, 0.0),
                         settings: constants.RenderSettings = constants.DEFAULT_RENDER_SETTINGS) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_poses(input_traj, directory / "input_poses.txt")
    chunks = []
    for index, (scene, transform) in enumerate(zip(aligned.scenes, aligned.transforms)):
        name = "chunk_{:02d}.splat".format(index)
        write_splat(scene, directory / name)
        chunks.append({"file": name,
                       "transform": transform_to_json(transform),
                       "correction": transform_to_json(aligned.corrections[index]),
                       "frame_range": list(aligned.plan.frame_ranges[index]),
                       "keyframe_indices": aligned.plan.chunk_keyframe_indices(index),
                       "residuals": [float(v) for v in aligned.residuals[index]]})
    manifest = {"format": constants.SPLAT_MAGIC.decode(),
                "resolution": list(resolution),
                "background": [float(v) for v in background],
                "render_settings": settings._asdict(),
                "input_poses": "input_poses.txt",
                "plan": aligned.plan.to_json(),
                "boundary_mismatch": list(aligned.boundary_mismatch),
                "chunks": chunks}
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_reconstruction(path) -> StoredReconstruction:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise MissingManifest("Reconstruction manifest {} not found".format(path))
    manifest = json.loads(path.read_text())
    directory = path.parent
    background = tuple(manifest["background"])
    for chunk in manifest["chunks"]:
        if not (directory / chunk["file"]).exists():
            raise MissingManifest("Chunk file {} listed in {} is missing".format(chunk["file"], path))
    scenes = tuple(read_splat(directory / chunk["file"], background) for chunk in manifest["chunks"])
    transforms = tuple(transform_from_json(chunk["transform"]) for chunk in manifest["chunks"])
    frame_ranges = tuple(tuple(chunk["frame_range"]) for chunk in manifest["chunks"])
    return StoredReconstruction(scenes, transforms, frame_ranges, read_poses(directory / manifest["input_poses"]),
                                tuple(manifest["resolution"]),
                                constants.RenderSettings(**manifest.get("render_settings", {})), manifest)


def main():
    parser = argparse.ArgumentParser(description="Convert a pose file between conventions")
    parser.add_argument("input")
    parser.add_argument("output")
    parser.add_argument("--convention", choices=POSE_CONVENTIONS, default="camera_from_world")
    parser.add_argument("--fps", type=float)

    args = parser.parse_args()
    indices, traj = read_pose_rows(args.input, args.convention, args.fps)
    write_poses(traj, args.output, indices)


if __name__ == '__main__':
    main()

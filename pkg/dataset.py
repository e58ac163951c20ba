import logging
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from joblib import Parallel, delayed
from scipy.spatial import cKDTree
from torch.utils.data import Dataset
from tqdm import tqdm

import constants
from geometry import Trajectory
from keyframes import coverage_keyframes
from scene_synth import RECIPES, GaussianScene, SceneRecipe, generate_scene, generate_trajectory, recipe_bounds

logger = logging.getLogger(__name__)

DESCRIPTOR_SAMPLE = 5000
LABEL_SWEEPS_DEG = (120.0, 150.0, 180.0)


class DensitySample(NamedTuple):
    trajectory: Trajectory
    descriptor: np.ndarray
    label: int


class LabelJob(NamedTuple):
    recipe: SceneRecipe
    scene_seed: int
    kind: str
    duration_s: float
    fps: float
    trajectory_seed: int
    sweep_deg: float = 180.0


def pose_features(traj: Trajectory) -> np.ndarray:
    """(N, 7) rows [qw qx qy qz tx ty tz], quaternions sign-canonical."""
    return np.stack([pose.as_vector7() for pose in traj.poses]).astype(np.float32)


def scene_descriptor(scene: GaussianScene, dim: int = constants.DESCRIPTOR_DIM) -> np.ndarray:
    """
    Procedural stand-in for a global image token: bounding-box extents, log primitive
    count, mean nearest-neighbour spacing, mean opacity, mean colour and mean scale,
    zero padded (or truncated) to `dim`.
    """
    values = np.zeros(12)
    if len(scene):
        means = scene.means.astype(np.float64)
        lo, hi = scene.bounds()
        values[0:3] = hi - lo
        values[3] = np.log1p(len(scene))
        sample = means[::max(1, len(means) // DESCRIPTOR_SAMPLE)]
        if len(sample) > 1:
            distances, _ = cKDTree(sample).query(sample, k=2)
            values[4] = distances[:, 1].mean()
        values[5] = scene.opacities.mean()
        values[6:9] = scene.colors.mean(axis=0)
        values[9:12] = scene.scales.mean(axis=0)
    descriptor = np.zeros(dim, dtype=np.float32)
    descriptor[:min(dim, len(values))] = values[:dim]
    return descriptor


class TrajectoryDataset(Dataset):
    def __init__(self, samples: Sequence[DensitySample]):
        self._poses = [pose_features(sample.trajectory) for sample in samples]
        self._descriptors = [np.asarray(sample.descriptor, dtype=np.float32) for sample in samples]
        self._labels = np.array([sample.label for sample in samples], dtype=np.float32)

    def __getitem__(self, index):
        return {"poses": self._poses[index], "descriptors": self._descriptors[index]}, self._labels[index]

    def __len__(self):
        return len(self._labels)


def collate_samples(batch):
    """Pads pose sequences to the longest one and returns the padding mask alongside."""
    length = max(item[0]["poses"].shape[0] for item in batch)
    poses = np.zeros((len(batch), length, 7), dtype=np.float32)
    mask = np.zeros((len(batch), length), dtype=bool)
    for row, (features, _) in enumerate(batch):
        count = features["poses"].shape[0]
        poses[row, :count] = features["poses"]
        mask[row, :count] = True
    descriptors = np.stack([features["descriptors"] for features, _ in batch])
    labels = np.array([label for _, label in batch], dtype=np.float32)
    return ({"poses": torch.from_numpy(poses), "descriptors": torch.from_numpy(descriptors),
             "mask": torch.from_numpy(mask)},
            torch.from_numpy(labels))


def label_sample(job: LabelJob, tau: float = constants.DEFAULT_TAU,
                 resolution: Tuple[int, int] = constants.DEFAULT_RESOLUTION,
                 stride: int = constants.POINT_STRIDE,
                 splat_radius_px: int = constants.SPLAT_RADIUS_PX,
                 label_fps: float = constants.LABEL_FPS,
                 observed_only: bool = True,
                 depth_test: bool = False) -> DensitySample:
    scene = generate_scene(job.recipe, job.scene_seed)
    dense = generate_trajectory(job.kind, job.duration_s, job.fps, job.trajectory_seed, recipe_bounds(job.recipe),
                                resolution=resolution, sweep_deg=job.sweep_deg)
    traj = dense.subsample(label_fps)
    report = coverage_keyframes(scene, traj, tau, resolution, stride, splat_radius_px, observed_only,
                                depth_test=depth_test)
    return DensitySample(traj, scene_descriptor(scene), max(1, report.count))


def build_label_dataset(jobs: Sequence[LabelJob], tau: float = constants.DEFAULT_TAU,
                        stride: int = constants.POINT_STRIDE,
                        resolution: Tuple[int, int] = constants.DEFAULT_RESOLUTION,
                        splat_radius_px: int = constants.SPLAT_RADIUS_PX,
                        label_fps: float = constants.LABEL_FPS,
                        observed_only: bool = True,
                        depth_test: bool = False,
                        n_jobs: int = 1, progress: bool = False) -> List[DensitySample]:
    samples = Parallel(n_jobs=n_jobs)(
        delayed(label_sample)(job, tau, resolution, stride, splat_radius_px, label_fps, observed_only, depth_test)
        for job in tqdm(jobs, desc="labels", disable=not progress)
    )
    logger.info("Labelled %d trajectories, counts %s", len(samples),
                np.bincount([sample.label for sample in samples]).nonzero()[0].tolist())
    return list(samples)


def synthetic_label_jobs(n_samples: int, seed: int = 0, duration_s: float = 20.0, fps: float = 30.0,
                         recipes: Optional[Sequence[str]] = None,
                         kinds: Sequence[str] = ("orbit", "dolly", "smooth-random-walk"),
                         primitive_budget: int = 50000) -> List[LabelJob]:
    """
    Seeded mix of recipes, trajectory kinds and orbit sweeps. The kind shifts by
    one every time the recipes wrap around, so recipes and kinds are crossed.
    """
    rng = np.random.default_rng(seed)
    recipes = list(RECIPES if recipes is None else recipes)
    jobs = []
    for index in range(n_samples):
        recipe = SceneRecipe(recipes[index % len(recipes)], primitive_budget)
        kind = kinds[(index + index // len(recipes)) % len(kinds)]
        jobs.append(LabelJob(recipe, int(rng.integers(0, 2 ** 31 - 1)), kind,
                             duration_s, fps, int(rng.integers(0, 2 ** 31 - 1)),
                             float(rng.choice(LABEL_SWEEPS_DEG))))
    return jobs

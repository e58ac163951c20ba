import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.pipeline import Pipeline
from tqdm import tqdm

import constants
from config import PipelineConfig, load_config
from dataset import pose_features, scene_descriptor
from errors import CountMismatch, KeySplatError, StageFailure
from geometry import Quaternion, SimilarityTransform, Trajectory, compose
from keyframes import KeyframePlan, coverage_keyframes, make_keyframe_plan, plan_generation_batches
from metrics import (MetricsRecord, bench_table, crossfade_frames, format_psnr, frame_table, hole_fraction, psnr,
                     stage_table)
from model import predict_count
from process_files import (load_checkpoint, read_keyframes, read_poses, read_ppm, read_reconstruction, write_frame,
                           write_keyframes, write_poses, write_reconstruction, write_splat)
from reconstruct import (AlignedReconstruction, ChunkPlan, ChunkReconstruction, align_chunks, default_voxel_size,
                         make_chunk_plan, reconstruct)
from renderer import RenderedFrame, assign_frames_to_chunks, iter_render_video, render, to_uint8
from scene_synth import (Corruption, GaussianScene, SceneRecipe, generate_scene, generate_trajectory,
                         oracle_keyframes, recipe_bounds)
from utils import Timer

logger = logging.getLogger(__name__)

FRAMES_DIR = "frames"
KEYFRAMES_DIR = "keyframes"
RECONSTRUCTION_DIR = "reconstruction"


class PipelineRun:
    """Mutable state handed from stage to stage; one run owns its output directory."""

    def __init__(self, config: PipelineConfig, scene: GaussianScene, trajectory: Trajectory):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.scene = scene
        self.trajectory = trajectory
        self.keyframe_plan: Optional[KeyframePlan] = None
        self.keyframes = None
        self.chunk_plan: Optional[ChunkPlan] = None
        self.chunks: Optional[List[ChunkReconstruction]] = None
        self.aligned: Optional[AlignedReconstruction] = None
        self.frame_holes: List[float] = []
        self.render_seconds: List[float] = []
        self.stage_seconds = OrderedDict()
        self.timings = {}

    @property
    def settings(self) -> constants.RenderSettings:
        return self.config.render_settings()


class Stage(TransformerMixin, BaseEstimator):
    name = "stage"

    def __init__(self, progress: bool = False):
        self.progress = progress

    def fit(self, x, y=None, **fit_params):
        return self

    def transform(self, run: PipelineRun) -> PipelineRun:
        logger.info("Stage %s", self.name)
        with Timer(self.name, run.timings) as timer:
            try:
                self.run(run)
            except Exception as error:
                raise StageFailure(self.name, error) from error
        run.stage_seconds[self.name] = timer.elapsed
        logger.info("Stage %s took %.3f s", self.name, timer.elapsed)
        return run

    def run(self, run: PipelineRun) -> None:
        raise NotImplementedError


class DensityPredict(Stage):
    name = "density-predict"

    def run(self, run: PipelineRun) -> None:
        config = run.config
        n_frames = run.trajectory.num_frames
        if config.keyframe_count is not None:
            count = config.keyframe_count
        elif config.density_checkpoint is not None:
            model, _ = load_checkpoint(config.density_checkpoint)
            rows = pose_features(run.trajectory.subsample(config.label_fps))
            count = predict_count(model, rows, scene_descriptor(run.scene, model.descriptor_dim), n_frames)
        else:
            report = coverage_keyframes(run.scene, run.trajectory.subsample(config.label_fps), config.tau,
                                        config.resolution, config.point_stride, config.splat_radius_px,
                                        config.observed_coverage, run.settings, self.progress,
                                        config.coverage_depth_test)
            (run.output_dir / "coverage.json").write_text(json.dumps(report.to_json()))
            count = report.count
        count = 1 if n_frames == 1 else min(max(count, constants.MIN_PREDICTED_KEYFRAMES), n_frames)
        run.keyframe_plan = make_keyframe_plan(n_frames, count, config.context_window)
        logger.info("Using %d keyframes for %d frames", count, n_frames)


class KeyframeProvide(Stage):
    name = "keyframe-provide"

    def run(self, run: PipelineRun) -> None:
        config = run.config
        if config.keyframe_source == "files":
            keyframes = read_keyframes(config.keyframe_dir)
            indices = [keyframe.index for keyframe in keyframes]
            if not keyframes or any(b <= a for a, b in zip(indices, indices[1:])) \
                    or indices[-1] >= run.trajectory.num_frames:
                raise CountMismatch("Keyframe directory {} does not match the {}-frame trajectory".format(
                    config.keyframe_dir, run.trajectory.num_frames))
            run.keyframe_plan = KeyframePlan(len(indices), tuple(indices),
                                             tuple(plan_generation_batches(len(indices), config.context_window)))
        else:
            plan = run.keyframe_plan
            poses = [run.trajectory.poses[index] for index in plan.indices]
            generated = oracle_keyframes(run.scene, poses, Corruption(config.corruption, config.corruption_amount),
                                         config.resolution, config.seed, plan.indices, run.settings)
            # delivered in generation-batch order, stored in trajectory order
            keyframes = [None] * plan.count
            for batch in plan.batches:
                for position in batch.targets:
                    keyframes[position] = generated[position]
            write_keyframes(keyframes, run.output_dir / KEYFRAMES_DIR)
        run.keyframes = keyframes
        (run.output_dir / "keyframe_plan.json").write_text(json.dumps(run.keyframe_plan.to_json()))


def chunk_frame(seed: int, chunk: int) -> SimilarityTransform:
    """Seeded random similarity standing in for a reconstructor's own coordinate frame."""
    rng = np.random.default_rng([seed, chunk])
    return SimilarityTransform(float(np.exp(rng.uniform(np.log(0.5), np.log(2.0)))),
                               Quaternion.from_array(rng.normal(size=4)).canonical(),
                               tuple(float(v) for v in rng.uniform(-5.0, 5.0, size=3)))


def reconstruct_chunk(keyframes, frame: SimilarityTransform, voxel_size: float, background) -> ChunkReconstruction:
    estimated = tuple(compose(frame, keyframe.pose) for keyframe in keyframes)
    moved = [keyframe._replace(pose=pose) for keyframe, pose in zip(keyframes, estimated)]
    return ChunkReconstruction(reconstruct(moved, voxel_size * frame.scale, background), estimated)


class Reconstruct(Stage):
    name = "reconstruct"

    def run(self, run: PipelineRun) -> None:
        config = run.config
        plan = make_chunk_plan(run.keyframe_plan.indices, run.trajectory, config.chunk_duration_s)
        voxel_size = config.voxel_size
        if voxel_size is None:
            voxel_size = default_voxel_size(*run.scene.bounds())
        by_index = {keyframe.index: keyframe for keyframe in run.keyframes}
        frames = [chunk_frame(config.seed, chunk) if config.randomize_chunk_frames else SimilarityTransform.identity()
                  for chunk in range(plan.num_chunks)]
        run.chunks = Parallel(n_jobs=config.n_jobs)(
            delayed(reconstruct_chunk)([by_index[index] for index in plan.chunk_keyframe_indices(chunk)],
                                       frames[chunk], voxel_size, run.scene.background)
            for chunk in range(plan.num_chunks)
        )
        run.chunk_plan = plan
        logger.info("Reconstructed %d chunks with %s gaussians", plan.num_chunks,
                    [len(chunk.scene) for chunk in run.chunks])


class Align(Stage):
    name = "align"

    def run(self, run: PipelineRun) -> None:
        run.aligned = align_chunks(run.chunk_plan, run.chunks, run.trajectory)
        write_reconstruction(run.aligned, run.trajectory, run.output_dir / RECONSTRUCTION_DIR,
                             run.config.resolution, run.scene.background, run.settings)


class Render(Stage):
    name = "render"

    def run(self, run: PipelineRun) -> None:
        frames_dir = run.output_dir / FRAMES_DIR
        frames_dir.mkdir(parents=True, exist_ok=True)
        aligned = run.aligned
        run.frame_holes, run.render_seconds = [], []
        frames = iter_render_video(list(aligned.scenes), run.trajectory, run.config.resolution,
                                   aligned.plan.frame_ranges, aligned.transforms, run.settings)
        for index, frame, seconds in tqdm(frames, total=run.trajectory.num_frames, desc="render",
                                          disable=not self.progress):
            write_frame(frames_dir, index, frame)
            run.frame_holes.append(hole_fraction(frame))
            run.render_seconds.append(seconds)


def get_processing_pipeline(progress: bool = False) -> Pipeline:
    return Pipeline([
        ("density-predict", DensityPredict(progress)),
        ("keyframe-provide", KeyframeProvide(progress)),
        ("reconstruct", Reconstruct(progress)),
        ("align", Align(progress)),
        ("render", Render(progress)),
    ])


def ground_truth_scene(config: PipelineConfig) -> GaussianScene:
    return generate_scene(SceneRecipe(config.scene_recipe, config.primitive_budget), config.scene_seed)


def ground_truth(config: PipelineConfig) -> Tuple[GaussianScene, Trajectory]:
    recipe = SceneRecipe(config.scene_recipe, config.primitive_budget)
    scene = ground_truth_scene(config)
    if config.trajectory_file is not None:
        traj = read_poses(config.trajectory_file, config.pose_convention)
    else:
        traj = generate_trajectory(config.trajectory_kind, config.duration_s, config.fps, config.trajectory_seed,
                                   recipe_bounds(recipe), config.resolution, config.fov_deg,
                                   sweep_deg=config.sweep_deg)
    return scene, traj


def quantized(color: np.ndarray) -> np.ndarray:
    return to_uint8(color).astype(np.float64) / 255.0


def evaluate_frames(scene: GaussianScene, traj: Trajectory, rendered: Iterable[Tuple[int, np.ndarray]],
                    resolution: Tuple[int, int], settings: constants.RenderSettings,
                    baseline: Optional[Iterable[Tuple[int, np.ndarray]]] = None,
                    progress: bool = False) -> Tuple[List[float], List[float]]:
    """PSNR of 8-bit frames (and optionally of a baseline) against 8-bit ground-truth renders."""
    scores, baseline_scores = [], []
    baseline = iter(baseline) if baseline is not None else None
    for index, color in tqdm(rendered, total=traj.num_frames, desc="evaluate", disable=not progress):
        truth = quantized(render(scene, traj.poses[index], resolution, settings).color)
        scores.append(psnr(color, truth))
        if baseline is not None:
            _, image = next(baseline)
            baseline_scores.append(psnr(quantized(image), truth))
    return scores, baseline_scores


def _write_metrics(run: PipelineRun, record: MetricsRecord, evaluation_seconds: float) -> None:
    stage_table(record.stage_seconds).to_csv(run.output_dir / "stages.csv", index=False)
    frame_table(record.frame_psnr, record.frame_holes).to_csv(run.output_dir / "frames.csv", index=False)
    pd.DataFrame({"frame": np.arange(len(run.render_seconds)), "seconds": run.render_seconds}).to_csv(
        run.output_dir / "render_times.csv", index=False)
    summary = record.summary()
    summary["evaluation_seconds"] = evaluation_seconds
    summary["chunks"] = run.chunk_plan.num_chunks
    summary["boundary_mismatch"] = list(run.aligned.boundary_mismatch)
    (run.output_dir / "summary.json").write_text(json.dumps(summary, indent=2))


def run_pipeline(config: PipelineConfig, progress: bool = False) -> Tuple[MetricsRecord, PipelineRun]:
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    try:
        scene, traj = ground_truth(config)
    except KeySplatError as error:
        raise StageFailure("prepare", error) from error
    (output_dir / "config.json").write_text(json.dumps(config.to_json(), indent=2))
    write_poses(traj, output_dir / "poses.txt")
    write_splat(scene, output_dir / "ground_truth.splat")

    run = PipelineRun(config, scene, traj)
    try:
        get_processing_pipeline(progress).fit_transform(run)
    except StageFailure as failure:
        stage_table(run.stage_seconds).to_csv(output_dir / "stages.csv", index=False)
        logger.error("Pipeline aborted in stage %s; partial artifacts kept in %s", failure.stage, output_dir)
        raise

    scores = []
    with Timer("evaluate", run.timings) as evaluation:
        if config.evaluate:
            rendered = ((index, read_ppm(output_dir / FRAMES_DIR / "frame_{:04d}.ppm".format(index)) / 255.0)
                        for index in range(traj.num_frames))
            scores, _ = evaluate_frames(scene, traj, rendered, config.resolution, run.settings, progress=progress)

    record = MetricsRecord(dict(run.stage_seconds), scores, list(run.frame_holes), run.keyframe_plan.count,
                           traj.num_frames)
    _write_metrics(run, record, evaluation.elapsed)
    logger.info("Rendered %d frames from %d keyframes, %.1f fps during rendering", record.n_frames,
                record.keyframe_count, record.render_fps)
    return record, run


class RerenderResult(NamedTuple):
    frames: List[RenderedFrame]
    seconds: float
    assignment: np.ndarray


def _matching_features(traj: Trajectory, scale: float) -> np.ndarray:
    rows = pose_features(traj).astype(np.float64)
    return np.concatenate([rows[:, 4:] / scale, rows[:, :4]], axis=1)


def nearest_chunk_assignment(reference: Trajectory, reference_chunks: np.ndarray, query: Trajectory) -> np.ndarray:
    """
    Chunk per query pose: the chunk of the closest reference pose (centre and
    orientation). Equally close candidates go to the one nearest in normalised
    time, then to the earlier index.
    """
    centers = reference.centers()
    scale = max(float(np.ptp(centers, axis=0).max()) if len(centers) > 1 else 0.0, 1e-9)
    tree = cKDTree(_matching_features(reference, scale))
    features = _matching_features(query, scale)
    nearest, _ = tree.query(features, k=1)

    stretch = (reference.num_frames - 1) / max(query.num_frames - 1, 1)
    assignment = np.empty(query.num_frames, dtype=np.int64)
    for index in range(query.num_frames):
        # every tied reference pose, however many share the nearest distance
        close = tree.query_ball_point(features[index], float(nearest[index]) + 1e-12)
        target = index * stretch
        chosen = min(close, key=lambda candidate: (abs(candidate - target), candidate))
        assignment[index] = reference_chunks[chosen]
    return assignment


def rerender_trajectory(manifest_path, poses: Union[str, Path, Trajectory], output_dir=None,
                        keep_frames: bool = True, progress: bool = False) -> RerenderResult:
    stored = read_reconstruction(manifest_path)
    traj = poses if isinstance(poses, Trajectory) else read_poses(poses)
    reference_chunks = assign_frames_to_chunks(stored.input_trajectory.num_frames, stored.frame_ranges)
    assignment = nearest_chunk_assignment(stored.input_trajectory, reference_chunks, traj)
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)

    frames = []
    with Timer("rerender") as timer:
        rendered = iter_render_video(list(stored.scenes), traj, stored.resolution, transforms=stored.transforms,
                                     settings=stored.settings, assignment=assignment)
        for index, frame, _ in tqdm(rendered, total=traj.num_frames, desc="rerender", disable=not progress):
            if output_dir is not None:
                write_frame(Path(output_dir), index, frame)
            if keep_frames:
                frames.append(frame)
    logger.info("Rerendered %d frames in %.3f s", traj.num_frames, timer.elapsed)
    return RerenderResult(frames, timer.elapsed, assignment)


def bench(config: PipelineConfig, repetitions: int, progress: bool = False) -> pd.DataFrame:
    """One discarded warm-up run, then `repetitions` timed runs; median and IQR per stage."""
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    base = Path(config.output_dir)
    runs = []
    record = None
    for repetition in tqdm(range(repetitions + 1), desc="bench", disable=not progress):
        run_config = config._replace(output_dir=str(base / "bench_{:02d}".format(repetition)), evaluate=False)
        record, _ = run_pipeline(run_config)
        if repetition > 0:
            runs.append(record.stage_seconds)
    table = bench_table(runs, record.n_frames)
    table["keyframe_fraction"] = record.keyframe_fraction
    base.mkdir(parents=True, exist_ok=True)
    table.to_csv(base / "bench.csv", index=False)
    return table


def evaluate_run(run_dir, baseline: Optional[str] = None, progress: bool = False) -> pd.DataFrame:
    """Re-renders a finished run from its stored reconstruction and scores it (and a 2D baseline) against ground truth."""
    run_dir = Path(run_dir)
    config = load_config(str(run_dir / "config.json"), check=False)
    scene = ground_truth_scene(config)
    traj = read_poses(run_dir / "poses.txt")
    stored = read_reconstruction(run_dir / RECONSTRUCTION_DIR)
    assignment = assign_frames_to_chunks(traj.num_frames, stored.frame_ranges)

    holes = []

    def rendered():
        for index, frame, _ in iter_render_video(list(stored.scenes), traj, stored.resolution,
                                                 transforms=stored.transforms, settings=stored.settings,
                                                 assignment=assignment):
            holes.append(hole_fraction(frame))
            yield index, quantized(frame.color)

    baseline_frames = None
    if baseline == "crossfade":
        keyframes = read_keyframes(run_dir / KEYFRAMES_DIR)
        baseline_frames = crossfade_frames([keyframe.image for keyframe in keyframes],
                                           [keyframe.index for keyframe in keyframes], traj.num_frames)
    elif baseline is not None:
        raise ValueError("Unknown baseline '{}'".format(baseline))

    scores, baseline_scores = evaluate_frames(scene, traj, rendered(), stored.resolution, stored.settings,
                                              baseline_frames, progress)
    table = frame_table(scores, holes)
    if baseline is not None:
        table["{}_psnr".format(baseline)] = [format_psnr(value) for value in baseline_scores]
    table.to_csv(run_dir / "eval.csv", index=False)
    return table

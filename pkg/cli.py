import argparse
import json
import logging
import sys

import constants
from config import load_config
from dataset import build_label_dataset, pose_features, scene_descriptor, synthetic_label_jobs
from errors import ConfigError, KeySplatError
from model import predict_count
from pipeline import bench, evaluate_run, rerender_trajectory, run_pipeline
from process_files import load_checkpoint, read_poses, save_label_dataset, write_poses, write_splat
from scene_synth import RECIPES, TRAJECTORY_KINDS, SceneRecipe, generate_scene, generate_trajectory, recipe_bounds
from train import DEFAULT_BATCH_SIZE, DEFAULT_LR, DEFAULT_STEPS, train_from_files

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_STAGE_FAILURE = 3

# run/bench flags that override config fields of the same name
CONFIG_FLAGS = (
    ("--scene_recipe", {"choices": RECIPES}),
    ("--scene_seed", {"type": int}),
    ("--trajectory_kind", {"choices": TRAJECTORY_KINDS}),
    ("--trajectory_file", {}),
    ("--duration_s", {"type": float}),
    ("--fps", {"type": float}),
    ("--tau", {"type": float}),
    ("--keyframe_source", {"choices": ("oracle", "files")}),
    ("--keyframe_dir", {}),
    ("--keyframe_count", {"type": int}),
    ("--density_checkpoint", {}),
    ("--corruption", {}),
    ("--corruption_amount", {"type": float}),
    ("--chunk_duration_s", {"type": float}),
    ("--voxel_size", {"type": float}),
    ("--seed", {"type": int}),
    ("--n_jobs", {"type": int}),
    ("--output_dir", {}),
)


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    for flag, options in CONFIG_FLAGS:
        parser.add_argument(flag, default=None, **options)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field; repeatable")


def _config_from_args(args):
    overrides = {flag[2:]: getattr(args, flag[2:]) for flag, _ in CONFIG_FLAGS}
    return load_config(args.config, overrides, args.set)


def gen_scene(args) -> None:
    scene = generate_scene(SceneRecipe(args.recipe, args.budget), args.seed)
    write_splat(scene, args.out)
    logger.info("Wrote %d gaussians to %s", len(scene), args.out)


def gen_traj(args) -> None:
    recipe = SceneRecipe(args.recipe, args.budget)
    traj = generate_trajectory(args.kind, args.duration_s, args.fps, args.seed, recipe_bounds(recipe),
                               tuple(args.resolution), args.fov_deg, sweep_deg=args.sweep_deg)
    write_poses(traj, args.out)
    logger.info("Wrote %d poses to %s", traj.num_frames, args.out)


def labels(args) -> None:
    jobs = synthetic_label_jobs(args.n_samples, args.seed, args.duration_s, args.fps, primitive_budget=args.budget)
    samples = build_label_dataset(jobs, args.tau, label_fps=args.label_fps, observed_only=args.observed_coverage,
                                  depth_test=args.depth_test, n_jobs=args.n_jobs, progress=args.verbose)
    save_label_dataset(samples, args.out)


def train_density(args) -> None:
    train_from_files(args.labels, args.out_model, args.steps, args.lr, args.batch_size, args.seed,
                     log_dir=args.logdir, progress=args.verbose)


def predict_density(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    dense = read_poses(args.poses, args.pose_convention)
    scene = generate_scene(SceneRecipe(args.recipe, args.budget), args.scene_seed)
    count = predict_count(model, pose_features(dense.subsample(args.label_fps)),
                          scene_descriptor(scene, model.descriptor_dim), dense.num_frames)
    print(json.dumps({"keyframe_count": count, "n_frames": dense.num_frames}))


def run(args) -> None:
    record, _ = run_pipeline(_config_from_args(args), progress=args.verbose)
    print(json.dumps(record.summary(), indent=2))


def rerender(args) -> None:
    result = rerender_trajectory(args.manifest, args.poses, args.out, keep_frames=False, progress=args.verbose)
    print(json.dumps({"frames": len(result.assignment), "seconds": result.seconds}))


def bench_command(args) -> None:
    table = bench(_config_from_args(args), args.repetitions, progress=args.verbose)
    print(table.to_string(index=False))


def eval_command(args) -> None:
    table = evaluate_run(args.run_dir, args.baseline, progress=args.verbose)
    print(table.describe().to_string())


def get_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Sparse-keyframe video rendering through 3D gaussian splats")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging and progress bars")
    commands = parser.add_subparsers(dest="command", required=True)

    command = commands.add_parser("gen-scene", help="write a procedural scene as a SPLATv1 file")
    command.add_argument("--recipe", choices=RECIPES, default="room")
    command.add_argument("--budget", type=int, default=50000)
    command.add_argument("--seed", type=int, default=0)
    command.add_argument("--out", required=True)
    command.set_defaults(handler=gen_scene)

    command = commands.add_parser("gen-traj", help="write a synthetic camera trajectory as a pose file")
    command.add_argument("--kind", choices=TRAJECTORY_KINDS, default="orbit")
    command.add_argument("--recipe", choices=RECIPES, default="room")
    command.add_argument("--budget", type=int, default=50000)
    command.add_argument("--duration_s", type=float, default=20.0)
    command.add_argument("--fps", type=float, default=30.0)
    command.add_argument("--sweep_deg", type=float, default=180.0)
    command.add_argument("--resolution", type=int, nargs=2, default=list(constants.DEFAULT_RESOLUTION))
    command.add_argument("--fov_deg", type=float, default=constants.DEFAULT_FOV_DEG)
    command.add_argument("--seed", type=int, default=0)
    command.add_argument("--out", required=True)
    command.set_defaults(handler=gen_traj)

    command = commands.add_parser("labels", help="build a keyframe-count dataset with the coverage selection")
    command.add_argument("--n_samples", type=int, default=200)
    command.add_argument("--budget", type=int, default=50000)
    command.add_argument("--duration_s", type=float, default=20.0)
    command.add_argument("--fps", type=float, default=30.0)
    command.add_argument("--tau", type=float, default=constants.DEFAULT_TAU)
    command.add_argument("--label_fps", type=float, default=constants.LABEL_FPS)
    command.add_argument("--all_pixel_coverage", dest="observed_coverage", action="store_false",
                         help="divide coverage by every pixel instead of the observed ones")
    command.add_argument("--depth_test", action="store_true", help="ignore points hidden behind the rendered surface")
    command.add_argument("--n_jobs", type=int, default=1)
    command.add_argument("--seed", type=int, default=0)
    command.add_argument("--out", required=True)
    command.set_defaults(handler=labels)

    command = commands.add_parser("train-density", help="train the keyframe density predictor")
    command.add_argument("--labels", required=True)
    command.add_argument("--out_model", required=True)
    command.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    command.add_argument("--lr", type=float, default=DEFAULT_LR)
    command.add_argument("--batch_size", type=int, default=DEFAULT_BATCH_SIZE)
    command.add_argument("--seed", type=int, default=0)
    command.add_argument("--logdir")
    command.set_defaults(handler=train_density)

    command = commands.add_parser("predict-density", help="predict the keyframe count of a trajectory")
    command.add_argument("--checkpoint", required=True)
    command.add_argument("--poses", required=True)
    command.add_argument("--pose_convention", choices=("world_from_camera", "camera_from_world"),
                         default="world_from_camera")
    command.add_argument("--recipe", choices=RECIPES, default="room")
    command.add_argument("--budget", type=int, default=50000)
    command.add_argument("--scene_seed", type=int, default=0)
    command.add_argument("--label_fps", type=float, default=constants.LABEL_FPS)
    command.set_defaults(handler=predict_density)

    command = commands.add_parser("run", help="run the full pipeline")
    _add_config_arguments(command)
    command.set_defaults(handler=run)

    command = commands.add_parser("rerender", help="render a new trajectory from a stored reconstruction")
    command.add_argument("--manifest", required=True)
    command.add_argument("--poses", required=True)
    command.add_argument("--out", required=True)
    command.set_defaults(handler=rerender)

    command = commands.add_parser("bench", help="time the pipeline stages over repeated runs")
    _add_config_arguments(command)
    command.add_argument("--repetitions", type=int, default=3)
    command.set_defaults(handler=bench_command)

    command = commands.add_parser("eval", help="score a finished run against ground truth")
    command.add_argument("--run_dir", required=True)
    command.add_argument("--baseline", choices=("crossfade",))
    command.set_defaults(handler=eval_command)
    return parser


def main(argv=None) -> int:
    args = get_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.handler(args)
    except ConfigError as error:
        logger.error("%s", error)
        return EXIT_CONFIG_ERROR
    except KeySplatError as error:
        logger.error("%s", error)
        return EXIT_STAGE_FAILURE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())

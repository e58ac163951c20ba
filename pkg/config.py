import json
import logging
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import jsonschema

import constants
from errors import ConfigError
from scene_synth import CORRUPTIONS, RECIPES, TRAJECTORY_KINDS

logger = logging.getLogger(__name__)


class PipelineConfig(NamedTuple):
    scene_recipe: str = "room"
    primitive_budget: int = 50000
    scene_seed: int = 0
    trajectory_kind: str = "orbit"
    duration_s: float = 20.0
    fps: float = 30.0
    trajectory_seed: int = 0
    sweep_deg: float = 180.0
    trajectory_file: Optional[str] = None
    pose_convention: str = "world_from_camera"
    tau: float = constants.DEFAULT_TAU
    splat_radius_px: int = constants.SPLAT_RADIUS_PX
    point_stride: int = constants.POINT_STRIDE
    observed_coverage: bool = True
    coverage_depth_test: bool = False
    label_fps: float = constants.LABEL_FPS
    keyframe_source: str = "oracle"
    keyframe_dir: Optional[str] = None
    corruption: str = "none"
    corruption_amount: float = 0.0
    keyframe_count: Optional[int] = None
    density_checkpoint: Optional[str] = None
    context_window: int = constants.CONTEXT_WINDOW
    chunk_duration_s: Optional[float] = constants.CHUNK_DURATION_S
    voxel_size: Optional[float] = None
    randomize_chunk_frames: bool = True
    resolution: Tuple[int, int] = constants.DEFAULT_RESOLUTION
    fov_deg: float = constants.DEFAULT_FOV_DEG
    low_pass: float = constants.LOW_PASS_FILTER
    evaluate: bool = True
    seed: int = 0
    n_jobs: int = 1
    output_dir: str = "output"

    def render_settings(self) -> constants.RenderSettings:
        return constants.DEFAULT_RENDER_SETTINGS._replace(low_pass=self.low_pass)

    def to_json(self) -> dict:
        data = self._asdict()
        data["resolution"] = list(self.resolution)
        return data


_NUMBER = {"type": "number"}
_OPTIONAL_PATH = {"type": ["string", "null"]}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "scene_recipe": {"enum": list(RECIPES)},
        "primitive_budget": {"type": "integer", "minimum": 1},
        "scene_seed": {"type": "integer"},
        "trajectory_kind": {"enum": list(TRAJECTORY_KINDS)},
        "duration_s": {"type": "number", "exclusiveMinimum": 0},
        "fps": {"type": "number", "exclusiveMinimum": 0},
        "trajectory_seed": {"type": "integer"},
        "sweep_deg": _NUMBER,
        "trajectory_file": _OPTIONAL_PATH,
        "pose_convention": {"enum": ["world_from_camera", "camera_from_world"]},
        "tau": {"type": "number", "minimum": 0, "maximum": 1.01},
        "splat_radius_px": {"type": "integer", "minimum": 0},
        "point_stride": {"type": "integer", "minimum": 1},
        "observed_coverage": {"type": "boolean"},
        "coverage_depth_test": {"type": "boolean"},
        "label_fps": {"type": "number", "exclusiveMinimum": 0},
        "keyframe_source": {"enum": ["oracle", "files"]},
        "keyframe_dir": _OPTIONAL_PATH,
        "corruption": {"enum": list(CORRUPTIONS)},
        "corruption_amount": {"type": "number", "minimum": 0},
        "keyframe_count": {"type": ["integer", "null"], "minimum": 2},
        "density_checkpoint": _OPTIONAL_PATH,
        "context_window": {"type": "integer", "minimum": 2},
        "chunk_duration_s": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "voxel_size": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "randomize_chunk_frames": {"type": "boolean"},
        "resolution": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
        "fov_deg": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
        "low_pass": {"type": "number", "minimum": 0},
        "evaluate": {"type": "boolean"},
        "seed": {"type": "integer"},
        "n_jobs": {"type": "integer"},
        "output_dir": {"type": "string"},
    },
}


def parse_override(text: str) -> Tuple[str, object]:
    """`key=value` with the value read as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError("Override '{}' is not of the form key=value".format(text))
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip(), value


def validate(data: Dict) -> None:
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as error:
        location = ".".join(str(part) for part in error.absolute_path) or "<root>"
        raise ConfigError("Invalid config at {}: {}".format(location, error.message)) from error


def check_files(config: PipelineConfig) -> None:
    """Cross-field rules: referenced files exist and poses match the render resolution."""
    required = [("trajectory_file", config.trajectory_file), ("density_checkpoint", config.density_checkpoint)]
    if config.keyframe_source == "files":
        if config.keyframe_dir is None:
            raise ConfigError("keyframe_source 'files' needs keyframe_dir")
        required.append(("keyframe_dir", str(Path(config.keyframe_dir) / "poses.txt")))
    for name, path in required:
        if path is not None and not Path(path).exists():
            raise ConfigError("{} '{}' does not exist".format(name, path))

    if config.trajectory_file is not None:
        from process_files import read_poses

        width, height = config.resolution
        for pose in read_poses(config.trajectory_file, config.pose_convention).poses:
            if not (0.0 < pose.intrinsics.cx < width and 0.0 < pose.intrinsics.cy < height):
                raise ConfigError("Principal point ({}, {}) lies outside the {}x{} render resolution".format(
                    pose.intrinsics.cx, pose.intrinsics.cy, width, height))


def load_config(path: Optional[str] = None, overrides: Optional[Dict] = None,
                set_values: Sequence[str] = (), check: bool = True) -> PipelineConfig:
    """JSON file, then explicit flag overrides, then `--set key=value` pairs; later sources win."""
    data = PipelineConfig().to_json()
    if path is not None:
        try:
            data.update(json.loads(Path(path).read_text()))
        except (OSError, ValueError) as error:
            raise ConfigError("Cannot read config {}: {}".format(path, error)) from error
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    for text in set_values:
        key, value = parse_override(text)
        data[key] = value

    validate(data)
    data["resolution"] = tuple(data["resolution"])
    config = PipelineConfig(**data)
    if check:
        check_files(config)
    logger.debug("Resolved config: %s", config)
    return config

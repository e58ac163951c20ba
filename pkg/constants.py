from typing import NamedTuple

EPSILON = 1e-12
NEAR_PLANE = 1e-4
SLERP_LINEAR_THRESHOLD = 1e-7
ORTHONORMAL_TOLERANCE = 1e-6

DEFAULT_RESOLUTION = (256, 256)
DEFAULT_FOV_DEG = 60.0

# renderer
TILE_SIZE = 16
LOW_PASS_FILTER = 0.3
ALPHA_CLAMP = 0.99
MIN_TRANSMITTANCE = 1e-4
MIN_PEAK_ALPHA = 1.0 / 255.0
FOOTPRINT_SIGMAS = 3.0

# keyframe selection
DEFAULT_TAU = 0.9
SPLAT_RADIUS_PX = 2
POINT_STRIDE = 4
VALID_ALPHA = 0.5
CONTEXT_WINDOW = 8
LABEL_FPS = 5.0

# synthetic trajectories
MAX_ROTATION_STEP_DEG = 4.5
DOLLY_PAN_DEG = 30.0

# density model
OUTPUT_SCALE = 0.1
MIN_PREDICTED_KEYFRAMES = 2
DESCRIPTOR_DIM = 16

# reconstruction
CHUNK_DURATION_S = 10.0
RECONSTRUCTED_OPACITY = 0.95
VOXELS_PER_DIAGONAL = 256

SPLAT_MAGIC = b"SPLATv1"


class ModelParams(NamedTuple):
    width: int = 64
    heads: int = 4
    layers: int = 4
    descriptor_dim: int = DESCRIPTOR_DIM
    head_layers: int = 4


class RenderSettings(NamedTuple):
    low_pass: float = LOW_PASS_FILTER
    tile_size: int = TILE_SIZE
    alpha_clamp: float = ALPHA_CLAMP
    min_transmittance: float = MIN_TRANSMITTANCE
    near_plane: float = NEAR_PLANE


DEFAULT_MODEL_PARAMS = ModelParams()
DEFAULT_RENDER_SETTINGS = RenderSettings()

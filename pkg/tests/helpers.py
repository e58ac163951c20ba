import numpy as np

from geometry import Quaternion
from scene_synth import GaussianScene

RESOLUTION = (64, 48)


def random_quaternions(count: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return [Quaternion.from_array(values) for values in rng.normal(size=(count, 4))]


def single_gaussian(mean, sigma: float, opacity: float, color, background=(0.0, 0.0, 0.0)) -> GaussianScene:
    return GaussianScene([mean], [(sigma, sigma, sigma)], [(1.0, 0.0, 0.0, 0.0)], [opacity], [color], background)

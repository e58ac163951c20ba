import math
from collections import OrderedDict
from typing import Dict, Iterator, List, NamedTuple, Sequence, Tuple

import numpy as np
import pandas as pd

import constants
from errors import DimensionMismatch

STAGES = ("density-predict", "keyframe-provide", "reconstruct", "align", "render")
PSNR_SENTINEL = "inf"


class MetricsRecord(NamedTuple):
    stage_seconds: Dict[str, float]
    frame_psnr: List[float]
    frame_holes: List[float]
    keyframe_count: int
    n_frames: int

    @property
    def total_seconds(self) -> float:
        return float(sum(self.stage_seconds.values()))

    @property
    def generation_seconds(self) -> float:
        """Total without keyframe provision, whose real cost is external generator inference."""
        return self.total_seconds - self.stage_seconds.get("keyframe-provide", 0.0)

    @property
    def generation_fps(self) -> float:
        total = self.total_seconds
        return self.n_frames / total if total > 0 else math.inf

    @property
    def render_fps(self) -> float:
        seconds = self.stage_seconds.get("render", 0.0)
        return self.n_frames / seconds if seconds > 0 else math.inf

    @property
    def keyframe_fraction(self) -> float:
        return self.keyframe_count / self.n_frames

    def mean_psnr(self) -> float:
        finite = [value for value in self.frame_psnr if math.isfinite(value)]
        if not finite:
            return math.inf if self.frame_psnr else math.nan
        return float(np.mean(finite))

    def summary(self) -> dict:
        return {"keyframe_count": self.keyframe_count,
                "n_frames": self.n_frames,
                "keyframe_fraction": self.keyframe_fraction,
                "mean_psnr": format_psnr(self.mean_psnr()) if self.frame_psnr else None,
                "mean_hole_fraction": float(np.mean(self.frame_holes)) if self.frame_holes else None,
                "total_seconds": self.total_seconds,
                "generation_seconds": self.generation_seconds,
                "generation_fps": self.generation_fps,
                "render_fps": self.render_fps}


def format_psnr(value: float):
    return PSNR_SENTINEL if math.isinf(value) else float(value)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch("Cannot compare images of shape {} and {}".format(a.shape, b.shape))
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def hole_fraction(frame, alpha_threshold: float = constants.VALID_ALPHA) -> float:
    alpha = frame.alpha if hasattr(frame, "alpha") else np.asarray(frame)
    return float(np.mean(alpha < alpha_threshold))


def crossfade_frames(keyframe_images: Sequence[np.ndarray], keyframe_indices: Sequence[int],
                     n_frames: int) -> Iterator[Tuple[int, np.ndarray]]:
    """2D baseline: every frame is the linear blend of its two bracketing keyframes."""
    indices = np.asarray(keyframe_indices)
    for frame in range(n_frames):
        right = int(np.searchsorted(indices, frame, side="left"))
        if right < len(indices) and indices[right] == frame:
            yield frame, np.asarray(keyframe_images[right], dtype=np.float32)
            continue
        if right == 0 or right == len(indices):
            nearest = 0 if right == 0 else len(indices) - 1
            yield frame, np.asarray(keyframe_images[nearest], dtype=np.float32)
            continue
        left = right - 1
        weight = (frame - indices[left]) / float(indices[right] - indices[left])
        blended = (1.0 - weight) * keyframe_images[left] + weight * keyframe_images[right]
        yield frame, blended.astype(np.float32)


def stage_table(stage_seconds: Dict[str, float]) -> pd.DataFrame:
    return pd.DataFrame({"stage": list(stage_seconds.keys()), "seconds": list(stage_seconds.values())})


def frame_table(frame_psnr: Sequence[float], frame_holes: Sequence[float]) -> pd.DataFrame:
    columns = OrderedDict([("frame", np.arange(len(frame_holes)))])
    columns["psnr"] = [format_psnr(value) for value in frame_psnr] if frame_psnr else [None] * len(frame_holes)
    columns["hole"] = list(frame_holes)
    return pd.DataFrame(columns)


def bench_table(runs: Sequence[Dict[str, float]], n_frames: int) -> pd.DataFrame:
    """Median and interquartile range per stage over repeated runs, plus a total row."""
    frame = pd.DataFrame(list(runs))
    frame["total"] = frame.sum(axis=1)
    rows = []
    for stage in frame.columns:
        values = frame[stage].to_numpy()
        q1, median, q3 = np.percentile(values, [25, 50, 75])
        rows.append({"stage": stage, "median_s": median, "iqr_s": q3 - q1, "repetitions": len(values)})
    table = pd.DataFrame(rows)
    total_median = float(table.loc[table["stage"] == "total", "median_s"].iloc[0])
    table["generation_fps"] = n_frames / total_median if total_median > 0 else math.inf
    return table

import math

import numpy as np
import pytest

from errors import DimensionMismatch
from metrics import (STAGES, MetricsRecord, bench_table, crossfade_frames, format_psnr, frame_table, hole_fraction,
                     psnr, stage_table)
from renderer import RenderedFrame


def constant_frame(alpha_value: float, shape=(48, 64)) -> RenderedFrame:
    alpha = np.full(shape, alpha_value, dtype=np.float32)
    return RenderedFrame(np.zeros(shape + (3,), np.float32), alpha, np.zeros(shape, np.float32))


class TestPsnr:
    def test_identical_images(self):
        image = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(image, image) == math.inf
        assert format_psnr(psnr(image, image)) == "inf"

    def test_black_against_grey(self):
        assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5)) == pytest.approx(10.0 * math.log10(4.0))
        assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5)) == pytest.approx(6.02, abs=0.01)

    def test_small_noise(self):
        rng = np.random.default_rng(1)
        image = rng.uniform(0.2, 0.8, size=(256, 256, 3))
        assert psnr(image, image + rng.normal(scale=0.01, size=image.shape)) == pytest.approx(40.0, abs=0.5)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestHoleFraction:
    def test_full_and_empty(self):
        assert hole_fraction(constant_frame(1.0)) == 0.0
        assert hole_fraction(constant_frame(0.0)) == 1.0

    def test_half_covered(self):
        frame = constant_frame(0.0)
        frame.alpha[:, :32] = 0.9
        assert hole_fraction(frame) == pytest.approx(0.5, abs=1.0 / (48 * 64))

    def test_threshold_is_inclusive(self):
        assert hole_fraction(constant_frame(0.5)) == 0.0
        assert hole_fraction(constant_frame(0.5), alpha_threshold=0.6) == 1.0

    def test_accepts_plain_alpha(self):
        assert hole_fraction(np.array([[0.0, 1.0]])) == 0.5


class TestCrossfade:
    def test_blend_between_keyframes(self):
        images = [np.zeros((2, 2, 3)), np.ones((2, 2, 3))]
        frames = dict(crossfade_frames(images, [0, 4], 5))
        assert sorted(frames) == [0, 1, 2, 3, 4]
        for index in range(5):
            np.testing.assert_allclose(frames[index], index / 4.0)

    def test_outside_keyframes_holds_nearest(self):
        images = [np.full((1, 1, 3), 0.2), np.full((1, 1, 3), 0.6)]
        frames = dict(crossfade_frames(images, [2, 5], 8))
        np.testing.assert_allclose(frames[0], 0.2, atol=1e-7)
        np.testing.assert_allclose(frames[7], 0.6, atol=1e-7)


class TestRecords:
    @staticmethod
    def _record(psnr_values=(30.0, math.inf)):
        stages = {stage: float(seconds) for stage, seconds in zip(STAGES, [0.1, 0.5, 1.0, 0.2, 0.2])}
        return MetricsRecord(stages, list(psnr_values), [0.0, 0.25], 6, 600)

    def test_totals(self):
        record = self._record()
        assert record.total_seconds == pytest.approx(2.0)
        assert record.generation_seconds == pytest.approx(1.5)
        assert record.generation_fps == pytest.approx(300.0)
        assert record.render_fps == pytest.approx(3000.0)
        assert record.keyframe_fraction == pytest.approx(0.01)

    def test_summary(self):
        summary = self._record().summary()
        assert summary["mean_psnr"] == 30.0
        assert summary["mean_hole_fraction"] == pytest.approx(0.125)
        assert self._record([math.inf, math.inf]).summary()["mean_psnr"] == "inf"
        assert self._record([]).summary()["mean_psnr"] is None

    def test_tables(self):
        record = self._record()
        stages = stage_table(record.stage_seconds)
        assert stages["stage"].tolist() == list(STAGES)
        frames = frame_table(record.frame_psnr, record.frame_holes)
        assert frames.columns.tolist() == ["frame", "psnr", "hole"]
        assert frames["psnr"].tolist() == [30.0, "inf"]
        assert frame_table([], [0.1, 0.2])["psnr"].isna().all()


class TestBenchTable:
    def test_single_repetition(self):
        run = {"density-predict": 0.1, "keyframe-provide": 0.3, "reconstruct": 0.4, "align": 0.05, "render": 0.15}
        table = bench_table([run], 600).set_index("stage")
        for stage, seconds in run.items():
            assert table.loc[stage, "median_s"] == pytest.approx(seconds)
            assert table.loc[stage, "iqr_s"] == 0.0
        assert table.loc["total", "median_s"] == pytest.approx(sum(run.values()))
        assert table["generation_fps"].iloc[0] == pytest.approx(600.0)

    def test_median_and_iqr(self):
        runs = [{"render": value} for value in (1.0, 2.0, 3.0, 4.0, 5.0)]
        table = bench_table(runs, 10).set_index("stage")
        assert table.loc["render", "median_s"] == 3.0
        assert table.loc["render", "iqr_s"] == 2.0
        assert table.loc["render", "repetitions"] == 5

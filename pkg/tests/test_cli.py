import json

import pytest

from cli import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_STAGE_FAILURE, get_parser, main
from process_files import read_poses, read_splat


def tiny_run_args(out_dir):
    return ["--duration_s", "2", "--fps", "5", "--keyframe_count", "4", "--output_dir", str(out_dir),
            "--set", "resolution=[32,24]", "--set", "primitive_budget=2000", "--set", "evaluate=false"]


class TestParser:
    def test_commands(self):
        parser = get_parser()
        args = parser.parse_args(["run", "--tau", "0.8", "--set", "seed=3"])
        assert args.tau == 0.8 and args.set == ["seed=3"]
        assert parser.parse_args(["bench"]).repetitions == 3
        with pytest.raises(SystemExit):
            parser.parse_args(["gen-scene", "--recipe", "castle", "--out", "x.splat"])


class TestExitCodes:
    def test_generators(self, tmp_path):
        assert main(["gen-scene", "--recipe", "checker-plane", "--budget", "500", "--out",
                     str(tmp_path / "plane.splat")]) == EXIT_OK
        assert len(read_splat(tmp_path / "plane.splat")) > 0
        assert main(["gen-traj", "--kind", "dolly", "--duration_s", "1", "--fps", "10", "--out",
                     str(tmp_path / "poses.txt")]) == EXIT_OK
        assert read_poses(tmp_path / "poses.txt").num_frames == 10

    def test_invalid_config(self, tmp_path):
        assert main(["run", "--set", "tau=3", "--output_dir", str(tmp_path)]) == EXIT_CONFIG_ERROR
        assert main(["run", "--trajectory_file", str(tmp_path / "missing.txt")]) == EXIT_CONFIG_ERROR

    def test_missing_reconstruction(self, tmp_path):
        (tmp_path / "poses.txt").write_text("0 1 0 0 0 0 0 0 10 10 5 5\n")
        assert main(["rerender", "--manifest", str(tmp_path / "absent"), "--poses", str(tmp_path / "poses.txt"),
                     "--out", str(tmp_path / "frames")]) == EXIT_STAGE_FAILURE

    def test_run_then_rerender(self, tmp_path, capsys):
        assert main(["run"] + tiny_run_args(tmp_path / "run")) == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["keyframe_count"] == 4 and summary["n_frames"] == 10
        assert main(["rerender", "--manifest", str(tmp_path / "run" / "reconstruction"), "--poses",
                     str(tmp_path / "run" / "poses.txt"), "--out", str(tmp_path / "again")]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["frames"] == 10
        assert len(list((tmp_path / "again").glob("frame_*.ppm"))) == 10


@pytest.mark.slow
class TestDensityCommands:
    def test_labels_train_predict(self, tmp_path, capsys):
        assert main(["labels", "--n_samples", "2", "--budget", "1500", "--duration_s", "1", "--fps", "10",
                     "--out", str(tmp_path / "labels.npz")]) == EXIT_OK
        assert main(["train-density", "--labels", str(tmp_path / "labels.npz"), "--out_model",
                     str(tmp_path / "density.bin"), "--steps", "3", "--batch_size", "2"]) == EXIT_OK
        assert main(["gen-traj", "--duration_s", "2", "--fps", "10", "--out", str(tmp_path / "poses.txt")]) == EXIT_OK
        capsys.readouterr()
        assert main(["predict-density", "--checkpoint", str(tmp_path / "density.bin"), "--poses",
                     str(tmp_path / "poses.txt"), "--budget", "1500"]) == EXIT_OK
        prediction = json.loads(capsys.readouterr().out)
        assert prediction["n_frames"] == 20
        assert 2 <= prediction["keyframe_count"] <= 20

"""
Unit tests for the command-line entry point (cli.py)
"""
from pathlib import Path
import pandas as pd
import pytest
import cli
from engines.errors import StageError
from engines.pipeline_engine import STAGE_NAMES, PipelineResult, RunManifest


@pytest.fixture
def pipeline_result():
    report = {"benign_accuracy": 0.95, "mean_asr": 0.9, "mean_psnr": 31.2, "min_psnr": 30.1, "mean_ssim": 0.97}
    separability = {"tsi": [2.0, 3.0], "spearman": 0.8}
    manifest = RunManifest(config_hash="x", seed=0, run_dir="runs/test")
    return PipelineResult(manifest=manifest, eval_report=report, separability=separability)


class TestParser:
    """Tests for build_parser."""

    def test_every_stage_is_a_subcommand(self):
        """Each pipeline stage can be run on its own."""
        parser = cli.build_parser()
        for name in STAGE_NAMES + ("run-all", "verify-bounds", "sweep", "verify-manifest", "report"):
            assert parser.parse_args([name]).command == name

    def test_command_required(self):
        """A bare invocation is a usage error."""
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args([])

    def test_repeatable_overrides(self):
        """--set collects every KEY=VALUE."""
        args = cli.build_parser().parse_args(["run-all", "--set", "BETA=0.1", "--set", "GRAPH_T=3"])
        assert args.overrides == ["BETA=0.1", "GRAPH_T=3"]


class TestLoadConfig:
    """Tests for load_config."""

    def test_overrides_and_seed(self):
        """--set values and --seed layer onto the default file."""
        args = cli.build_parser().parse_args(["run-all", "--set", "GRAPH_T=3", "--seed", "42"])
        config = cli.load_config(args)
        assert config.graph_t == 3.0
        assert config.seed == 42
        assert config.num_classes == 16

    def test_explicit_config_file(self, tmp_path):
        """--config replaces the default file."""
        path = tmp_path / "exp.cfg"
        path.write_text("NUM_CLASSES=5\n")
        config = cli.load_config(cli.build_parser().parse_args(["run-all", "--config", str(path)]))
        assert config.num_classes == 5


class TestExitCodes:
    """Tests for main's exit codes."""

    def test_run_all_success(self, mocker, tmp_path, pipeline_result, capsys):
        """A finished pipeline exits 0 and prints the summary."""
        run = mocker.patch("cli.run_attack_pipeline", return_value=pipeline_result)
        assert cli.main(["run-all", "--out", str(tmp_path), "--seed", "3"]) == cli.EXIT_OK
        config, out = run.call_args[0]
        assert config.seed == 3
        assert out == tmp_path
        printed = capsys.readouterr().out
        assert "95.0%" in printed
        assert "Mean TSI        : 2.5000" in printed

    def test_out_dir_from_environment(self, mocker, monkeypatch, tmp_path, pipeline_result):
        """Without --out the run directory comes from UBD_OUT_DIR."""
        monkeypatch.setenv("UBD_OUT_DIR", str(tmp_path / "env-run"))
        run = mocker.patch("cli.run_attack_pipeline", return_value=pipeline_result)
        cli.main(["run-all"])
        assert run.call_args[0][1] == Path(tmp_path / "env-run")

    def test_invalid_config_exits_2(self, tmp_path):
        """Out-of-range values are config errors."""
        assert cli.main(["run-all", "--out", str(tmp_path), "--set", "BETA=2"]) == cli.EXIT_CONFIG

    def test_malformed_override_exits_2(self, tmp_path):
        """--set needs an equals sign."""
        assert cli.main(["run-all", "--out", str(tmp_path), "--set", "BETA"]) == cli.EXIT_CONFIG

    def test_sweep_without_key_exits_2(self, tmp_path):
        """The default config names no sweep key."""
        assert cli.main(["sweep", "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    def test_non_integer_seeds_exit_2(self, mocker, tmp_path):
        """--seeds must be integers; a bad list never reaches the sweep."""
        sweep = mocker.patch("cli.run_sweep")
        code = cli.main(["sweep", "--out", str(tmp_path), "--key", "graph_t", "--values", "0,5", "--seeds", "0,x"])
        assert code == cli.EXIT_CONFIG
        sweep.assert_not_called()

    def test_stage_failure_exits_3(self, mocker, tmp_path):
        """StageError maps to exit code 3."""
        mocker.patch("cli.run_attack_pipeline", side_effect=StageError("train-victim", ValueError("boom")))
        assert cli.main(["run-all", "--out", str(tmp_path)]) == cli.EXIT_STAGE

    def test_missing_upstream_exits_3(self, tmp_path):
        """A stage run before its inputs exist fails with exit code 3."""
        assert cli.main(["encode", "--out", str(tmp_path)]) == cli.EXIT_STAGE

    @pytest.mark.parametrize("violated, expected", [
        ([False, False], cli.EXIT_OK),
        ([False, True], cli.EXIT_BOUND_VIOLATION),
    ])
    def test_verify_bounds(self, mocker, tmp_path, violated, expected):
        """Any violated grid point exits 4."""
        mocker.patch("cli.run_theory_suite", return_value=pd.DataFrame({"violated": violated}))
        assert cli.main(["verify-bounds", "--out", str(tmp_path)]) == expected

    @pytest.mark.parametrize("problems, expected", [
        ([], cli.EXIT_OK),
        (["victim"], cli.EXIT_STAGE),
    ])
    def test_verify_manifest(self, mocker, tmp_path, problems, expected):
        """Hash mismatches exit 3."""
        mocker.patch("cli.verify_manifest", return_value=problems)
        assert cli.main(["verify-manifest", "--out", str(tmp_path)]) == expected

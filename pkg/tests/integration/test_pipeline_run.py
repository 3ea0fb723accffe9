"""
Integration tests for the staged attack pipeline.
"""
import json
import pytest
import sys
import os

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..', 'src'))

from engines.pipeline_engine import (
    STAGE_NAMES,
    RunManifest,
    run_attack_pipeline,
    run_stage,
    run_sweep,
    verify_manifest,
)
from utils.charts import write_run_charts

ARTIFACTS = (
    "codes.csv",
    "graph_edges.csv",
    "trigger_loss.csv",
    "poison_records.csv",
    "per_class_asr.csv",
    "eval_report.json",
    "defenses.json",
    "separability.json",
    "tsi_per_class.csv",
)


def read_artifacts(run_dir):
    return {name: (run_dir / name).read_bytes() for name in ARTIFACTS}


class TestRunAll:
    """End-to-end runs on the cut-down configuration."""

    def test_every_stage_recorded(self, tmp_path, small_config):
        """run-all completes all nine stages and the manifest verifies."""
        result = run_attack_pipeline(small_config, tmp_path)
        assert result.manifest.stages_completed == list(STAGE_NAMES)
        assert result.manifest.status == "complete"
        assert verify_manifest(tmp_path) == []
        for name in ARTIFACTS:
            assert (tmp_path / name).is_file(), name

    def test_report_contents(self, tmp_path, small_config):
        """Evaluation and separability reports agree on the class count."""
        result = run_attack_pipeline(small_config, tmp_path)
        report = result.eval_report
        assert 0.0 <= report["benign_accuracy"] <= 1.0
        assert len(report["per_class_asr"]) == small_config.num_classes
        assert len(result.separability["tsi"]) == small_config.num_classes
        assert result.separability["empirical_asr"] == report["per_class_asr"]
        assert report["config"]["graph_t"] == small_config.graph_t
        defenses = json.loads((tmp_path / "defenses.json").read_text())
        assert set(defenses) >= {"fine_tune", "fine_prune", "strip", "strip_patch"}

    def test_clean_control_and_patch_reference(self, tmp_path, small_config):
        """Evaluation compares against a clean victim and a patch-poisoned STRIP reference."""
        report = run_attack_pipeline(small_config, tmp_path).eval_report
        assert 0.0 <= report["clean_ba"] <= 1.0
        assert report["ba_drop"] == pytest.approx(report["clean_ba"] - report["benign_accuracy"])
        assert 0.0 <= report["clean_control_asr"] <= 1.0
        defenses = json.loads((tmp_path / "defenses.json").read_text())
        patch = defenses["strip_patch"]
        assert 0.0 <= patch["auroc"] <= 1.0
        assert 0.0 <= patch["mean_asr"] <= 1.0
        assert patch["patch_size"] == 4

    @pytest.mark.slow
    def test_same_seed_byte_identical(self, tmp_path, small_config):
        """Two runs with one seed write identical artifacts."""
        run_attack_pipeline(small_config, tmp_path / "a")
        run_attack_pipeline(small_config, tmp_path / "b")
        assert read_artifacts(tmp_path / "a") == read_artifacts(tmp_path / "b")
        hashes_a = RunManifest.load(tmp_path / "a").artifacts
        hashes_b = RunManifest.load(tmp_path / "b").artifacts
        assert {k: v["sha256"] for k, v in hashes_a.items()} == {k: v["sha256"] for k, v in hashes_b.items()}

    def test_stage_rerun_from_persisted_inputs(self, tmp_path, small_config):
        """Rerunning one stage reproduces its outputs."""
        run_attack_pipeline(small_config, tmp_path)
        before = (tmp_path / "eval_report.json").read_bytes()
        manifest = run_stage("evaluate", small_config, tmp_path)
        assert (tmp_path / "eval_report.json").read_bytes() == before
        assert manifest.stages_completed.count("evaluate") == 1

    def test_code_blend_baseline(self, tmp_path, small_config):
        """The untrained baseline skips the loss history."""
        config = small_config.with_overrides(trigger_method="code_blend")
        result = run_attack_pipeline(config, tmp_path)
        assert "trigger_loss" not in result.manifest.artifacts
        assert result.eval_report["min_psnr"] >= config.psnr_threshold - 1e-3

    def test_charts_from_run(self, tmp_path, small_config):
        """Every charted artifact of a finished run gets an HTML file."""
        run_attack_pipeline(small_config, tmp_path)
        assert len(write_run_charts(tmp_path)) == 3


class TestSweep:
    """Ablation sweeps."""

    @pytest.mark.slow
    def test_threshold_sweep(self, tmp_path, small_config):
        """One row per value and seed, plus a seed-averaged summary."""
        runs = run_sweep(small_config, "GRAPH_T", ["0", "2"], [0, 1], tmp_path)
        assert len(runs) == 4
        assert set(runs["value"]) == {"0", "2"}
        assert (tmp_path / "sweep_summary.csv").is_file()
        assert (tmp_path / "graph_t=0" / "seed_1" / "manifest.json").is_file()

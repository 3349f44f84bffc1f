import json
import logging

import numpy as np
import pytest
import torch

from mvdistill.commands.registry import CommandResult, execute_command, get_command
from mvdistill.core.config import ExperimentConfig, Settings, config_hash, resolve_config
from mvdistill.core.errors import ConfigError, UnknownCommandError
from mvdistill.core.logging import get_logger, run_context, setup_logging
from mvdistill.main import main
from mvdistill.orchestrator.pipeline import RUN_MANIFEST_NAME, write_run_manifest
from mvdistill.schemas.models import EvalReport, RunManifest


@pytest.fixture(autouse=True)
def _restore_logging():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


def _error(capsys) -> dict:
    lines = [line for line in capsys.readouterr().err.splitlines() if line.strip()]
    return json.loads(lines[-1])


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Argument handling
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == 0
    assert "train-stage1" in capsys.readouterr().out


def test_unknown_flag_is_a_usage_error(capsys):
    assert main(["--bogus"]) == 2
    error = _error(capsys)
    assert error["error_code"] == "INVALID_ARGUMENTS"
    assert "--bogus" in error["message"]


def test_unknown_subcommand_flag(capsys):
    assert main(["eval", "--suite", "units", "--out", "r.json", "--frobnicate"]) == 2
    assert "--frobnicate" in _error(capsys)["message"]


def test_missing_required_flag(capsys):
    assert main(["distill", "--ckpt", "model.pt"]) == 2
    assert _error(capsys)["error_code"] == "INVALID_ARGUMENTS"


def test_no_command(capsys):
    assert main([]) == 2
    error = _error(capsys)
    assert error["error_code"] == "UNKNOWN_COMMAND"
    assert "smoke" in error["details"]["available"]


def test_bad_override_fails_before_running(tmp_path, capsys):
    code = main(["--set", "distill.guidance_scale=-1", "eval", "--suite", "units", "--out", str(tmp_path / "r.json")])
    assert code == 1
    assert _error(capsys)["error_code"] == "INVALID_CONFIG"
    assert not (tmp_path / "r.json").exists()


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Configuration
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def test_overrides_are_parsed_as_json(monkeypatch):
    monkeypatch.delenv("MVDISTILL_OUTPUT_ROOT", raising=False)
    config = resolve_config(overrides=["distill.steps=500", "denoiser.attention_mode=plain_multiview", "seed=7"])
    assert config.distill.steps == 500
    assert config.denoiser.attention_mode.value == "plain_multiview"
    assert config.seed == 7


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        resolve_config(overrides=["distill.stepz=5"])


def test_bad_types_are_rejected():
    with pytest.raises(ConfigError):
        resolve_config(overrides=["distill.steps=many"])


def test_malformed_override():
    with pytest.raises(ConfigError):
        resolve_config(overrides=["distill.steps"])


def test_file_then_overrides(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 3, "distill": {"steps": 10, "lr": 0.5}}))
    config = resolve_config(path, overrides=["distill.steps=20"])
    assert config.seed == 3
    assert config.distill.steps == 20
    assert config.distill.lr == 0.5


def test_unreadable_config_file(tmp_path):
    with pytest.raises(ConfigError):
        resolve_config(tmp_path / "missing.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        resolve_config(tmp_path / "list.json")


def test_environment_sets_the_output_root(monkeypatch, tmp_path):
    monkeypatch.setenv("MVDISTILL_OUTPUT_ROOT", str(tmp_path))
    assert resolve_config(settings=Settings()).output_root == tmp_path


def test_config_hash_ignores_excluded_keys():
    a = ExperimentConfig()
    b = resolve_config(overrides=["denoiser.attention_mode=plain_multiview"], settings=Settings(output_root=None))
    assert config_hash(a) != config_hash(b)
    assert config_hash(a, exclude=["denoiser.attention_mode"]) == config_hash(b, exclude=["denoiser.attention_mode"])


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Commands
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def test_eval_units_writes_report_and_manifest(tmp_path, capsys):
    report_path = tmp_path / "eval" / "report.json"
    assert main(["eval", "--suite", "units", "--out", str(report_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["passed"] is True and summary["failed"] == []

    report = EvalReport.model_validate_json(report_path.read_text())
    assert report.passed and report.checks
    manifest = RunManifest.model_validate_json((tmp_path / "eval" / RUN_MANIFEST_NAME).read_text())
    assert manifest.command == "eval"
    assert list(manifest.artifacts) == ["report.json"]
    assert manifest.argv[:2] == ["eval", "--suite"]


def test_failed_thresholds_exit_with_three(tmp_path, capsys):
    thresholds = tmp_path / "strict.json"
    thresholds.write_text(
        json.dumps(
            {"thresholds": [{"metric": "weight_min", "criterion": "renderer", "comparator": ">=", "threshold": 1.0}]}
        )
    )
    code = main(
        [
            "--set",
            f"eval.thresholds_path={thresholds}",
            "eval",
            "--suite",
            "units",
            "--out",
            str(tmp_path / "report.json"),
        ]
    )
    assert code == 3
    assert json.loads(capsys.readouterr().out)["failed"] == ["weight_min"]


def test_build_dataset_command(tmp_path, capsys):
    out = tmp_path / "data"
    code = main(["build-dataset", "--out", str(out), "--n-objects", "2", "--resolution", "32"])
    assert code == 0
    assert json.loads(capsys.readouterr().out) == {"n_objects": 2, "resolution": 32}
    manifest = RunManifest.model_validate_json((out / RUN_MANIFEST_NAME).read_text())
    assert manifest.config["dataset"]["n_objects"] == 2
    assert manifest.config["dataset"]["resolution"] == 32
    executed = ExperimentConfig.model_validate(manifest.config)
    assert manifest.config_hash == config_hash(executed)
    assert manifest.config_hash != config_hash(resolve_config())
    assert any(key.endswith(".png") for key in manifest.artifacts)


def test_manifest_keys_child_artifacts_by_relative_path(tmp_path):
    (tmp_path / "stage1").mkdir()
    (tmp_path / "stage1" / "model.pt").write_bytes(b"weights")
    (tmp_path / "stage1" / RUN_MANIFEST_NAME).write_text("{}")
    result = CommandResult(
        out_dir=tmp_path,
        artifacts=[tmp_path / "stage1" / "model.pt", tmp_path / "stage1" / RUN_MANIFEST_NAME, tmp_path / "gone.png"],
    )
    path = write_run_manifest(result, "smoke", ExperimentConfig())
    manifest = RunManifest.model_validate_json(path.read_text())
    assert list(manifest.artifacts) == ["stage1/model.pt"]


def test_missing_checkpoint_is_reported(tmp_path, capsys):
    code = main(
        [
            "sample-views",
            "--ckpt",
            str(tmp_path / "nope.pt"),
            "--image",
            str(tmp_path / "ref.png"),
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert code == 1
    error = _error(capsys)
    assert error["error_code"] == "CHECKPOINT_ERROR"
    assert error["component"] == "checkpoint"


@pytest.mark.slow
def test_smoke_is_reproducible(tmp_path, capsys):
    assert main(["smoke", "--out", str(tmp_path / "a")]) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(["smoke", "--out", str(tmp_path / "b")]) == 0
    second = json.loads(capsys.readouterr().out)
    assert first["digests"] == second["digests"]
    assert first["eval_passed"] is True
    for stage in ("dataset", "stage1", "stage2", "samples", "distill", "turntable", "eval"):
        assert (tmp_path / "a" / stage / RUN_MANIFEST_NAME).exists()

    top = RunManifest.model_validate_json((tmp_path / "a" / RUN_MANIFEST_NAME).read_text())
    for key in ("stage1/model.pt", "stage2/model.pt", "samples/grid.png", "distill/field.pt", "eval/report.json"):
        assert key in top.artifacts, key
    assert any(key.startswith("dataset/") for key in top.artifacts)
    assert any(key.startswith("turntable/") for key in top.artifacts)
    assert not any(key.endswith(RUN_MANIFEST_NAME) for key in top.artifacts)
    stage2 = RunManifest.model_validate_json((tmp_path / "a" / "stage2" / RUN_MANIFEST_NAME).read_text())
    assert stage2.config["stage2"]["steps"] == 100


# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━
# Registry & logging
# ━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━━


def test_registry_lookup():
    assert get_command("eval")["name"] == "eval"
    assert get_command("nope") is None
    with pytest.raises(UnknownCommandError):
        execute_command("nope", ExperimentConfig(), None)


def test_log_lines_carry_the_run_context(capsys):
    setup_logging("INFO", json_logs=True)
    logger = get_logger("mvdistill.test")
    with run_context(command="train-stage1", stage="stage1", step=None):
        logger.info("step_done", loss=np.float32(0.5), t=torch.tensor(7))
    logger.info("after")
    lines = [json.loads(line) for line in capsys.readouterr().err.splitlines() if line.strip()]
    assert [line["event"] for line in lines] == ["step_done", "after"]
    assert lines[0]["stage"] == "stage1" and lines[0]["command"] == "train-stage1"
    assert "step" not in lines[0]
    assert lines[0]["loss"] == 0.5 and lines[0]["t"] == 7
    assert "stage" not in lines[1]

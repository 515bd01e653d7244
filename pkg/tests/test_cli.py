"""
Tests for the command line: exit codes and the subcommands end to end.
"""
import json
import logging

import pytest
import torch

from sdd.container import DATASET_INDEX, read_dataset_manifest
from sdd.engine import load_checkpoint
from sdd.main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, main, settings_overrides
from sdd.models import build_model, model_config_for

from .conftest import TEST_FILTERS, TEST_LATENT, TEST_SIZE


def _run(argv):
    """main() with the root logger restored afterwards."""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    try:
        return main([str(a) for a in argv])
    finally:
        for handler in list(root.handlers):
            if handler not in handlers:
                root.removeHandler(handler)
                handler.close()
        for handler in handlers:
            if handler not in root.handlers:
                root.addHandler(handler)
        root.setLevel(level)


@pytest.fixture(scope="module")
def cli_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "config.json"
    path.write_text(json.dumps({
        "SPECTROGRAM_SIZE": TEST_SIZE,
        "MODEL_FILTERS": list(TEST_FILTERS),
        "LATENT_CHANNELS": TEST_LATENT,
        "MAX_WORKERS": 1,
        "BATCH_SIZE": 8,
        "LOG_LEVEL": "WARNING",
        "FAILED_DELIVERY_LOG": str(path.parent / "failed.jsonl"),
    }))
    return path


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, dataset_dir, cli_config):
    """A frozen-weights macc checkpoint trained through the CLI."""
    ckpt = tmp_path_factory.mktemp("ckpt") / "macc.ckpt"
    code = _run(["train", "--model", "macc", "--data", dataset_dir, "--out", ckpt, "--config", cli_config,
                 "--epochs", 1, "--lr", 0, "--seed", 3, "--loss", "mse"])
    assert code == EXIT_OK
    return ckpt


# =================
# Exit codes
# =================

@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["train", "--model", "macc"],
    ["train", "--model", "nope", "--data", "d", "--out", "o"],
    ["eval", "--ckpt", "c", "--data", "d", "--report", "r", "--bogus"],
])
def test_bad_arguments_exit_with_usage_error(argv, capsys):
    assert _run(argv) == EXIT_USAGE
    assert "error:" in capsys.readouterr().err


def test_missing_data_directory_is_a_usage_error(tmp_path, cli_config):
    argv = ["train", "--model", "macc", "--data", tmp_path / "nowhere", "--out", tmp_path / "m.ckpt",
            "--config", cli_config]

    assert _run(argv) == EXIT_USAGE


def test_invalid_config_is_a_usage_error(tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"FILTER_ORDER": 3}))

    assert _run(["generate", "--out", tmp_path / "data", "--config", config]) == EXIT_USAGE
    assert not (tmp_path / "data").exists()


def test_corrupt_checkpoint_is_a_runtime_error(tmp_path, dataset_dir, cli_config):
    ckpt = tmp_path / "broken.ckpt"
    ckpt.write_bytes(b"not a checkpoint")

    code = _run(["eval", "--ckpt", ckpt, "--data", dataset_dir, "--report", tmp_path / "r.json",
                 "--config", cli_config])
    assert code == EXIT_RUNTIME
    assert not (tmp_path / "r.json").exists()


def test_settings_overrides_map_flags_to_fields():
    parser = build_parser()
    train = parser.parse_args(["train", "--model", "macc", "--data", "d", "--out", "o", "--epochs", "3",
                               "--lr", "0.01", "--workers", "2"])
    generate = parser.parse_args(["generate", "--out", "o", "--seed", "9"])

    assert settings_overrides(train) == {"EPOCHS": 3, "LEARNING_RATE": 0.01, "MAX_WORKERS": 2}
    assert settings_overrides(generate) == {}


# =================
# Subcommands
# =================

def test_generate_writes_a_dataset(tmp_path, cli_config, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_damage": 1, "imbalance": 2, "recording_seconds": 3.0}))
    out = tmp_path / "data"

    assert _run(["generate", "--spec", spec, "--out", out, "--seed", 5, "--config", cli_config]) == EXIT_OK
    assert (out / DATASET_INDEX).exists()
    manifest = read_dataset_manifest(out)
    assert len(manifest.entries) == 3
    assert manifest.spec.seed == 5
    assert "Generated 3 recordings (1 damage)" in capsys.readouterr().out


def test_generate_rejects_an_invalid_spec(tmp_path, cli_config):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_damage": -1}))

    assert _run(["generate", "--spec", spec, "--out", tmp_path / "data", "--config", cli_config]) == EXIT_USAGE


def test_train_with_zero_learning_rate_keeps_initial_weights(checkpoint):
    graph, metadata = load_checkpoint(checkpoint)
    initial = build_model(model_config_for("macc", input_size=TEST_SIZE, filters=TEST_FILTERS,
                                           latent_channels=TEST_LATENT, sparsity=False, seed=3))

    assert metadata["model_id"] == "macc"
    assert metadata["loss_id"] == "mse"
    for (name, trained), (_, fresh) in zip(graph.named_parameters(), initial.named_parameters()):
        assert torch.equal(trained.detach(), fresh.detach()), name
    assert checkpoint.with_name("macc_history.csv").exists()


def test_eval_then_report(tmp_path, checkpoint, dataset_dir, cli_config):
    report_path = tmp_path / "macc.json"
    roc_path = tmp_path / "macc_roc.csv"
    code = _run(["eval", "--ckpt", checkpoint, "--data", dataset_dir, "--report", report_path,
                 "--roc-csv", roc_path, "--no-timing", "--config", cli_config])

    assert code == EXIT_OK
    report = json.loads(report_path.read_text())
    assert report["model_id"] == "macc"
    assert report["auc_aud"] is None
    assert 0.0 <= report["auc_best"] <= 1.0
    assert "mean_inference_ms" not in report
    assert roc_path.read_text().startswith("modality,fpr,tpr,threshold")

    summary = tmp_path / "summary.md"
    assert _run(["report", "--inputs", report_path, "--out", summary, "--config", cli_config]) == EXIT_OK
    assert "| macc | mse |" in summary.read_text()


def test_report_of_missing_file_is_a_usage_error(tmp_path, cli_config):
    code = _run(["report", "--inputs", tmp_path / "absent.json", "--out", tmp_path / "s.md", "--config", cli_config])

    assert code == EXIT_USAGE


def test_run_streams_the_test_split_to_a_file_sink(tmp_path, checkpoint, dataset_dir, cli_config, capsys):
    out = tmp_path / "detections.jsonl"
    _, metadata = load_checkpoint(checkpoint)
    n_test = len(metadata["split"]["test"])

    code = _run(["run", "--ckpt", checkpoint, "--data", dataset_dir, "--sink", f"file:{out}",
                 "--threshold", -1, "--config", cli_config])
    assert code == EXIT_OK
    lines = out.read_text().splitlines()
    assert len(lines) == n_test
    assert {json.loads(line)["source_id"] for line in lines} == set(metadata["split"]["test"])
    assert f"{n_test} trigger(s): {n_test} damage, 0 background" in capsys.readouterr().out


def test_run_all_streams_every_recording(tmp_path, checkpoint, dataset_dir, cli_config):
    out = tmp_path / "detections.jsonl"

    code = _run(["run", "--ckpt", checkpoint, "--data", dataset_dir, "--sink", f"file:{out}",
                 "--threshold", -1, "--all", "--config", cli_config])
    assert code == EXIT_OK
    assert len(out.read_text().splitlines()) == 12


def test_run_with_calibrated_threshold(tmp_path, checkpoint, dataset_dir, cli_config, capsys):
    out = tmp_path / "detections.jsonl"

    code = _run(["run", "--ckpt", checkpoint, "--data", dataset_dir, "--sink", f"file:{out}",
                 "--config", cli_config])
    assert code == EXIT_OK
    assert "trigger(s):" in capsys.readouterr().out

import json
import os
import sys

import pytest
import yaml

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import chorus  # noqa: E402
from runtime.commands import (cmd_customize, cmd_evaluate, cmd_experiment, cmd_generate, cmd_pretrain,  # noqa: E402
                              cmd_probe, cmd_shift, cmd_stream)
from runtime.config import validate_config  # noqa: E402

FAST = {"lr": 1e-3, "batch_size": 16, "max_epochs": 1, "patience": 2}


def tiny_config(out_dir) -> dict:
    return {
        "seed": 0,
        "data": {"num_classes": 3, "channels": 2, "length": 16, "samples_per_cell": 10, "seed": 0},
        "model": {"channels": 2, "length": 16, "latent": 4, "text_dim": 8, "hidden": 4, "num_classes": 3,
                  "conv_channels": [3, 4], "kernel": 3, "stride": 2, "decoder_hidden": 6,
                  "context_hidden": 5, "controller_hidden": 3},
        "pretrain": {"regime": "weak", "optimizer": FAST},
        "customize": {"budget": 0.2, "optimizer": FAST},
        "stream": {"capacity": 4, "trace_length": 60, "switch_points": [20, 40]},
        "experiment": {"methods": ["chorus", "sensor_only"], "seeds": [0], "budget": 0.2},
        "paths": {"out_dir": str(out_dir)},
    }


def run_pipeline(out_dir) -> dict:
    config = validate_config(tiny_config(out_dir))
    results = {
        "generate": cmd_generate(config),
        "shift": cmd_shift(config),
        "pretrain": cmd_pretrain(config),
        "customize": cmd_customize(config),
        "evaluate": cmd_evaluate(config),
        "stream": cmd_stream(config, canonical=True),
        "probe": cmd_probe(config),
    }
    return results


def test_pipeline_writes_every_artifact(tmp_path):
    results = run_pipeline(tmp_path)
    for verb, result in results.items():
        assert result["success"], (verb, result)
    for name in ("dataset.jsonl", "shift.json", "shift.csv", "model.chor", "pretrain_report.json",
                 "model_head.chor", "customize_report.json", "evaluation.csv", "evaluation.json",
                 "trace.jsonl", "stream.json", "stream_samples.csv", "probe.json"):
        assert (tmp_path / name).exists(), name

    assert results["generate"]["records"] == 5 * 3 * 10
    assert set(results["shift"]["tiers"].values()) == {"Low", "Mid", "High"}
    assert results["shift"]["regime"] in ("weak", "medium", "strong")
    assert results["pretrain"]["regime"] == "weak"
    assert results["customize"]["labeled"] == 12
    assert results["stream"]["encoder_invocations"] == 3
    assert results["stream"]["mean_latency_ns"] == 0
    assert len(results["probe"]["contexts"]) == 5


def test_pipeline_is_deterministic(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    run_pipeline(first)
    run_pipeline(second)
    for name in ("dataset.jsonl", "model.chor", "model_head.chor", "trace.jsonl", "stream.json",
                 "evaluation.json", "probe.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_rerun_without_force_fails_cleanly(tmp_path):
    config = validate_config(tiny_config(tmp_path))
    assert cmd_generate(config)["success"]
    result = cmd_generate(config)
    assert result == {"success": False, "error": result["error"], "error_type": "StorageError"}
    assert cmd_generate(config, force=True)["success"]


def test_commands_report_missing_inputs(tmp_path):
    config = validate_config(tiny_config(tmp_path))
    result = cmd_customize(config)
    assert not result["success"]
    assert result["error_type"] == "StorageError"


def test_evaluate_untrained_head(tmp_path):
    config = validate_config(tiny_config(tmp_path))
    cmd_generate(config)
    cmd_pretrain(config)
    result = cmd_evaluate(config, untrained=True)
    assert result["success"]
    assert 0.0 <= result["overall"]["accuracy"] <= 1.0


def test_experiment_command(tmp_path):
    config = validate_config(tiny_config(tmp_path))
    result = cmd_experiment(config)
    assert result["success"], result
    assert result["rows"] == 2 * 3
    for name in ("results.csv", "summary.csv", "diagnostics.csv", "results.json"):
        assert (tmp_path / name).exists(), name


def test_cli_config_error_exits_with_2(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"stream": {"capacity": 0}}))
    assert chorus.run(["stream", "--config", str(path)]) == 2
    record = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert record["success"] is False
    assert record["error_type"] == "ConfigurationError"
    assert "stream.capacity" in record["error"]


def test_cli_capacity_flag_is_validated(tmp_path):
    assert chorus.run(["stream", "--out", str(tmp_path), "--capacity", "0"]) == 2


def test_cli_generate_and_refuse_overwrite(tmp_path, capsys):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(tiny_config(tmp_path)))
    assert chorus.run(["generate", "--config", str(path)]) == 0
    assert chorus.run(["generate", "--config", str(path)]) == 1
    assert chorus.run(["generate", "--config", str(path), "--force", "--seed", "5"]) == 0
    last = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert last["records"] == 150


@pytest.mark.parametrize("verb", ["evaluate", "stream", "probe"])
def test_cli_verbs_fail_without_artifacts(tmp_path, verb):
    assert chorus.run([verb, "--out", str(tmp_path)]) == 1


def test_stream_replays_a_trace_file(tmp_path):
    results = run_pipeline(tmp_path)
    assert results["stream"]["success"]
    first = (tmp_path / "stream.json").read_bytes()
    config = validate_config(tiny_config(tmp_path))
    replay = cmd_stream(config, force=True, canonical=True, trace=str(tmp_path / "trace.jsonl"))
    assert replay["success"], replay
    assert replay["encoder_invocations"] == 3
    assert (tmp_path / "stream.json").read_bytes() == first


def test_stream_with_missing_trace_file(tmp_path):
    run_pipeline(tmp_path)
    config = validate_config(tiny_config(tmp_path))
    result = cmd_stream(config, force=True, trace=str(tmp_path / "absent.jsonl"))
    assert result["error_type"] == "StorageError"

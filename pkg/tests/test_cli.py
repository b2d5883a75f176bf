"""Command surface: end-to-end flow, determinism, error contract."""

from __future__ import annotations

import json
import os
from pathlib import Path

import pytest

from streambasis.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth fixture plus a small run config, shared by the flow tests."""
    root = tmp_path_factory.mktemp("cli")
    code = main([
        "synth", "--groups", "4", "--units-per-attr", "50", "--rho", "0.1",
        "--records", "1200", "--seed", "7", "--out", str(root),
    ])
    assert code == 0
    cfg = json.loads((root / "run_config.json").read_text())
    cfg["window_seconds"] = 100.0
    cfg["output_dir"] = str(root / "run")
    cfg["train"] = {"dim": 16, "epochs": 3}
    cfg["clusters_fraction"] = 0.08
    cfg["basis_fraction"] = 0.2
    cfg["eval"] = {"target_attribute": "attr_1", "query_windows": 2}
    config_path = root / "cfg.json"
    config_path.write_text(json.dumps(cfg))
    return root, config_path


def run_ok(args: list[str], capsys) -> dict:
    code = main(args)
    captured = capsys.readouterr()
    assert code == 0, captured.err
    return json.loads(captured.out.strip().splitlines()[-1])


class TestFlow:
    def test_inspect(self, workspace, capsys):
        root, config = workspace
        out = run_ok(["inspect", "--config", str(config)], capsys)
        assert out["records"] == 1200
        assert out["vocabulary"] == {"attr_0": 50, "attr_1": 50}
        run_dir = root / "run"
        assert (run_dir / "novelty_attr_0.csv").exists()
        assert (run_dir / "novelty_attr_0.png").exists()
        assert (run_dir / "inspect_config.json").exists()
        header = (run_dir / "novelty_attr_0.csv").read_text().splitlines()[0]
        assert header == "window_id,fraction"

    def test_pretrain_then_stream(self, workspace, capsys):
        root, config = workspace
        out = run_ok(["pretrain", "--config", str(config)], capsys)
        assert Path(out["model"]).exists()
        out = run_ok(["stream", "--config", str(config)], capsys)
        assert out["windows_processed"] > 0
        run_dir = root / "run"
        reports = [
            json.loads(line)
            for line in (run_dir / "window_reports.jsonl").read_text().splitlines()
        ]
        assert all("window_id" in r for r in reports)
        assert (run_dir / "epoch_loss.csv").exists()
        assert (run_dir / "stream.png").exists()

    def test_eval_all_models(self, workspace, capsys):
        _, config = workspace
        by_model = {}
        for model, extra in (
            ("compressed", []),
            ("dense", []),
            ("dim-reduct", ["--dim", "8"]),
            ("quantize", ["--bits", "2"]),
            ("hash-trick", ["--gamma", "0.2"]),
        ):
            out = run_ok(["eval", "--config", str(config), "--model", model, *extra], capsys)
            assert 0.0 <= out["mrr"] <= 1.0
            assert out["model_bytes"] > 0
            by_model[model] = out
        assert "memory_breakdown" in by_model["compressed"]

    def test_eval_is_deterministic(self, workspace, capsys):
        _, config = workspace
        first = run_ok(["eval", "--config", str(config), "--model", "compressed"], capsys)
        second = run_ok(["eval", "--config", str(config), "--model", "compressed"], capsys)
        assert first["mrr"] == second["mrr"]
        assert first["recalls"] == second["recalls"]

    def test_metrics_csv_contract(self, workspace, capsys):
        root, config = workspace
        run_ok(["eval", "--config", str(config), "--model", "compressed"], capsys)
        lines = (root / "run" / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "window_id,n_queries,mrr,r_at_1,r_at_5"
        assert len(lines) == 3  # header + two query windows
        assert (root / "run" / "metrics.png").exists()

    def test_bench(self, workspace, capsys):
        root, config = workspace
        out = run_ok(["bench", "--config", str(config), "--p-values", "1,2"], capsys)
        assert [row["workers"] for row in out["rows"]] == [1, 2]
        lines = (root / "run" / "bench.csv").read_text().strip().splitlines()
        assert lines[0] == "p,ms_per_record,mrr"
        assert (root / "run" / "bench.png").exists()

    def test_parallel_stream_command(self, workspace, capsys):
        root, config = workspace
        run_ok(["pretrain", "--config", str(config)], capsys)
        out = run_ok(["stream", "--config", str(config), "--p", "2"], capsys)
        assert out["workers"] == 2


class TestErrorContract:
    def test_missing_config_is_machine_readable(self, capsys):
        code = main(["inspect", "--config", "/nonexistent/cfg.json"])
        captured = capsys.readouterr()
        assert code == 1
        err = json.loads(captured.err.strip())
        assert err["error"] == "ConfigError"

    def test_bad_dataset_path(self, tmp_path, capsys):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({
            "dataset": "/nope.csv", "seed": 1, "output_dir": str(tmp_path),
            "attributes": [{"name": "a", "kind": "categorical", "column": "a"}],
        }))
        assert main(["inspect", "--config", str(config)]) == 1

    def test_missing_seed_rejected(self, tmp_path, capsys):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({
            "dataset": "/nope.csv", "seed": -1, "output_dir": str(tmp_path),
            "attributes": [{"name": "a", "kind": "categorical", "column": "a"}],
        }))
        assert main(["inspect", "--config", str(config)]) == 1

    def test_config_echo_written(self, workspace, capsys):
        root, config = workspace
        run_ok(["inspect", "--config", str(config)], capsys)
        echo = json.loads((root / "run" / "inspect_config.json").read_text())
        assert echo["seed"] == 7
        assert echo["train"]["dim"] == 16
        assert echo["compression"]["l1_weight"] == 0.001


class TestEnvOverrides:
    def test_output_dir_env(self, workspace, capsys, monkeypatch, tmp_path):
        _, config = workspace
        override = tmp_path / "env_out"
        monkeypatch.setenv("STREAMBASIS_OUTPUT_DIR", str(override))
        run_ok(["inspect", "--config", str(config)], capsys)
        assert (override / "inspect_summary.json").exists()

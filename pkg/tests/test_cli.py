"""Tests for the command line interface."""

import json
import shutil
from pathlib import Path

import pytest

from sent_lab.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, run_cli
from sent_lab.const import (
    DATASET_FILE,
    DEFAULT_CONFIG_FILE,
    DIAGNOSTICS_FILE,
    DYNAMICS_FILE,
    DYNAMICS_SUMMARY_FILE,
    EVAL_REPORT_FILE,
    METRICS_FILE,
    ORDER_FILE,
    POLICY_FILE,
    PROFILE_FILE,
)

from .helpers import SMALL_RUN

ROOT = Path(__file__).resolve().parent.parent


def _small(out, *extra):
    args = ["--out", str(out)]
    for key, value in SMALL_RUN.items():
        if key != "seed":
            args += ["--set", f"{key}={value}"]
    return [*extra, *args]


@pytest.fixture(autouse=True)
def _isolated_cwd(tmp_path, monkeypatch):
    # keep the shipped config/desk.yaml out of reach
    monkeypatch.chdir(tmp_path)


class TestUsage:
    def test_unknown_command(self):
        assert run_cli(["fly"]) == EXIT_USAGE

    def test_bad_k_list(self, tmp_path):
        assert run_cli(["eval", "--seed", "1", "--k", "8,x"]) == EXIT_USAGE

    def test_malformed_override(self, tmp_path):
        assert run_cli(["gen-data", "--seed", "1", "--set", "task.count"]) == EXIT_USAGE

    def test_invalid_value(self, tmp_path):
        args = ["gen-data", "--seed", "1", "--set", "train.group_size=1"]
        assert run_cli([*args, "--out", str(tmp_path)]) == EXIT_USAGE

    def test_deterministic_needs_seed(self, tmp_path):
        assert run_cli(["gen-data", "--out", str(tmp_path)]) == EXIT_USAGE
        assert not (tmp_path / DATASET_FILE).exists()

    def test_seed_in_config_file_is_not_enough(self, tmp_path):
        (tmp_path / "config").mkdir()
        shutil.copy(ROOT / DEFAULT_CONFIG_FILE, tmp_path / DEFAULT_CONFIG_FILE)
        out = tmp_path / "out"
        args = ["gen-data", "--out", str(out), "--set", "task.count=4"]
        assert run_cli(args) == EXIT_USAGE
        assert not (out / DATASET_FILE).exists()
        assert run_cli([*args, "--seed", "1"]) == EXIT_OK
        assert (out / DATASET_FILE).is_file()

    def test_missing_config_file(self, tmp_path):
        assert run_cli(["gen-data", "--config", str(tmp_path / "none.yaml")]) == EXIT_USAGE

    def test_missing_dataset(self, tmp_path):
        assert run_cli(_small(tmp_path, "se-profile", "--seed", "7")) == EXIT_FAILURE


class TestPipeline:
    def test_full_pipeline(self, tmp_path):
        out = tmp_path / "run"
        assert run_cli(_small(out, "gen-data", "--seed", "7")) == EXIT_OK
        assert run_cli(_small(out, "se-profile", "--seed", "7")) == EXIT_OK
        assert (out / PROFILE_FILE).is_file()
        order = json.loads((out / ORDER_FILE).read_text(encoding="utf-8"))
        assert sorted(order["order"]) == list(range(20))
        assert order["se"] == sorted(order["se"])

        assert run_cli(_small(out, "train", "--seed", "7", "--steps", "2")) == EXIT_OK
        assert (out / POLICY_FILE).is_file()
        assert (out / METRICS_FILE).read_text(encoding="utf-8").count("\n") == 3
        diagnostics = json.loads((out / DIAGNOSTICS_FILE).read_text(encoding="utf-8"))
        assert diagnostics["run_info"]["mode"] == "sent"

        assert run_cli(_small(out, "eval", "--seed", "7", "--k", "2,4")) == EXIT_OK
        report = json.loads((out / EVAL_REPORT_FILE).read_text(encoding="utf-8"))
        assert report["k"] == [2, 4]
        assert set(report["splits"]) == {"all", "hardest_quintile"}
        assert report["splits"]["hardest_quintile"]["num_queries"] == 4

    def test_resume(self, tmp_path):
        out = tmp_path / "run"
        assert run_cli(_small(out, "gen-data", "--seed", "7")) == EXIT_OK
        assert run_cli(_small(out, "train", "--seed", "7", "--mode", "grpo")) == EXIT_OK
        full = (out / METRICS_FILE).read_bytes()
        checkpoint = out / "checkpoints" / "step_000002.txt"
        args = _small(out, "train", "--seed", "7", "--mode", "grpo", "--resume", str(checkpoint))
        assert run_cli(args) == EXIT_OK
        assert (out / METRICS_FILE).read_bytes() == full

    def test_sent_train_needs_profile(self, tmp_path):
        out = tmp_path / "run"
        assert run_cli(_small(out, "gen-data", "--seed", "7")) == EXIT_OK
        assert run_cli(_small(out, "train", "--seed", "7")) == EXIT_FAILURE

    def test_grpo_eval_without_profile_needs_all_split(self, tmp_path):
        out = tmp_path / "run"
        assert run_cli(_small(out, "gen-data", "--seed", "7")) == EXIT_OK
        assert run_cli(_small(out, "train", "--seed", "7", "--mode", "grpo")) == EXIT_OK
        assert run_cli(_small(out, "eval", "--seed", "7")) == EXIT_FAILURE
        args = _small(out, "eval", "--seed", "7", "--set", "eval.splits=[all]")
        assert run_cli(args) == EXIT_OK

    def test_config_file(self, tmp_path):
        config = tmp_path / "lab.yaml"
        config.write_text(f"seed: 5\noutput_dir: {tmp_path / 'from_file'}\n", encoding="utf-8")
        args = ["gen-data", "--seed", "5", "--config", str(config)]
        args += ["--set", "task.count=6"]
        assert run_cli(args) == EXIT_OK
        assert (tmp_path / "from_file" / DATASET_FILE).read_text(encoding="utf-8").count("\n") == 6


class TestVerifyDynamics:
    def test_reproducible(self, tmp_path):
        for name in ("a", "b"):
            assert run_cli(_small(tmp_path / name, "verify-dynamics", "--seed", "3")) == EXIT_OK
        for name in (DYNAMICS_FILE, DYNAMICS_SUMMARY_FILE):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        summary = json.loads((tmp_path / "a" / DYNAMICS_SUMMARY_FILE).read_text(encoding="utf-8"))
        assert summary["pass"]
        assert summary["identity_trials"] == 20

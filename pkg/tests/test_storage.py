"""Tests for run artifact storage."""

from pathlib import Path

import numpy as np
import pytest

from sent_lab.const import METRICS_COLUMNS
from sent_lab.curriculum import build_curriculum, profile_dataset
from sent_lab.errors import MissingArtifactError, SentLabError
from sent_lab.policy import PolicyParams
from sent_lab.storage import (
    MetricsWriter,
    load_curriculum,
    load_dataset,
    load_policy,
    load_profiles,
    read_csv,
    read_jsonl,
    save_curriculum,
    save_dataset,
    save_policy,
    save_profiles,
    snapshot_metadata,
)
from sent_lab.task_env import DEFAULT_VOCAB

FIXTURES = Path(__file__).parent / "fixtures"


def _row(step, **values):
    row = dict.fromkeys(METRICS_COLUMNS, 0.0)
    row.update(step=step, stage=0, **values)
    return row


class TestDataset:
    def test_round_trip(self, tmp_path, dataset):
        path = save_dataset(tmp_path / "dataset.jsonl", dataset)
        assert load_dataset(path) == dataset
        assert [q.difficulty_meta for q in load_dataset(path)] == [
            q.difficulty_meta for q in dataset
        ]

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_dataset(tmp_path / "absent.jsonl")

    def test_incomplete_record(self, tmp_path):
        path = tmp_path / "dataset.jsonl"
        path.write_text('{"id": 0, "answer": 3}\n', encoding="utf-8")
        with pytest.raises(SentLabError):
            load_dataset(path)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text('{"id": 0}\n{not json\n', encoding="utf-8")
        with pytest.raises(SentLabError, match="broken.jsonl:2"):
            read_jsonl(path)


class TestProfiles:
    def test_round_trip_keeps_unparsed_cluster(self, tmp_path, dataset, policy):
        profiles = profile_dataset(policy, dataset[:6], num_samples=6, seed=5, max_len=4)
        path = save_profiles(tmp_path / "se_profile.jsonl", profiles)
        loaded = load_profiles(path)
        assert [p.query_id for p in loaded] == [p.query_id for p in profiles]
        for before, after in zip(profiles, loaded, strict=True):
            assert after.se == before.se
            assert [c.key for c in after.clusters] == [c.key for c in before.clusters]
            assert after.cluster_sizes == before.cluster_sizes
            np.testing.assert_array_equal(after.normalized_probs, before.normalized_probs)

    def test_none_cluster_written_as_marker(self, tmp_path, dataset, policy):
        # a short length cap leaves many responses without an answer
        profiles = profile_dataset(policy, dataset[:6], num_samples=6, seed=5, max_len=2)
        path = save_profiles(tmp_path / "se_profile.jsonl", profiles)
        keys = [key for record in read_jsonl(path) for key in record["cluster_keys"]]
        assert "NONE" in keys
        assert None in [c.key for p in load_profiles(path) for c in p.clusters]


class TestCurriculum:
    def test_round_trip(self, tmp_path, dataset):
        se = {query.id: float(query.id % 4) for query in dataset}
        plan = build_curriculum(dataset, se, 3)
        path = save_curriculum(tmp_path / "curriculum_order.json", plan, se)
        assert load_curriculum(path) == plan


class TestMetricsWriter:
    def test_header_matches_fixture(self, tmp_path):
        path = tmp_path / "metrics.csv"
        with MetricsWriter(path, METRICS_COLUMNS):
            pass
        expected = (FIXTURES / "metrics_header.csv").read_text(encoding="utf-8").strip()
        assert path.read_text(encoding="utf-8").strip() == expected

    def test_full_precision_and_flush(self, tmp_path):
        path = tmp_path / "metrics.csv"
        writer = MetricsWriter(path, METRICS_COLUMNS)
        writer.write(_row(1, mean_entropy=0.1 + 0.2, term1=None, ratio_clamped=True))
        rows = read_csv(path)
        writer.close()
        assert rows[0]["mean_entropy"] == repr(0.1 + 0.2)
        assert rows[0]["term1"] == ""
        assert rows[0]["ratio_clamped"] == "1"

    def test_resume_trims_later_rows(self, tmp_path):
        path = tmp_path / "metrics.csv"
        with MetricsWriter(path, METRICS_COLUMNS) as writer:
            for step in range(1, 5):
                writer.write(_row(step))
        with MetricsWriter(path, METRICS_COLUMNS, resume_after=2) as writer:
            writer.write(_row(3, objective=1.5))
        rows = read_csv(path)
        assert [row["step"] for row in rows] == ["1", "2", "3"]
        assert rows[-1]["objective"] == "1.5"

    def test_missing_column(self, tmp_path):
        with MetricsWriter(tmp_path / "metrics.csv", METRICS_COLUMNS) as writer:
            with pytest.raises(SentLabError):
                writer.write({"step": 1})


class TestPolicySnapshot:
    def _table(self, policy):
        for query_id, window in [(0, ()), (0, (15,)), (3, (15, 4))]:
            state = policy.allocate((query_id, window))
            policy.set_row(state, np.linspace(-1.0, 1.0, policy.vocab_size) * (state + 1) / 3)
        return policy

    def test_round_trip_is_exact(self, tmp_path, policy):
        table = self._table(policy)
        path = save_policy(tmp_path / "policy.txt", table, step=12)
        loaded = load_policy(path, DEFAULT_VOCAB, table.initializer)
        assert loaded.keys == table.keys
        np.testing.assert_array_equal(loaded.logits, table.logits)

    def test_metadata(self, tmp_path, policy):
        path = save_policy(tmp_path / "policy.txt", policy, step=12)
        assert snapshot_metadata(path) == {
            "context_window": str(policy.context_window),
            "vocab_size": str(DEFAULT_VOCAB.size),
            "step": "12",
        }

    def test_bandit_table(self, tmp_path):
        params = PolicyParams(5, context_window=0)
        params.set_row(params.allocate((0, ())), np.arange(5.0))
        loaded = load_policy(save_policy(tmp_path / "bandit.txt", params), 5)
        np.testing.assert_array_equal(loaded.row(0), np.arange(5.0))

    def test_vocab_mismatch(self, tmp_path):
        params = PolicyParams(5, context_window=0)
        path = save_policy(tmp_path / "bandit.txt", params)
        with pytest.raises(SentLabError, match="expected 6"):
            load_policy(path, 6)

    def test_not_a_snapshot(self, tmp_path):
        path = tmp_path / "other.txt"
        path.write_text("hello\n", encoding="utf-8")
        with pytest.raises(SentLabError):
            load_policy(path, DEFAULT_VOCAB)
        with pytest.raises(SentLabError):
            snapshot_metadata(path)

    def test_truncated_line(self, tmp_path):
        params = PolicyParams(4, context_window=0)
        params.allocate((0, ()))
        path = save_policy(tmp_path / "bandit.txt", params)
        path.write_text(path.read_text(encoding="utf-8") + "0\t-\t1\n", encoding="utf-8")
        with pytest.raises(SentLabError, match="4 fields"):
            load_policy(path, 4)

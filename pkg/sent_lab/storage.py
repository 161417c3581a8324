"""Reading and writing run artifacts."""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
import csv
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from .const import NONE_CLUSTER_KEY, POLICY_SNAPSHOT_HEADER
from .curriculum import Cluster, CurriculumPlan, SemanticProfile
from .errors import MissingArtifactError, SentLabError
from .grpo import TokenBatch
from .policy import PolicyParams, RowInitializer
from .task_env import Query, Vocabulary

_LOGGER = logging.getLogger(__name__)


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingArtifactError(f"required artifact {path} not found")
    return path


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _to_builtin(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(key): _to_builtin(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_builtin(item) for item in value]
    if isinstance(value, np.ndarray):
        return [_to_builtin(item) for item in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path: Path, payload: Mapping[str, Any]) -> Path:
    """Write a JSON document with sorted keys."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(_to_builtin(payload), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return path


def read_json(path: Path) -> Any:
    """Read a JSON document."""
    return json.loads(_require(path).read_text(encoding="utf-8"))


def write_jsonl(path: Path, records: Iterable[Mapping[str, Any]]) -> Path:
    """Write one JSON object per line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(_to_builtin(record), sort_keys=True) + "\n")
    return path


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    """Read one JSON object per non-blank line."""
    records = []
    with _require(path).open(encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise SentLabError("format", f"{path}:{number}: {err}") from err
    return records


def write_csv(
    path: Path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]
) -> Path:
    """Write rows under a fixed header; floats keep full precision."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_value(row[column]) for column in columns])
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    """Read a CSV file into string-valued rows."""
    with _require(path).open(encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


# Dataset


def save_dataset(path: Path, dataset: Sequence[Query]) -> Path:
    """Write queries as JSON lines."""
    return write_jsonl(
        path,
        (
            {
                "id": query.id,
                "prompt_tokens": list(query.prompt_tokens),
                "answer": query.answer,
                "difficulty_meta": query.difficulty_meta,
            }
            for query in dataset
        ),
    )


def load_dataset(path: Path) -> list[Query]:
    """Read queries written by save_dataset."""
    try:
        return [
            Query(
                id=int(record["id"]),
                prompt_tokens=tuple(int(token) for token in record["prompt_tokens"]),
                answer=int(record["answer"]),
                difficulty_meta=dict(record.get("difficulty_meta", {})),
            )
            for record in read_jsonl(path)
        ]
    except KeyError as err:
        raise SentLabError("format", f"{path}: query record lacks {err}") from err


# Semantic entropy profile


def _cluster_key_out(key: int | None) -> int | str:
    return NONE_CLUSTER_KEY if key is None else key


def _cluster_key_in(key: int | str) -> int | None:
    return None if key == NONE_CLUSTER_KEY else int(key)


def save_profiles(path: Path, profiles: Sequence[SemanticProfile]) -> Path:
    """Write one profile per line."""
    return write_jsonl(
        path,
        (
            {
                "query_id": profile.query_id,
                "se": profile.se,
                "num_samples": profile.num_samples,
                "num_clusters": profile.num_clusters,
                "cluster_keys": [_cluster_key_out(c.key) for c in profile.clusters],
                "cluster_sizes": profile.cluster_sizes,
                "cluster_members": [list(c.members) for c in profile.clusters],
                "cluster_logprobs": profile.cluster_logprobs,
                "normalized_probs": profile.normalized_probs,
            }
            for profile in profiles
        ),
    )


def load_profiles(path: Path) -> list[SemanticProfile]:
    """Read profiles written by save_profiles."""
    profiles = []
    for record in read_jsonl(path):
        keys = [_cluster_key_in(key) for key in record["cluster_keys"]]
        members = record.get("cluster_members") or [[] for _ in keys]
        profiles.append(
            SemanticProfile(
                query_id=int(record["query_id"]),
                num_samples=int(record["num_samples"]),
                clusters=tuple(
                    Cluster(key, tuple(int(m) for m in group))
                    for key, group in zip(keys, members, strict=True)
                ),
                cluster_logprobs=np.asarray(record["cluster_logprobs"], dtype=float),
                normalized_probs=np.asarray(record["normalized_probs"], dtype=float),
                se=float(record["se"]),
            )
        )
    return profiles


def save_curriculum(
    path: Path, plan: CurriculumPlan, se_by_id: Mapping[int, float]
) -> Path:
    """Write the ordered ids, stage boundaries and per-stage ids."""
    return write_json(
        path,
        {
            "order": list(plan.order),
            "stage_boundaries": list(plan.stage_boundaries),
            "stages": [list(stage) for stage in plan.stages()],
            "se": [se_by_id[qid] for qid in plan.order],
        },
    )


def load_curriculum(path: Path) -> CurriculumPlan:
    """Read a plan written by save_curriculum."""
    payload = read_json(path)
    return CurriculumPlan(
        order=tuple(int(qid) for qid in payload["order"]),
        stage_boundaries=tuple(int(edge) for edge in payload["stage_boundaries"]),
    )


# Metrics


class MetricsWriter:
    """Append-only CSV writer for per-step metrics.

    Rows are flushed as they are written so that an aborted run keeps its
    history. Resuming drops rows past the resume step first.
    """

    def __init__(
        self, path: Path, columns: Sequence[str], resume_after: int | None = None
    ) -> None:
        """Open the file, truncating or trimming it."""
        self.path = path
        self.columns = tuple(columns)
        path.parent.mkdir(parents=True, exist_ok=True)
        kept: list[dict[str, str]] = []
        if resume_after is not None and path.is_file():
            kept = [row for row in read_csv(path) if int(row["step"]) <= resume_after]
        self._handle = path.open("w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._handle, lineterminator="\n")
        self._writer.writerow(self.columns)
        for row in kept:
            self._writer.writerow([row[column] for column in self.columns])
        self._handle.flush()

    def write(self, row: Mapping[str, Any]) -> None:
        """Write one row."""
        missing = [column for column in self.columns if column not in row]
        if missing:
            raise SentLabError("format", f"metrics row lacks {missing}")
        self._writer.writerow([_format_value(row[column]) for column in self.columns])
        self._handle.flush()

    def close(self) -> None:
        """Close the file."""
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> MetricsWriter:
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


def save_batch(path: Path, batch: TokenBatch, columns: Sequence[str]) -> Path:
    """Dump per-token batch columns."""
    data = {column: getattr(batch, column) for column in columns}
    return write_csv(
        path,
        columns,
        ({column: data[column][index] for column in columns} for index in range(len(batch))),
    )


# Policy snapshots


def save_policy(path: Path, params: PolicyParams, **metadata: Any) -> Path:
    """Write the logit table as text, one (state, token) entry per line.

    Lines read ``query_id<TAB>window<TAB>token<TAB>logit`` where the window
    is space-separated token ids, or ``-`` when empty. States appear in id
    order so that loading restores the same ids. Keyword ``metadata`` is
    stored on the header line and read back by ``snapshot_metadata``.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(f"{POLICY_SNAPSHOT_HEADER}\n")
        fields = {
            "context_window": params.context_window,
            "vocab_size": params.vocab_size,
            **metadata,
        }
        handle.write("# " + " ".join(f"{key}={value}" for key, value in fields.items()) + "\n")
        for state, (query_id, window) in enumerate(params.keys):
            window_text = " ".join(str(token) for token in window) or "-"
            for token, logit in enumerate(params.row(state)):
                handle.write(f"{query_id}\t{window_text}\t{token}\t{float(logit)!r}\n")
    return path


def _parse_metadata(line: str) -> dict[str, str]:
    return dict(item.split("=", 1) for item in line.lstrip("# ").split())


def snapshot_metadata(path: Path) -> dict[str, str]:
    """Header fields of a policy snapshot."""
    with _require(path).open(encoding="utf-8") as handle:
        if handle.readline().rstrip("\n") != POLICY_SNAPSHOT_HEADER:
            raise SentLabError("format", f"{path} is not a policy snapshot")
        return _parse_metadata(handle.readline())


def load_policy(
    path: Path,
    vocab: Vocabulary | int,
    initializer: RowInitializer | None = None,
) -> PolicyParams:
    """Read a table written by save_policy."""
    with _require(path).open(encoding="utf-8") as handle:
        header = handle.readline().rstrip("\n")
        if header != POLICY_SNAPSHOT_HEADER:
            raise SentLabError("format", f"{path} is not a policy snapshot")
        shape = _parse_metadata(handle.readline())
        params = PolicyParams(vocab, int(shape["context_window"]), initializer)
        if int(shape["vocab_size"]) != params.vocab_size:
            raise SentLabError(
                "format",
                f"{path} holds {shape['vocab_size']} tokens, expected {params.vocab_size}",
            )
        rows: dict[int, np.ndarray] = {}
        for number, line in enumerate(handle, start=3):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise SentLabError("format", f"{path}:{number}: expected 4 fields")
            query_id, window_text, token, logit = parts
            window = () if window_text == "-" else tuple(int(t) for t in window_text.split())
            state = params.allocate((int(query_id), window))
            rows.setdefault(state, params.row(state).copy())[int(token)] = float(logit)
    for state, values in rows.items():
        params.set_row(state, values)
    _LOGGER.debug("Loaded %d policy states from %s", params.num_states, path)
    return params

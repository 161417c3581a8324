"""Diagnostics for a training run."""
# ruff: noqa: BLE001

from __future__ import annotations

from collections.abc import Mapping, Sequence
import logging
import time
from typing import Any

import numpy as np

from . import __version__
from .const import DOMAIN, METRICS_SCHEMA_VERSION
from .coordinator import TrainingCoordinator

_LOGGER = logging.getLogger(__name__)

HISTOGRAM_BINS = 10


def histogram_summary(
    values: Sequence[float] | np.ndarray, bins: int = HISTOGRAM_BINS
) -> dict[str, Any]:
    """Moments, quartiles and a fixed-bin histogram of a sample."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        return {"count": 0}
    counts, edges = np.histogram(values, bins=bins)
    quartiles = np.quantile(values, [0.25, 0.5, 0.75])
    return {
        "count": int(values.size),
        "mean": float(values.mean()),
        "std": float(values.std()),
        "min": float(values.min()),
        "max": float(values.max()),
        "quartiles": [float(q) for q in quartiles],
        "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
    }


def entropy_slope(values: Sequence[float]) -> float:
    """Least-squares slope of a series against its index."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    slope, _ = np.polyfit(np.arange(values.size, dtype=float), values, 1)
    return float(slope)


def collect_diagnostics(coordinator: TrainingCoordinator) -> dict[str, Any]:
    """Return diagnostics for a run, or a reduced payload if collection fails."""
    try:
        start_time = time.perf_counter()
        diagnostics_data = {
            "run_info": _get_run_info(coordinator),
            "curriculum": _get_curriculum_summary(coordinator),
            "selection": _get_selection_summary(coordinator),
            "entropy": _get_entropy_summary(coordinator),
            "forecast": _get_forecast_summary(coordinator),
        }
        diagnostics_data["diagnostics_collection_time"] = time.perf_counter() - start_time
        return diagnostics_data
    except Exception as err:
        _LOGGER.warning("Falling back to basic diagnostics: %s", err)
        return {
            "error": f"Failed to collect diagnostics: {err}",
            "basic_info": {
                "domain": DOMAIN,
                "version": __version__,
                "seed": getattr(coordinator.config, "seed", None),
                "last_error": getattr(coordinator, "last_error", None),
            },
        }


def _get_run_info(coordinator: TrainingCoordinator) -> dict[str, Any]:
    config = coordinator.config
    return {
        "domain": DOMAIN,
        "version": __version__,
        "metrics_schema_version": METRICS_SCHEMA_VERSION,
        "seed": config.seed,
        "mode": str(coordinator.mode),
        "curriculum_enabled": config.curriculum_enabled,
        "total_steps": config.train.total_steps,
        "start_step": coordinator.start_step,
        "learning_rate": config.train.learning_rate,
        "last_error": coordinator.last_error,
        "wall_clock_seconds": (
            time.perf_counter() - coordinator._started  # noqa: SLF001
            if coordinator._started is not None  # noqa: SLF001
            else None
        ),
    }


def _get_curriculum_summary(coordinator: TrainingCoordinator) -> dict[str, Any]:
    summary: dict[str, Any] = {
        "num_stages": coordinator.plan.num_stages,
        "stage_sizes": [len(stage) for stage in coordinator.stages],
        "steps_per_stage": [
            coordinator.schedule.count(stage) for stage in range(coordinator.plan.num_stages)
        ],
    }
    se_by_id: Mapping[int, float] | None = coordinator.se_by_id
    if se_by_id is not None:
        summary["stage_mean_se"] = [
            float(np.mean([se_by_id[qid] for qid in stage])) if stage else 0.0
            for stage in coordinator.stages
        ]
        summary["semantic_entropy"] = histogram_summary(list(se_by_id.values()))
    return summary


def _get_selection_summary(coordinator: TrainingCoordinator) -> dict[str, Any]:
    totals = dict(coordinator.selection_totals)
    tokens = max(totals["tokens"], 1)
    totals["low_fraction"] = totals["low"] / tokens
    totals["high_cov_fraction"] = totals["high_cov"] / tokens
    return totals


def _get_entropy_summary(coordinator: TrainingCoordinator) -> dict[str, Any]:
    """Per-stage entropy trend; a rise within a later stage is reported, not judged."""
    stages = {
        str(stage): {
            "first": values[0],
            "last": values[-1],
            "slope": entropy_slope(values),
        }
        for stage, values in sorted(coordinator.stage_entropies.items())
        if values
    }
    tokens = (
        np.concatenate(coordinator.token_entropies)
        if coordinator.token_entropies
        else np.zeros(0)
    )
    return {"stages": stages, "token_entropy": histogram_summary(tokens)}


def _get_forecast_summary(coordinator: TrainingCoordinator) -> dict[str, Any]:
    signs = dict(coordinator.term2_signs)
    total = sum(signs.values())
    signs["positive_fraction"] = signs["positive"] / total if total else None
    return signs

"""File output for training reports, trial logs, result tables and timings.

Writes are retried on transient OS errors.
"""
import csv
import json
import logging
import os
from typing import Any, Dict, Iterable, List, Sequence

from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from models import save_checkpoint
from schemas import ResultRow, SearchResult, TrainReport

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["scenario_id", "labeled_size", "unlabeled_size", "method", "mean_accuracy",
                  "std_accuracy", "median_accuracy", "seeds", "status", "hyperparameters"]


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    # materialized so a retried write sees every row again
    return _write_rows(path, list(header), [list(row) for row in rows])


@retry(retry=retry_if_exception_type(OSError), stop=stop_after_attempt(3),
       wait=wait_exponential(multiplier=0.1, min=0.1, max=1), reraise=True)
def _write_rows(path: str, header: List[str], rows: List[List[Any]]) -> str:
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(value) for value in row])
    logger.debug(f"Wrote {path}")
    return path


@retry(retry=retry_if_exception_type(OSError), stop=stop_after_attempt(3),
       wait=wait_exponential(multiplier=0.1, min=0.1, max=1), reraise=True)
def write_json(path: str, payload: Any) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
    logger.debug(f"Wrote {path}")
    return path


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def write_train_report(report: TrainReport, directory: str, name: str) -> Dict[str, str]:
    """<name>.json (summary), <name>_epochs.csv (objective traces), <name>.ckpt (model)."""
    summary = report.model_dump(mode="json", exclude={"model"})
    paths = {
        "summary": write_json(os.path.join(directory, f"{name}.json"), summary),
        "epochs": write_csv(
            os.path.join(directory, f"{name}_epochs.csv"),
            ["epoch", "labeled_objective", "unlabeled_objective", "total_objective"],
            (
                (epoch, labeled, unlabeled, total)
                for epoch, (labeled, unlabeled, total) in enumerate(
                    zip(report.labeled_objective, report.unlabeled_objective, report.total_objective), start=1
                )
            ),
        ),
    }
    checkpoint = os.path.join(directory, f"{name}.ckpt")
    _ensure_parent(checkpoint)
    save_checkpoint(report.model, checkpoint)
    paths["checkpoint"] = checkpoint
    return paths


def write_trial_log(result: SearchResult, path: str) -> str:
    names = sorted({name for trial in result.trials for name in trial.hyperparameters})
    header = ["trial"] + [f"{name}_exponent" for name in names] + names + ["score", "status", "best"]
    rows = []
    for trial in result.trials:
        rows.append(
            [trial.index]
            + [trial.exponents.get(name) for name in names]
            + [trial.hyperparameters.get(name) for name in names]
            + [trial.score, trial.status, trial.index == result.best_index]
        )
    return write_csv(path, header, rows)


def write_results(rows: List[ResultRow], path: str) -> str:
    """Deterministic result table: sorted, no wall-clock columns."""
    ordered = sorted(rows, key=lambda row: (row.scenario_id, row.labeled_size, row.unlabeled_size, row.method.value))
    return write_csv(path, RESULT_COLUMNS, ([getattr(row, column) if column != "method" else row.method.value
                                            for column in RESULT_COLUMNS] for row in ordered))


def write_timings(timings: List[Dict[str, Any]], path: str) -> str:
    header = ["scenario_id", "seed", "labeled_size", "unlabeled_size", "method", "wall_clock_seconds"]
    return write_csv(path, header, ([entry.get(column) for column in header] for entry in timings))

"""CSV import/export for labeled and unlabeled feature sets.

Labeled files have the header ``label,f0,f1,...``; unlabeled files
``f0,f1,...``. Floats are written with ``repr`` so a reload is exact.
"""
import csv
import logging
import math
import os
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import IngestionError
from schemas import EmbeddingSchema, LabeledSet, UnlabeledSet
from services.reporting import write_csv

logger = logging.getLogger(__name__)

LABEL_COLUMN = "label"


def _feature_header(d: int) -> List[str]:
    return [f"f{index}" for index in range(d)]


def export_labeled(labeled: LabeledSet, path: str) -> str:
    rows = ([int(label)] + [float(value) for value in row] for label, row in zip(labeled.labels, labeled.features))
    return write_csv(path, [LABEL_COLUMN] + _feature_header(labeled.d), rows)


def export_unlabeled(unlabeled: UnlabeledSet, path: str) -> str:
    rows = ([float(value) for value in row] for row in unlabeled.features)
    return write_csv(path, _feature_header(unlabeled.d), rows)


def _read_rows(path: str) -> Tuple[List[str], List[Tuple[int, List[str]]]]:
    if not os.path.exists(path):
        raise IngestionError(f"file not found: {path}", path=path)
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("file is empty", path=path)
        # row numbers count the header as row 1
        rows = [(number, row) for number, row in enumerate(reader, start=2) if row]
    if not rows:
        raise IngestionError("file has a header but no data rows", path=path)
    return [name.strip() for name in header], rows


def _parse_features(values: List[str], path: str, row: int) -> List[float]:
    parsed = []
    for column, raw in enumerate(values):
        try:
            value = float(raw)
        except ValueError:
            raise IngestionError(f"non-numeric value {raw!r}", path=path, row=row, column=column)
        if not math.isfinite(value):
            raise IngestionError(f"non-finite value {raw!r}", path=path, row=row, column=column)
        parsed.append(value)
    return parsed


def read_labeled_csv(path: str, label_map: Optional[Dict[str, int]] = None) -> LabeledSet:
    """Labeled rows; raw labels go through ``label_map`` (default maps 1/+1/-1)."""
    label_map = label_map or EmbeddingSchema().label_map
    header, rows = _read_rows(path)
    if LABEL_COLUMN not in header:
        raise IngestionError(f"labeled file needs a '{LABEL_COLUMN}' column", path=path)
    label_index = header.index(LABEL_COLUMN)
    width = len(header)
    features, labels = [], []
    for number, row in rows:
        if len(row) != width:
            raise IngestionError(f"expected {width} fields, found {len(row)}", path=path, row=number)
        raw_label = row[label_index].strip()
        if raw_label not in label_map:
            raise IngestionError(f"unknown label {raw_label!r}", path=path, row=number)
        labels.append(label_map[raw_label])
        features.append(_parse_features(row[:label_index] + row[label_index + 1:], path, number))
    logger.debug(f"Read {len(rows)} labeled rows from {path}")
    return LabeledSet(features=np.asarray(features, dtype=float), labels=np.asarray(labels))


def read_unlabeled_csv(path: str) -> UnlabeledSet:
    """Unlabeled rows; a ``label`` column, if present, is dropped."""
    header, rows = _read_rows(path)
    label_index = header.index(LABEL_COLUMN) if LABEL_COLUMN in header else None
    if label_index is not None:
        logger.info(f"Dropping the label column of unlabeled file {path}")
    width = len(header)
    features = []
    for number, row in rows:
        if len(row) != width:
            raise IngestionError(f"expected {width} fields, found {len(row)}", path=path, row=number)
        if label_index is not None:
            row = row[:label_index] + row[label_index + 1:]
        features.append(_parse_features(row, path, number))
    logger.debug(f"Read {len(rows)} unlabeled rows from {path}")
    return UnlabeledSet(features=np.asarray(features, dtype=float))


def ingest_embeddings(labeled_csv: str, unlabeled_csv: str,
                      schema: Optional[EmbeddingSchema] = None) -> Tuple[LabeledSet, UnlabeledSet]:
    """Load a labeled/unlabeled embedding pair and check that the widths agree."""
    schema = schema or EmbeddingSchema()
    labeled = read_labeled_csv(labeled_csv, schema.label_map)
    unlabeled = read_unlabeled_csv(unlabeled_csv)
    if labeled.d != unlabeled.d:
        raise IngestionError(
            "labeled and unlabeled embedding widths differ",
            labeled_width=labeled.d, unlabeled_width=unlabeled.d,
        )
    logger.info(f"Ingested embeddings: m={labeled.m}, n={unlabeled.n}, d={labeled.d}")
    return labeled, unlabeled


def summarize(labeled: LabeledSet, unlabeled: Optional[UnlabeledSet] = None) -> Dict[str, float]:
    summary = {
        "m": labeled.m,
        "d": labeled.d,
        "positives": int(np.sum(labeled.labels == 1)),
        "negatives": int(np.sum(labeled.labels == -1)),
        "labeled_mean_norm": float(np.linalg.norm(labeled.features, axis=1).mean()),
    }
    if unlabeled is not None:
        summary["n"] = unlabeled.n
        summary["unlabeled_mean_norm"] = float(np.linalg.norm(unlabeled.features, axis=1).mean())
    return summary

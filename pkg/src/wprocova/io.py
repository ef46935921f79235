"""Trial CSV ingestion and report serialization helpers.

The CSV contract: header ``participant_id,treatment,outcome,prognostic_score``
plus exactly one of ``twin_variance`` or ``log_twin_variance``.  Rows with an
empty outcome are dropped (and counted); a missing covariate is a hard error.
Row numbers in error messages are 1-based data rows (the header is row 0).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    ColumnConflict,
    MalformedNumber,
    MissingColumn,
    NonPositiveTwinVariance,
)
from .estimators import TrialData

REQUIRED_COLUMNS = ("participant_id", "treatment", "outcome", "prognostic_score")


@dataclass(frozen=True)
class IngestResult:
    data: TrialData
    n_rows: int
    dropped_count: int
    used_log_variance: bool


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError as err:
        raise MalformedNumber(f"row {row}: column {column!r}: cannot parse {text!r}") from err
    if not np.isfinite(value):
        raise MalformedNumber(f"row {row}: column {column!r}: non-finite value {text!r}")
    return value


def ingest_csv(path) -> IngestResult:
    """Load a trial CSV, applying case-wise deletion on missing outcomes."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in fields]
        if missing:
            raise MissingColumn(f"missing required column(s): {', '.join(missing)}")
        has_tv = "twin_variance" in fields
        has_ltv = "log_twin_variance" in fields
        if has_tv and has_ltv:
            raise ColumnConflict("provide exactly one of twin_variance or log_twin_variance")
        if not (has_tv or has_ltv):
            raise MissingColumn("missing column: twin_variance (or log_twin_variance)")
        variance_column = "twin_variance" if has_tv else "log_twin_variance"

        treatment, outcome, score, twin_var = [], [], [], []
        n_rows = 0
        dropped = 0
        for i, record in enumerate(reader, start=1):
            n_rows += 1
            raw_outcome = (record.get("outcome") or "").strip()
            if raw_outcome == "":
                dropped += 1
                continue
            raw_treatment = (record.get("treatment") or "").strip()
            if raw_treatment not in ("0", "1"):
                raise MalformedNumber(
                    f"row {i}: column 'treatment': expected 0 or 1, got {raw_treatment!r}"
                )
            raw_score = (record.get("prognostic_score") or "").strip()
            if raw_score == "":
                raise MalformedNumber(f"row {i}: column 'prognostic_score': value is missing")
            raw_variance = (record.get(variance_column) or "").strip()
            if raw_variance == "":
                raise MalformedNumber(f"row {i}: column {variance_column!r}: value is missing")
            v = _parse_float(raw_variance, i, variance_column)
            if has_ltv:
                v = float(np.exp(v))
            elif v <= 0.0:
                raise NonPositiveTwinVariance(
                    f"row {i}: twin_variance must be positive, got {v}"
                )
            treatment.append(int(raw_treatment))
            outcome.append(_parse_float(raw_outcome, i, "outcome"))
            score.append(_parse_float(raw_score, i, "prognostic_score"))
            twin_var.append(v)

    data = TrialData(
        np.array(treatment, dtype=np.int64),
        np.array(outcome),
        np.array(score),
        np.array(twin_var),
    )
    return IngestResult(data=data, n_rows=n_rows, dropped_count=dropped,
                        used_log_variance=has_ltv)


def write_trial_csv(path, data: TrialData, log_variance: bool = False):
    """Write a trial dataset back out under the standard header."""
    column = "log_twin_variance" if log_variance else "twin_variance"
    values = np.log(data.twin_variance) if log_variance else data.twin_variance
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["participant_id", "treatment", "outcome", "prognostic_score", column])
        for i in range(data.n):
            writer.writerow([
                f"P{i + 1:05d}",
                int(data.treatment[i]),
                repr(float(data.outcome[i])),
                repr(float(data.prognostic_score[i])),
                repr(float(values[i])),
            ])


def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, compact separators, repr floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_digest(obj) -> str:
    """Hash of the canonicalized configuration; stable across platforms."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def fmt(value) -> str:
    """Round-trip-exact decimal form of a float for CSV output."""
    return repr(float(value))

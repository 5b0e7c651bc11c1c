"""Metrics persistence: line-delimited records, a CSV mirror, and cross-seed
aggregation (per-iteration mean and standard error).

The line-delimited file is the append-only source of truth — one flat JSON
record per line, preceded by a version header line. The CSV mirror is
regenerated from it for plotting. Wall-clock timings are deliberately not
persisted so equal-seed runs produce byte-identical metric streams.
"""

from __future__ import annotations

import csv
import json
import math

import numpy as np

METRICS_FORMAT = "concordrl-metrics"
METRICS_VERSION = 1
CSV_VERSION_LINE = f"# {METRICS_FORMAT}-csv {METRICS_VERSION}"

_UNPERSISTED = ("wall_clock_s",)


class MetricsError(ValueError):
    """A metrics file problem (missing header, bad record, seed mismatch)."""


def init_metrics_file(path) -> None:
    header = json.dumps(
        {"format": METRICS_FORMAT, "version": METRICS_VERSION}, sort_keys=True
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")


def append_record(path, record: dict) -> None:
    row = {k: v for k, v in record.items() if k not in _UNPERSISTED}
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MetricsError(f"'{path}' is empty; expected a metrics header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise MetricsError(f"'{path}' has an unreadable header: {exc}") from exc
    if header.get("format") != METRICS_FORMAT:
        raise MetricsError(f"'{path}' is not a {METRICS_FORMAT} file")
    if header.get("version") != METRICS_VERSION:
        raise MetricsError(
            f"'{path}' has metrics version {header.get('version')}; "
            f"this build reads version {METRICS_VERSION}"
        )
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise MetricsError(f"'{path}' line {lineno}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# CSV mirror


def _columns(records: list[dict]) -> list[str]:
    keys = set()
    for rec in records:
        keys.update(rec)
    ordered = [k for k in ("iteration",) if k in keys]
    return ordered + sorted(keys - set(ordered))


def write_csv(path, records: list[dict]) -> None:
    cols = _columns(records)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(CSV_VERSION_LINE + "\n")
        if not cols:
            return
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for rec in records:
            writer.writerow({k: rec.get(k, "") for k in cols})


def read_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != CSV_VERSION_LINE:
            raise MetricsError(f"'{path}' is missing the '{CSV_VERSION_LINE}' header")
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {}
        for k, v in row.items():
            try:
                parsed[k] = int(v)
            except ValueError:
                try:
                    parsed[k] = float(v)
                except ValueError:
                    parsed[k] = v
        out.append(parsed)
    return out


# ---------------------------------------------------------------------------
# aggregation across seeds


def _mean_stderr(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    finite = arr[~np.isnan(arr)]
    if finite.size == 0:
        return float("nan"), float("nan")
    if finite.size == 1:
        return float(finite[0]), 0.0
    return (
        float(finite.mean()),
        float(finite.std(ddof=1) / math.sqrt(finite.size)),
    )


def aggregate_records(per_seed: list[list[dict]]) -> list[dict]:
    """Per-iteration mean and standard error of every numeric metric.

    NaN entries (e.g. episode statistics before any episode finished) are
    excluded per-seed; an iteration where every seed is NaN stays NaN.
    """
    if not per_seed:
        raise MetricsError("aggregation needs at least one metrics stream")
    lengths = {len(records) for records in per_seed}
    if len(lengths) != 1:
        raise MetricsError(
            f"metrics streams disagree on length ({sorted(lengths)}); "
            "all seeds must have run the same iteration budget"
        )
    out = []
    for i in range(lengths.pop()):
        rows = [records[i] for records in per_seed]
        iterations = {row.get("iteration") for row in rows}
        if len(iterations) != 1:
            raise MetricsError(f"record {i}: seeds disagree on the iteration number")
        agg = {"iteration": iterations.pop()}
        keys = sorted({k for row in rows for k in row} - {"iteration"})
        for key in keys:
            values = [row[key] for row in rows if key in row]
            if not all(isinstance(v, (int, float)) for v in values):
                continue
            mean, stderr = _mean_stderr(values)
            agg[f"{key}_mean"] = mean
            agg[f"{key}_stderr"] = stderr
        out.append(agg)
    return out


def final_window_mean(records: list[dict], key: str, fraction: float = 0.1) -> float:
    """Mean of a metric over the last `fraction` of iterations (at least one)."""
    if not records:
        return float("nan")
    window = max(1, int(round(len(records) * fraction)))
    tail = [rec[key] for rec in records[-window:] if key in rec]
    arr = np.asarray(tail, dtype=np.float64)
    finite = arr[~np.isnan(arr)]
    return float(finite.mean()) if finite.size else float("nan")

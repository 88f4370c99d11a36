"""Model-selection bookkeeping: score records, rankings and correlations.

Fine-tuning accuracies are external inputs; nothing here trains models.
Lower scores predict better transfer, so a good score correlates
*negatively* with accuracy.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .errors import InputError

RECORD_COLUMNS = ("model_id", "target_id", "score", "term1", "term2", "term3", "accuracy", "mode")


@dataclass
class TransferRecord:
    model_id: str
    target_id: str
    score: float
    fine_tune_accuracy: float | None = None
    term1: float | None = None
    term2: float | None = None
    term3: float | None = None
    mode: str = "supervised"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.score = float(self.score)
        if not math.isfinite(self.score):
            raise InputError(f"{self.model_id}/{self.target_id}: score must be finite")
        if self.fine_tune_accuracy is not None:
            self.fine_tune_accuracy = float(self.fine_tune_accuracy)
            if not 0.0 <= self.fine_tune_accuracy <= 1.0:
                raise InputError(f"{self.model_id}/{self.target_id}: accuracy outside [0, 1]")


def pearson_correlation(xs, ys):
    """Pearson's r, or ``None`` when either side has zero variance."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise InputError("need two equal-length sequences of at least 2 values")
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        return None
    return float(np.clip(stats.pearsonr(xs, ys)[0], -1.0, 1.0))


def spearman_correlation(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise InputError("need two equal-length sequences of at least 2 values")
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        return None
    return float(stats.spearmanr(xs, ys)[0])


def rank_models(records):
    """Records sorted by ascending score, ties broken by ``model_id``."""
    return sorted(records, key=lambda r: (r.score, r.model_id))


def _group(records):
    groups = {}
    for r in records:
        groups.setdefault((r.target_id, r.mode), []).append(r)
    return groups


def summarize(records):
    """Per-(target, mode) correlations with accuracy and the predicted ranking."""
    out = []
    for (target, mode), recs in sorted(_group(records).items()):
        with_acc = [r for r in recs if r.fine_tune_accuracy is not None]
        pearson = spearman = None
        if len(with_acc) >= 2:
            xs = [r.score for r in with_acc]
            ys = [r.fine_tune_accuracy for r in with_acc]
            pearson = pearson_correlation(xs, ys)
            spearman = spearman_correlation(xs, ys)
            if pearson is None:
                warnings.warn(f"correlation undefined for target {target!r} ({mode}): "
                              "zero variance", stacklevel=2)
        out.append({
            "target_id": target,
            "mode": mode,
            "n_models": len(recs),
            "pearson": pearson,
            "spearman": spearman,
            "ranking": [r.model_id for r in rank_models(recs)],
        })
    return out


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([r.model_id, r.target_id, repr(r.score), _fmt(r.term1), _fmt(r.term2),
                        _fmt(r.term3), _fmt(r.fine_tune_accuracy), r.mode])


def read_records_csv(path):
    if not os.path.exists(path):
        raise InputError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(("model_id", "target_id", "score")) <= set(reader.fieldnames):
            raise InputError(f"{path}: header must contain {','.join(RECORD_COLUMNS)}")

        def opt(row, key):
            v = row.get(key)
            return None if v in (None, "") else float(v)

        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(TransferRecord(
                    row["model_id"], row["target_id"], float(row["score"]),
                    opt(row, "accuracy"), opt(row, "term1"), opt(row, "term2"),
                    opt(row, "term3"), row.get("mode") or "supervised"))
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    return out


def records_to_json(records):
    return {
        "records": [asdict(r) for r in records],
        "summary": summarize(records),
    }


def records_from_json(obj):
    return [TransferRecord(**r) for r in obj["records"]]


def _atomic_write(path, write):
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def emit_report(records, path):
    """Write ``<path>.csv`` (records) and ``<path>.json`` (records + summary).

    ``path`` may carry either extension or none. Returns the two file names.
    """
    records = list(records)
    if not records:
        raise InputError("no records to report")
    base, ext = os.path.splitext(str(path))
    if ext not in (".csv", ".json"):
        base = str(path)
    csv_path, json_path = base + ".csv", base + ".json"
    _atomic_write(csv_path, lambda p: write_records_csv(records, p))
    payload = records_to_json(records)

    def dump(p):
        with open(p, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    _atomic_write(json_path, dump)
    return csv_path, json_path

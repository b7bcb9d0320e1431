"""Binary classification metrics: confusion counts, ACC/SEN/SPE and rank-based AUC."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from volnet.errors import ShapeError, SingleClassError

REPORT_COLUMNS = ("ACC", "SEN", "SPE", "AUC")


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise ShapeError("no samples to evaluate")
    if not np.isin(y, (0, 1)).all():
        raise ShapeError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def confusion(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """``(tp, fp, tn, fn)``; a sample is predicted positive iff ``score >= threshold``."""
    s, y = _as_arrays(scores, labels)
    pred = s >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return tp, fp, tn, fn


def summary(tp: int, fp: int, tn: int, fn: int) -> tuple[float, float | None, float | None]:
    """``(acc, sen, spe)``. Sensitivity/specificity are ``None`` when undefined."""
    total = tp + fp + tn + fn
    if total < 1:
        raise ValueError("summary needs at least one sample")
    acc = (tp + tn) / total
    sen = tp / (tp + fn) if tp + fn else None
    spe = tn / (tn + fp) if tn + fp else None
    return acc, sen, spe


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, tied values sharing the mean of their positions."""
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], sorted_vals.size]
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(values.size, dtype=np.float64)
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(positive outscores negative), ties counting 1/2."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")
    rank_sum = average_ranks(s)[y == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    acc: float
    sen: float | None
    spe: float | None
    auc: float | None
    threshold: float = 0.5

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def row(self) -> dict[str, float | None]:
        return {"ACC": self.acc, "SEN": self.sen, "SPE": self.spe, "AUC": self.auc}


def evaluate_scores(scores, labels, threshold: float = 0.5) -> EvalReport:
    """Full report; AUC is ``None`` when only one class is present."""
    tp, fp, tn, fn = confusion(scores, labels, threshold)
    acc, sen, spe = summary(tp, fp, tn, fn)
    try:
        a = auc(scores, labels)
    except SingleClassError:
        a = None
    return EvalReport(tp, fp, tn, fn, acc, sen, spe, a, threshold)


def mean_report(reports: Sequence[EvalReport]) -> dict[str, float | None]:
    """Column-wise mean of several reports; a column is ``None`` if any entry is."""
    out: dict[str, float | None] = {}
    for col in REPORT_COLUMNS:
        vals = [r.row()[col] for r in reports]
        out[col] = None if any(v is None for v in vals) else float(np.mean(vals))
    return out


def _pct(v: float | None) -> str:
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.2f}"


def format_table(rows: Mapping[str, Mapping[str, float | None]]) -> str:
    """Aligned percentage table, columns ACC SEN SPE AUC."""
    width = max([len("run")] + [len(k) for k in rows])
    lines = ["  ".join([f"{'run':<{width}}"] + [f"{c:>6}" for c in REPORT_COLUMNS])]
    for name, row in rows.items():
        lines.append("  ".join([f"{name:<{width}}"] + [f"{_pct(row.get(c)):>6}" for c in REPORT_COLUMNS]))
    return "\n".join(lines)


def write_report_csv(path, rows: Mapping[str, Mapping[str, float | None]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run",) + REPORT_COLUMNS)
        for name, row in rows.items():
            w.writerow([name] + ["" if row.get(c) is None else repr(float(row[c])) for c in REPORT_COLUMNS])


def read_report_csv(path) -> dict[str, dict[str, float | None]]:
    with open(path, newline="") as fh:
        rows = {}
        for rec in csv.DictReader(fh):
            rows[rec["run"]] = {c: (float(rec[c]) if rec[c] else None) for c in REPORT_COLUMNS}
    return rows

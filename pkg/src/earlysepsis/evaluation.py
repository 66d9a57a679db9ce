"""Ranking metrics, label-stratified splits and the horizon analysis.

``auprc`` is the step-wise area under the precision-recall curve (average
precision): thresholds sweep the distinct scores in descending order, tied
scores enter together, and each recall increment is weighted by the
precision reached at that threshold. ``auc`` is the Mann-Whitney rank
statistic with ties counted one half.
"""

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data.cohort import MAX_HORIZON_H, MIN_OBSERVATIONS, mask_at_horizon
from .errors import DataError, EvaluationError
from .rng import substream

PLOT_SCHEMA = "earlysepsis-horizon-plot/1"
PLOT_COLUMNS = ("horizon", "metric", "mean", "std", "method")
HORIZONS = tuple(range(int(MAX_HORIZON_H) + 1))


def _check(labels, scores, what):
    y = np.asarray(labels).astype(np.int64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise EvaluationError(f"{what}: {y.size} labels but {s.size} scores")
    if not np.all(np.isin(y, (0, 1))):
        raise EvaluationError(f"{what}: labels must be binary")
    if np.isnan(s).any():
        raise EvaluationError(f"{what}: NaN score")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise EvaluationError(f"{what}: needs both classes, got {n_pos} positives of {y.size}")
    return y, s


def auprc(labels, scores, split="scored cohort"):
    y, s = _check(labels, scores, f"auprc on {split}")
    order = np.argsort(-s, kind="stable")
    y, s = y[order], s[order]
    tp = np.cumsum(y)
    # last index of every block of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = tp[ends]
    precision = tp / (ends + 1)
    recall = tp / tp[-1]
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


def auc(labels, scores, split="scored cohort"):
    y, s = _check(labels, scores, f"auc on {split}")
    ranks = rankdata(s)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def stratified_split(ids, labels, seed, fractions=(0.8, 0.1, 0.1)):
    """Seeded, label-stratified train/validation/test id lists."""
    if len(fractions) != 3 or not math.isclose(sum(fractions), 1.0):
        raise EvaluationError(f"split fractions must be three values summing to 1, got {fractions}")
    ids = list(ids)
    labels = np.asarray(labels).astype(int)
    rng = substream(seed, "split")
    parts = ([], [], [])
    for cls in (1, 0):
        members = [ids[i] for i in np.flatnonzero(labels == cls)]
        members = [members[i] for i in rng.permutation(len(members))]
        n = len(members)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        parts[0].extend(members[:n_train])
        parts[1].extend(members[n_train:n_train + n_val])
        parts[2].extend(members[n_train + n_val:])
    return tuple(sorted(p) for p in parts)


@dataclass
class HorizonTable:
    method: str
    split: str
    rows: list = field(default_factory=list)  # dicts: horizon, auprc, auc, n_encounters, n_cases

    def column(self, name):
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    @property
    def horizons(self):
        return [r["horizon"] for r in self.rows]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["horizon", "auprc", "auc", "n_encounters", "n_cases"])
        for r in self.rows:
            w.writerow([r["horizon"], _fmt(r["auprc"]), _fmt(r["auc"]), r["n_encounters"], r["n_cases"]])
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(f"# method={self.method} split={self.split}\n" + self.to_csv(), encoding="utf-8")


def _fmt(x):
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def horizon_eval(score_fn, encounters, horizons=HORIZONS, min_obs=MIN_OBSERVATIONS,
                 method="model", split="test"):
    """Score one fixed model on encounters truncated ``h`` hours before onset.

    ``score_fn`` maps a list of truncated encounters to one score each; it
    is never refit. Horizons left with one class get ``None`` metrics.
    """
    table = HorizonTable(method, split)
    for h in horizons:
        kept = mask_at_horizon(encounters, h, min_obs)
        labels = np.array([e.label for e in kept], dtype=int)
        row = {"horizon": h, "auprc": None, "auc": None, "n_encounters": len(kept),
               "n_cases": int(labels.sum())}
        if 0 < labels.sum() < labels.size:
            scores = np.asarray(score_fn(kept), dtype=np.float64)
            row["auprc"] = auprc(labels, scores, f"{split} h={h}")
            row["auc"] = auc(labels, scores, f"{split} h={h}")
        table.rows.append(row)
    return table


@dataclass
class AggregateTable:
    method: str
    horizons: list
    mean: dict  # metric -> array over horizons
    std: dict
    n_splits: int

    def rows(self):
        for metric in ("auprc", "auc"):
            for i, h in enumerate(self.horizons):
                yield h, metric, self.mean[metric][i], self.std[metric][i], self.method


def aggregate_splits(tables):
    """Per-horizon mean and population std across split tables of one method."""
    if len(tables) < 2:
        raise EvaluationError(f"aggregation needs at least 2 splits, got {len(tables)}")
    horizons = tables[0].horizons
    for t in tables[1:]:
        if t.horizons != horizons:
            raise EvaluationError(f"split {t.split} has horizons {t.horizons}, expected {horizons}")
    mean, std = {}, {}
    for metric in ("auprc", "auc"):
        stack = np.vstack([t.column(metric) for t in tables])
        # a horizon marked unavailable in some splits aggregates over the others
        mean[metric] = np.array([np.mean(c[np.isfinite(c)]) if np.isfinite(c).any() else np.nan
                                 for c in stack.T])
        std[metric] = np.array([np.std(c[np.isfinite(c)]) if np.isfinite(c).any() else np.nan
                                for c in stack.T])
    return AggregateTable(tables[0].method, list(horizons), mean, std, len(tables))


def write_plot_data(path, aggregates):
    """Delimited plot file: a schema comment line, then ``horizon,metric,mean,std,method``."""
    buf = io.StringIO()
    buf.write(f"# schema={PLOT_SCHEMA} std=population\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_COLUMNS)
    for agg in aggregates:
        for h, metric, m, s, method in agg.rows():
            w.writerow([h, metric, _fmt(m), _fmt(s), method])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_plot_data(path):
    """Parse a plot file back into a list of row dicts; validates the schema header."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# schema="):
        raise DataError(f"{path}: missing schema header")
    schema = lines[0][2:].split()[0].split("=", 1)[1]
    if schema != PLOT_SCHEMA:
        raise DataError(f"{path}: unsupported schema {schema!r}")
    reader = csv.reader(lines[1:])
    header = next(reader, None)
    if tuple(header or ()) != PLOT_COLUMNS:
        raise DataError(f"{path}: expected columns {PLOT_COLUMNS}, got {header}")
    rows = []
    for rec in reader:
        if len(rec) != len(PLOT_COLUMNS):
            raise DataError(f"{path}: malformed row {rec}")
        h, metric, m, s, method = rec
        rows.append({"horizon": int(h), "metric": metric,
                     "mean": math.nan if m == "NA" else float(m),
                     "std": math.nan if s == "NA" else float(s), "method": method})
    return rows

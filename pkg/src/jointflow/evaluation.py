"""Evaluation protocol: accuracy, one-vs-rest AUC, run aggregation and
accuracy-rejection curves."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidArgument

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(10))


class UndefinedMetric(ValueError):
    pass


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise InvalidArgument(f"length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise InvalidArgument("empty predictions")
    return float(np.mean(p == y))


def binary_auc(scores, positives) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both positive and negative samples")
    # midranks count ties as one half
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_ovr(scores, labels):
    """Macro one-vs-rest AUC over the classes present in ``labels``.

    Returns ``(macro, per_class)`` where absent classes get ``nan`` in
    ``per_class``. With two classes the macro value is the AUC of class 1.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 2 or len(s) != len(y):
        raise InvalidArgument(f"scores must be N x K matching {len(y)} labels, got {s.shape}")
    k = s.shape[1]
    present = np.unique(y)
    if len(present) < 2:
        raise UndefinedMetric("AUC is undefined when only one class is present")
    per_class = [float("nan")] * k
    for c in range(k):
        if c not in present:
            warnings.warn(f"class {c} absent from labels; skipped in macro AUC", stacklevel=2)
            continue
        per_class[c] = binary_auc(s[:, c], y == c)
    if k == 2:
        return per_class[1], per_class
    return float(np.nanmean(per_class)), per_class


@dataclass
class ArcPoint:
    rejection_fraction: float
    retained_accuracy: float
    retained_count: int


def arc_curve(correct, uncertainties, fractions=DEFAULT_FRACTIONS):
    """Accuracy after rejecting the ceil(rho * N) most uncertain samples.

    Among equal uncertainties the sample with the higher original index is
    rejected first. At least one sample is always retained.
    """
    ok = np.asarray(correct, dtype=bool)
    u = np.asarray(uncertainties, dtype=np.float64)
    if ok.shape != u.shape or ok.ndim != 1:
        raise InvalidArgument("correct and uncertainties must be equally long 1-D arrays")
    n = len(ok)
    if n == 0:
        raise InvalidArgument("arc_curve needs at least one sample")
    fr = [float(f) for f in fractions]
    if any(not 0.0 <= f < 1.0 for f in fr):
        raise InvalidArgument(f"rejection fractions must lie in [0, 1), got {fr}")
    if any(b <= a for a, b in zip(fr, fr[1:])):
        raise InvalidArgument("rejection fractions must be strictly increasing")
    # most uncertain first; larger index first among ties
    order = np.lexsort((-np.arange(n), -u))
    points = []
    for f in fr:
        drop = min(math.ceil(f * n - 1e-9), n - 1)
        keep = order[drop:]
        acc = float(ok[keep].mean())
        points.append(ArcPoint(f, acc, len(keep)))
    return points


def aggregate_runs(values):
    """Sample mean and two sample standard deviations (n - 1 denominator)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or len(v) < 2:
        raise InvalidArgument("need at least two runs to aggregate")
    return float(v.mean()), float(2.0 * v.std(ddof=1))


def format_pm(mean, two_sigma, scale=100.0, digits=1) -> str:
    """Render as e.g. ``97.9±0.2`` on the percent scale."""
    return f"{mean * scale:.{digits}f}±{two_sigma * scale:.{digits}f}"


@dataclass
class MetricsReport:
    accuracy: float
    auc_macro: float
    accuracy_runs: list
    auc_runs: list
    accuracy_two_sigma: float
    auc_two_sigma: float
    aggregated_accuracy: float
    arc: list = field(default_factory=list)
    n: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accuracy_pm"] = format_pm(self.accuracy, self.accuracy_two_sigma)
        d["auc_pm"] = format_pm(self.auc_macro, self.auc_two_sigma)
        return d


def evaluate_records(records, labels, fractions=DEFAULT_FRACTIONS) -> MetricsReport:
    """Per-run accuracy and AUC aggregated over runs, plus the ARC.

    ``records`` are PredictionRecords (or their dict form). The ARC uses the
    fused prediction and the mean distance of each record.
    """
    recs = [r if isinstance(r, dict) else r.to_dict() for r in records]
    y = np.asarray(labels)
    if len(recs) != len(y):
        raise InvalidArgument(f"{len(recs)} records for {len(y)} labels")
    n_runs = len(recs[0]["runs"])
    if any(len(r["runs"]) != n_runs for r in recs):
        raise InvalidArgument("records disagree on the number of runs")
    run_cls = np.array([[run["class"] for run in r["runs"]] for r in recs])
    run_scores = np.array([[run["scores"] for run in r["runs"]] for r in recs])
    accs = [accuracy(run_cls[:, j], y) for j in range(n_runs)]
    aucs = [auc_ovr(run_scores[:, j], y)[0] for j in range(n_runs)]
    if n_runs >= 2:
        acc_m, acc_s = aggregate_runs(accs)
        auc_m, auc_s = aggregate_runs(aucs)
    else:
        (acc_m, acc_s), (auc_m, auc_s) = (accs[0], 0.0), (aucs[0], 0.0)
    pred = np.array([r["predicted_class"] for r in recs])
    unc = np.array([r["uncertainty"] for r in recs])
    return MetricsReport(
        accuracy=acc_m,
        auc_macro=auc_m,
        accuracy_runs=accs,
        auc_runs=aucs,
        accuracy_two_sigma=acc_s,
        auc_two_sigma=auc_s,
        aggregated_accuracy=accuracy(pred, y),
        arc=[asdict(p) for p in arc_curve(pred == y, unc, fractions)],
        n=len(y),
    )


def write_metrics(report: MetricsReport, out_dir) -> tuple:
    """Write ``metrics.json`` and the flat ``metrics.csv`` (one row per metric per run)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "metrics.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "run", "value"])
        for name, runs in (("accuracy", report.accuracy_runs), ("auc", report.auc_runs)):
            for j, v in enumerate(runs):
                w.writerow([name, j, repr(float(v))])
        w.writerow(["accuracy", "mean", repr(report.accuracy)])
        w.writerow(["accuracy", "two_sigma", repr(report.accuracy_two_sigma)])
        w.writerow(["auc", "mean", repr(report.auc_macro)])
        w.writerow(["auc", "two_sigma", repr(report.auc_two_sigma)])
        w.writerow(["aggregated_accuracy", "fused", repr(report.aggregated_accuracy)])
    return json_path, csv_path


def write_arc(points, out_dir, title="Accuracy-rejection curve") -> tuple:
    """Write ``arc.csv`` and a line plot ``arc.png``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = [p if isinstance(p, dict) else asdict(p) for p in points]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "arc.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rejection_fraction", "retained_accuracy", "retained_count"])
        for p in pts:
            w.writerow([repr(p["rejection_fraction"]), repr(p["retained_accuracy"]), p["retained_count"]])

    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot([100 * p["rejection_fraction"] for p in pts], [100 * p["retained_accuracy"] for p in pts], marker="o")
    ax.set_xlabel("rejected samples (%)")
    ax.set_ylabel("accuracy on retained (%)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    png_path = out / "arc.png"
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(png_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return csv_path, png_path

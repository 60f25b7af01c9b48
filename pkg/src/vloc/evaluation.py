"""Accuracy metrics, ablation-style reports, and report figures.

Accuracy is the fraction of queries whose pose error stays within
nested (distance, angle) thresholds, by default (0.25 m, 2 deg) /
(0.5 m, 5 deg) / (5 m, 10 deg).  Failed queries count against every
threshold.  Reports come out three ways: an aligned text table, a CSV,
and a grouped-bar PNG rendered with matplotlib's Agg backend.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IdMismatchError
from .geometry import Pose, pose_error, pose_from_string

DEFAULT_THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))


@dataclass
class AccuracyTriple:
    acc_tight: float
    acc_mid: float
    acc_loose: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.acc_tight, self.acc_mid, self.acc_loose)

    def __str__(self) -> str:
        return f"{self.acc_tight:.1f} / {self.acc_mid:.1f} / {self.acc_loose:.1f}"


def pose_errors_by_id(records: list[dict],
                      gts: dict[str, Pose]) -> dict[str, tuple[float, float]]:
    """(translation m, rotation deg) per query; failed -> (inf, inf)."""
    rec_ids = {r["query_id"] for r in records}
    if rec_ids != set(gts):
        missing = set(gts) ^ rec_ids
        raise IdMismatchError(f"result/ground-truth ids differ: {sorted(missing)[:5]}")
    errors = {}
    for rec in records:
        if rec.get("status") != "ok":
            errors[rec["query_id"]] = (float("inf"), float("inf"))
            continue
        est = pose_from_string(rec["pose"])
        err = pose_error(est, gts[rec["query_id"]])
        errors[rec["query_id"]] = (err.translation_error, err.rotation_error)
    return errors


def evaluate_errors(errors: list[tuple[float, float]],
                    thresholds=DEFAULT_THRESHOLDS) -> AccuracyTriple:
    n = max(1, len(errors))
    accs = []
    for dist, ang in thresholds:
        hits = sum(1 for t, r in errors if t <= dist and r <= ang)
        accs.append(100.0 * hits / n)
    return AccuracyTriple(*accs)


def evaluate_accuracy(records: list[dict], gts: dict[str, Pose],
                      thresholds=DEFAULT_THRESHOLDS) -> AccuracyTriple:
    errors = pose_errors_by_id(records, gts)
    return evaluate_errors(list(errors.values()), thresholds)


# -- ground-truth CSV -------------------------------------------------------

def write_gt_csv(path, gts: dict[str, Pose]) -> None:
    from .geometry import pose_to_string
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "pose"])
        for qid in gts:
            writer.writerow([qid, pose_to_string(gts[qid])])


def read_gt_csv(path) -> dict[str, Pose]:
    gts = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["query_id", "pose"]:
            raise ValueError(f"unexpected ground-truth header: {header}")
        for row in reader:
            if row:
                gts[row[0]] = pose_from_string(row[1])
    return gts


# -- reports ----------------------------------------------------------------

def format_report(runs: list[tuple[str, AccuracyTriple]],
                  thresholds=DEFAULT_THRESHOLDS) -> str:
    """Aligned text table, one row per named configuration."""
    if not runs:
        raise ValueError("report needs at least one run")
    heads = [f"({d:g}m, {a:g}°)" for d, a in thresholds]
    name_w = max(len("configuration"), max(len(n) for n, _ in runs))
    lines = ["configuration".ljust(name_w) + "  "
             + "  ".join(h.rjust(12) for h in heads)]
    lines.append("-" * len(lines[0]))
    for name, triple in runs:
        cells = [f"{v:.1f}".rjust(12) for v in triple.as_tuple()]
        lines.append(name.ljust(name_w) + "  " + "  ".join(cells))
    return "\n".join(lines) + "\n"


def write_report_csv(path, runs: list[tuple[str, AccuracyTriple]],
                     thresholds=DEFAULT_THRESHOLDS) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["configuration"]
                        + [f"acc_{d:g}m_{a:g}deg" for d, a in thresholds])
        for name, triple in runs:
            writer.writerow([name] + [f"{v:.2f}" for v in triple.as_tuple()])


def read_report_csv(path) -> list[tuple[str, AccuracyTriple]]:
    runs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if row:
                runs.append((row[0], AccuracyTriple(*(float(v) for v in row[1:4]))))
    return runs


def save_report_figure(path, runs: list[tuple[str, AccuracyTriple]],
                       thresholds=DEFAULT_THRESHOLDS) -> None:
    """Grouped bar chart of the accuracy triples, written as PNG."""
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    labels = [f"({d:g} m, {a:g}°)" for d, a in thresholds]
    x = np.arange(len(runs))
    width = 0.8 / len(thresholds)
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(runs), 3.6))
    for i in range(len(thresholds)):
        vals = [triple.as_tuple()[i] for _, triple in runs]
        ax.bar(x + (i - 1) * width, vals, width, label=labels[i])
    ax.set_xticks(x)
    ax.set_xticklabels([name for name, _ in runs], rotation=15, ha="right")
    ax.set_ylabel("accuracy [%]")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def save_report(out_dir, runs: list[tuple[str, AccuracyTriple]],
                thresholds=DEFAULT_THRESHOLDS, stem: str = "report") -> str:
    """Write <stem>.txt/.csv/.png under out_dir; returns the text table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = format_report(runs, thresholds)
    (out / f"{stem}.txt").write_text(text)
    write_report_csv(out / f"{stem}.csv", runs, thresholds)
    save_report_figure(out / f"{stem}.png", runs, thresholds)
    return text

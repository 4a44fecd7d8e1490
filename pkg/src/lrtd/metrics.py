"""Phase-recognition metrics: video-level accuracy and phase-wise precision,
recall, Jaccard and F1, macro-averaged per video and then summarised as
mean and population std over videos.

Undefined values (an empty denominator) are ``None`` and are left out of
macro averages.  A phase absent from both ground truth and prediction is
not reported at all.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

METRIC_NAMES = ("PR", "RE", "JA", "F1")


@dataclass
class PhaseScores:
    PR: float | None
    RE: float | None
    JA: float | None
    F1: float | None


@dataclass
class PhaseMetrics:
    """Metrics of one video, or of a set of videos after ``aggregate``."""

    ACC: float
    per_phase: dict[int, PhaseScores]
    macro: dict[str, float | None]
    ACC_std: float = 0.0
    macro_std: dict[str, float | None] = field(default_factory=dict)
    num_videos: int = 1

    def to_dict(self) -> dict:
        return {
            "ACC": self.ACC,
            "ACC_std": self.ACC_std,
            "macro": self.macro,
            "macro_std": self.macro_std,
            "num_videos": self.num_videos,
            "per_phase": {str(k): asdict(v) for k, v in sorted(self.per_phase.items())},
        }


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def eval_video(gt: Sequence[int], pred: Sequence[int]) -> PhaseMetrics:
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape or gt.ndim != 1:
        raise ValueError(f"gt and pred must be equal-length 1-D sequences, got {gt.shape} vs {pred.shape}")
    if gt.size == 0:
        raise ValueError("cannot evaluate an empty video")
    pairs = Counter(zip(gt.tolist(), pred.tolist()))
    n_gt, n_pred, tps = Counter(), Counter(), Counter()
    for (g, p), c in pairs.items():
        n_gt[g] += c
        n_pred[p] += c
        if g == p:
            tps[g] = c
    per_phase = {}
    for k in sorted(n_gt.keys() | n_pred.keys()):
        inter = tps[k]
        pr = _ratio(inter, n_pred[k])
        re = _ratio(inter, n_gt[k])
        ja = _ratio(inter, n_gt[k] + n_pred[k] - inter)
        if pr is None or re is None:
            f1 = None
        else:
            # harmonic mean of PR and RE, in the single-rounding form
            f1 = 2.0 * inter / (n_gt[k] + n_pred[k])
        per_phase[int(k)] = PhaseScores(pr, re, ja, f1)
    macro = {}
    for name in METRIC_NAMES:
        vals = [getattr(s, name) for s in per_phase.values() if getattr(s, name) is not None]
        macro[name] = sum(vals) / len(vals) if vals else None
    acc = sum(tps.values()) / gt.size
    return PhaseMetrics(acc, per_phase, macro, 0.0, {n: 0.0 for n in METRIC_NAMES})


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate(videos: Sequence[PhaseMetrics]) -> PhaseMetrics:
    """Mean and population std over videos; per-phase values are video means."""
    if not videos:
        raise ValueError("aggregate needs at least one video")
    acc, acc_std = _mean_std([v.ACC for v in videos])
    macro, macro_std = {}, {}
    for name in METRIC_NAMES:
        macro[name], macro_std[name] = _mean_std([v.macro[name] for v in videos if v.macro[name] is not None])
    phases = sorted({k for v in videos for k in v.per_phase})
    per_phase = {}
    for k in phases:
        scores = {}
        for name in METRIC_NAMES:
            vals = [getattr(v.per_phase[k], name) for v in videos if k in v.per_phase]
            scores[name] = _mean_std([x for x in vals if x is not None])[0]
        per_phase[k] = PhaseScores(**scores)
    return PhaseMetrics(acc, per_phase, macro, acc_std, macro_std, len(videos))


@dataclass
class SelectionHistogram:
    phase_fractions: dict[int, float]
    transition_fraction: float
    count: int


def selection_histogram(phase_windows: Sequence[Sequence[int]]) -> SelectionHistogram:
    """Phase distribution of selected clips (by last-frame label) and the share
    of clips whose frames span two or more phases."""
    if len(phase_windows) == 0:
        raise ValueError("selection_histogram needs a nonempty selection")
    labels = [int(w[-1]) for w in phase_windows]
    n = len(labels)
    counts: dict[int, int] = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    transitions = sum(1 for w in phase_windows if len(set(np.asarray(w).tolist())) >= 2)
    return SelectionHistogram({k: c / n for k, c in sorted(counts.items())}, transitions / n, n)


def write_metrics_json(path: str | Path, metrics: PhaseMetrics, extra: dict | None = None) -> None:
    doc = {"aggregate": metrics.to_dict()}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


CURVE_COLUMNS = ("strategy", "fraction", "metric", "mean", "std")


def write_curve_csv(path: str | Path, rows: Sequence[tuple[str, float, str, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for strategy, frac, metric, mean, std in rows:
            w.writerow([strategy, f"{frac:.4f}", metric, _fmt(mean), _fmt(std)])


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"

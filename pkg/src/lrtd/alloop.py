"""The iterative annotate-and-retrain protocol.

Round 0 trains on a random initial fraction of the training clips.  Each later
round scores the unlabeled pool, moves the lowest-scoring clips (labeled by the
annotator) into the labeled set, retrains, and evaluates on held-out videos.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .backbone import EncoderConfig, NLRCNet
from .data import ClipId, ClipIndex, PoolState, Video, budget_size, init_pool
from .metrics import METRIC_NAMES, PhaseMetrics, aggregate, eval_video, write_metrics_json
from .selector import ClipScore, SelectionConfig, format_clip_id, score_pool, select_batch, write_scores_tsv
from .stats import paired_significance
from .training import TrainConfig, train_model

log = logging.getLogger(__name__)


@dataclass
class StopRule:
    mode: str = "fixed_budget"
    max_fraction: float = 0.5
    alpha: float = 0.05
    split: str = "test"

    def validate(self) -> None:
        if self.mode not in ("fixed_budget", "significance"):
            raise ValueError(f"stop.mode must be 'fixed_budget' or 'significance', got {self.mode!r}")
        if not 0.0 < self.max_fraction <= 1.0:
            raise ValueError("stop.max_fraction must lie in (0, 1]")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("stop.alpha must lie in (0, 1)")
        if self.split not in ("test", "validation"):
            raise ValueError("stop.split must be 'test' or 'validation'")


@dataclass
class RoundRecord:
    round: int
    target_fraction: float
    fraction: float
    labeled: int
    selected: list[ClipId]
    per_video_acc: dict[str, float]
    metrics: PhaseMetrics
    p_value: float | None
    wall_time: float = field(default=0.0, compare=False)


class Annotator(Protocol):
    def annotate(self, ids: Sequence[ClipId]) -> np.ndarray: ...


class OracleAnnotator:
    """Returns the dataset's ground-truth last-frame labels."""

    def __init__(self, clips: ClipIndex):
        self.clips = clips

    def annotate(self, ids: Sequence[ClipId]) -> np.ndarray:
        return self.clips.labels(ids)


def evaluate_videos(model: NLRCNet, videos: Sequence[Video], threads: int = 1) -> dict[str, PhaseMetrics]:
    """Frame-level metrics per video; frame t is predicted by the clip ending at t.

    Frames before the first full clip carry no prediction and are not scored.
    """
    T = model.config.T

    def one(v: Video) -> tuple[str, PhaseMetrics]:
        windows = v.clip_features(T)
        if len(windows) == 0:
            raise ValueError(f"video {v.video_id!r} is shorter than one clip")
        pred = model.predict(np.ascontiguousarray(windows))
        return v.video_id, eval_video(v.phases[T - 1:], pred)

    if threads > 1 and len(videos) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, videos))
    else:
        results = [one(v) for v in videos]
    return dict(results)


Trainer = Callable[[np.ndarray, np.ndarray, int, bool, "NLRCNet | None"], NLRCNet]
Evaluator = Callable[[NLRCNet, Sequence[Video]], dict[str, PhaseMetrics]]


@dataclass
class Experiment:
    """Everything one active-learning run needs; shared by ``al`` and ``compare``."""

    train_videos: list[Video]
    test_videos: list[Video]
    encoder: EncoderConfig
    train: TrainConfig
    selection: SelectionConfig
    stop: StopRule
    seed: int = 0
    validation_videos: list[Video] = field(default_factory=list)
    threads: int = 1

    def validate(self) -> None:
        self.encoder.validate()
        self.train.validate()
        self.selection.validate()
        self.stop.validate()
        train_ids = {v.video_id for v in self.train_videos}
        held = {v.video_id for v in self.test_videos} | {v.video_id for v in self.validation_videos}
        if train_ids & held:
            raise ValueError(f"video ids in both train and held-out splits: {sorted(train_ids & held)}")
        if not self.train_videos or not self.test_videos:
            raise ValueError("train and test splits must be nonempty")
        if self.stop.split == "validation" and not self.validation_videos:
            raise ValueError("stop.split='validation' needs validation videos")
        if self.selection.init_fraction > self.stop.max_fraction + 1e-9:
            raise ValueError("selection.init_fraction exceeds stop.max_fraction")


def budget_schedule(init_fraction: float, step: float, max_fraction: float) -> list[float]:
    """Labeled fractions per round: init, init+step, ... up to max (inclusive, 1e-9 slack)."""
    n = int(np.floor((max_fraction - init_fraction) / step + 1e-9))
    return [init_fraction + r * step for r in range(n + 1)]


def run_active_learning(
    exp: Experiment,
    out_dir: str | Path | None = None,
    trainer: Trainer | None = None,
    evaluator: Evaluator | None = None,
    annotator: Annotator | None = None,
) -> list[RoundRecord]:
    exp.validate()
    cfg = exp.selection
    strategy = cfg.strategy
    clips = ClipIndex(exp.train_videos, exp.encoder.T)
    annotator = annotator or OracleAnnotator(clips)
    use_nl = exp.train.use_nonlocal
    if strategy == "lrtd" and not use_nl:
        raise ValueError("the lrtd strategy needs train.use_nonlocal = true")

    if trainer is None:

        def trainer(features, labels, seed, nonlocal_on, init):
            return train_model(features, labels, exp.encoder, exp.train, seed, nonlocal_on, init)[0]

    if evaluator is None:

        def evaluator(model, videos):
            return evaluate_videos(model, videos, exp.threads)

    all_ids = clips.ids()
    N = len(all_ids)
    fractions = budget_schedule(cfg.init_fraction, cfg.batch_fraction, exp.stop.max_fraction)
    pool = init_pool(all_ids, cfg.init_fraction, exp.seed)
    out = Path(out_dir) if out_dir is not None else None

    records: list[RoundRecord] = []
    labeled_ids: list[ClipId] = sorted(pool.labeled)
    labels = dict(zip(labeled_ids, annotator.annotate(labeled_ids)))
    selected: list[ClipId] = labeled_ids
    scores: list[ClipScore] = []
    model: NLRCNet | None = None
    prev_stop_accs: dict[str, float] | None = None

    for r, frac in enumerate(fractions):
        t0 = time.perf_counter()
        if r > 0:
            n_c = min(budget_size(frac, N) - len(pool.labeled), len(pool.unlabeled))
            scores = score_pool(model, clips, pool, cfg, seed=_round_seed(exp.seed, r))
            selected = select_batch(pool, scores, n_c)
            labels.update(zip(selected, annotator.annotate(selected)))
            pool.label(selected, strategy, {s.clip_id: s.score for s in scores})

        ids = sorted(pool.labeled)
        y = np.array([labels[i] for i in ids], dtype=np.int64)
        init = model if (exp.train.warm_start and model is not None) else None
        model = trainer(clips.features(ids), y, exp.seed, use_nl, init)

        test_metrics = evaluator(model, exp.test_videos)
        per_video = {vid: m.ACC for vid, m in sorted(test_metrics.items())}
        stop_metrics = test_metrics if exp.stop.split == "test" else evaluator(model, exp.validation_videos)
        stop_accs = {vid: m.ACC for vid, m in sorted(stop_metrics.items())}
        p_value = None
        if prev_stop_accs is not None and len(stop_accs) >= 2:
            keys = sorted(stop_accs)
            p_value = paired_significance([stop_accs[k] for k in keys], [prev_stop_accs[k] for k in keys])
        prev_stop_accs = stop_accs

        rec = RoundRecord(
            round=r,
            target_fraction=frac,
            fraction=len(pool.labeled) / N,
            labeled=len(pool.labeled),
            selected=list(selected),
            per_video_acc=per_video,
            metrics=aggregate(list(test_metrics.values())),
            p_value=p_value,
            wall_time=time.perf_counter() - t0,
        )
        records.append(rec)
        log.info(
            "%s round %d: %d/%d labeled (%.3f), ACC %.4f, p=%s",
            strategy, r, rec.labeled, N, rec.fraction, rec.metrics.ACC, p_value,
        )
        if out is not None:
            _write_round(out / "rounds" / f"round_{r}", rec, model, scores, selected, labels, strategy)

        if exp.stop.mode == "significance" and p_value is not None and p_value > exp.stop.alpha:
            log.info("%s: stopping, round %d not significantly better (p=%.4g)", strategy, r, p_value)
            break
    return records


def _round_seed(seed: int, r: int) -> int:
    return seed * 1000 + r


def _write_round(
    path: Path,
    rec: RoundRecord,
    model: NLRCNet,
    scores: list[ClipScore],
    selected: list[ClipId],
    labels: dict[ClipId, int],
    strategy: str,
) -> None:
    path.mkdir(parents=True, exist_ok=True)
    model.save(path / "checkpoint.bin")
    write_scores_tsv(path / "scores.tsv", rec.round, scores, selected)
    with open(path / "selected.tsv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("round", "clip_id", "label"))
        for cid in sorted(selected):
            w.writerow((rec.round, format_clip_id(cid), int(labels[cid])))
    write_metrics_json(
        path / "metrics.json",
        rec.metrics,
        {
            "round": rec.round,
            "strategy": strategy,
            "fraction": rec.fraction,
            "labeled": rec.labeled,
            "p_value": rec.p_value,
            "per_video_acc": rec.per_video_acc,
        },
    )


SUMMARY_COLUMNS = ("strategy", "seed", "round", "fraction", "ACC", "PR", "RE", "JA", "F1", "p_value")


def summary_rows(strategy: str, seed: int, records: Sequence[RoundRecord]) -> list[list[str]]:
    rows = []
    for rec in records:
        m = rec.metrics
        vals = [m.ACC] + [m.macro[k] for k in METRIC_NAMES]
        rows.append(
            [strategy, str(seed), str(rec.round), f"{rec.fraction:.6f}"]
            + ["" if v is None else f"{v:.6f}" for v in vals]
            + ["" if rec.p_value is None else f"{rec.p_value:.6g}"]
        )
    return rows


def write_summary(path: str | Path, rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(rows)


def records_to_json(records: Sequence[RoundRecord]) -> list[dict]:
    return [
        {
            "round": r.round,
            "fraction": r.fraction,
            "labeled": r.labeled,
            "ACC": r.metrics.ACC,
            "macro": r.metrics.macro,
            "p_value": r.p_value,
            "per_video_acc": r.per_video_acc,
        }
        for r in records
    ]


def dump_json(path: str | Path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

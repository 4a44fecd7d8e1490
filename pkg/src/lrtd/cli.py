"""Command-line entry point: ``lrtd {gen,al,compare,eval,score,export-depmatrix}``.

Exit codes: 0 success, 2 input/validation error, 3 runtime/numeric failure.
Errors are printed as a single ``error: ...`` line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .alloop import (
    Experiment,
    RoundRecord,
    dump_json,
    records_to_json,
    run_active_learning,
    summary_rows,
    write_summary,
)
from .backbone import NLRCNet
from .config import Manifest, ManifestError, env_overrides, load_manifest, load_synthetic_spec
from .data import ClipIndex, DataFormatError, PoolState, budget_size, gen_synthetic, load_dataset, read_annotations
from .metrics import METRIC_NAMES, aggregate, eval_video, selection_histogram, write_curve_csv, write_metrics_json
from .nonlocal_block import dependency_matrices
from .numkernel import DimensionError, NumericError
from .selector import format_clip_id, score_pool, select_batch, write_scores_tsv
from .stats import paired_significance
from .training import TrainingError

log = logging.getLogger("lrtd")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


def _setup_logging(out: Path | None, verbose: bool) -> None:
    root = logging.getLogger("lrtd")
    root.handlers.clear()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(console)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        # timestamps live only in this file so other outputs stay byte-stable
        fh = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(fh)


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required (or set LRTD_OUT)")
    return Path(args.out)


def _load(args) -> Manifest:
    if args.manifest is None:
        raise UsageError("--manifest is required")
    m = load_manifest(args.manifest)
    if args.seed is not None:
        m.seed = args.seed
    return m


def _datasets(m: Manifest):
    ds = load_dataset(m.resolve(m.dataset.features), m.resolve(m.dataset.annotations), m.dataset.num_phases)
    if m.encoder.D != ds.dim:
        raise ManifestError(f"encoder.D={m.encoder.D} but the dataset has D={ds.dim}")
    return ds


def _experiment(m: Manifest, strategy: str, threads: int) -> Experiment:
    ds = _datasets(m)
    selection = type(m.selection)(**{**m.selection.__dict__, "strategy": strategy})
    return Experiment(
        train_videos=ds.subset(m.split.train),
        test_videos=ds.subset(m.split.test),
        validation_videos=ds.subset(m.split.validation),
        encoder=m.encoder,
        train=m.train,
        selection=selection,
        stop=m.stop,
        seed=m.seed,
        threads=threads,
    )


# ------------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    out = _require_out(args)
    spec = load_synthetic_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
        spec.validate()
    fpath, apath = gen_synthetic(spec, out)
    ds = load_dataset(fpath, apath, spec.num_phases)
    log.info("wrote %d videos to %s (D=%d, P=%d)", len(ds.videos), out, ds.dim, ds.num_phases)
    return EXIT_OK


def cmd_al(args) -> int:
    m = _load(args)
    out = _require_out(args)
    strategy = m.strategies[0] if m.strategies else m.selection.strategy
    if len(m.strategies) > 1:
        raise UsageError("al runs a single strategy; use compare for several")
    m.selection.strategy = strategy
    exp = _experiment(m, strategy, args.threads)
    out.mkdir(parents=True, exist_ok=True)
    m.write(out / "manifest.json")
    records = run_active_learning(exp, out)
    write_summary(out / "summary.csv", summary_rows(strategy, m.seed, records))
    dump_json(out / "rounds.json", records_to_json(records))
    return EXIT_OK


def _histogram_doc(exp: Experiment, records: list[RoundRecord]) -> dict:
    clips = ClipIndex(exp.train_videos, exp.encoder.T)
    chosen = [cid for rec in records[1:] for cid in rec.selected]
    if not chosen:
        return {}
    hist = selection_histogram(clips.phase_windows(chosen))
    return {
        "phase_fractions": {str(k): v for k, v in hist.phase_fractions.items()},
        "transition_fraction": hist.transition_fraction,
        "count": hist.count,
    }


def cmd_compare(args) -> int:
    m = _load(args)
    out = _require_out(args)
    if len(m.strategies) < 2 or len(set(m.strategies)) != len(m.strategies):
        raise UsageError("compare needs at least two distinct strategies in manifest.strategies")
    out.mkdir(parents=True, exist_ok=True)
    m.write(out / "manifest.json")
    results: dict[str, list[RoundRecord]] = {}
    histograms = {}
    rows = []
    for strategy in m.strategies:
        exp = _experiment(m, strategy, args.threads)
        records = run_active_learning(exp, out / strategy)
        results[strategy] = records
        histograms[strategy] = _histogram_doc(exp, records)
        rows += summary_rows(strategy, m.seed, records)
    write_summary(out / "summary.csv", rows)

    curve = []
    for strategy, records in results.items():
        for rec in records:
            curve.append((strategy, rec.target_fraction, "ACC", rec.metrics.ACC, rec.metrics.ACC_std))
            for name in METRIC_NAMES:
                curve.append((strategy, rec.target_fraction, name, rec.metrics.macro[name], rec.metrics.macro_std[name]))
    write_curve_csv(out / "curve.csv", curve)

    pairwise = []
    names = list(results)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            for ra, rb in zip(results[a], results[b]):
                keys = sorted(ra.per_video_acc)
                p = paired_significance([ra.per_video_acc[k] for k in keys], [rb.per_video_acc[k] for k in keys]) if len(keys) >= 2 else None
                pairwise.append({
                    "a": a,
                    "b": b,
                    "round": ra.round,
                    "fraction": ra.target_fraction,
                    "ACC_a": ra.metrics.ACC,
                    "ACC_b": rb.metrics.ACC,
                    "p_value": p,
                })
    report = {
        "seed": m.seed,
        "strategies": names,
        "curves": {s: records_to_json(r) for s, r in results.items()},
        "pairwise": pairwise,
        "selection_histograms": histograms,
        "notes": [
            "entropy strategies are DBN-style: MC-dropout entropy at clip granularity",
        ],
    }
    dump_json(out / "report.json", report)
    return EXIT_OK


def _read_predictions(path: Path) -> dict[str, dict[int, int]]:
    preds: dict[str, dict[int, int]] = {}
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header != ["video_id", "frame_index", "phase"]:
            raise DataFormatError(f"{path}:1: expected header video_id, frame_index, phase")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 columns")
            try:
                preds.setdefault(row[0], {})[int(row[1])] = int(row[2])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer field") from None
    return preds


def cmd_eval(args) -> int:
    out = _require_out(args)
    if args.predictions is None or args.annotations is None:
        raise UsageError("eval needs --predictions and --annotations")
    gt = read_annotations(args.annotations, args.num_phases)
    preds = _read_predictions(Path(args.predictions))
    per_video = {}
    for vid in sorted(preds):
        if vid not in gt:
            raise DataFormatError(f"predictions mention unknown video {vid!r}")
        frames = sorted(preds[vid])
        phases = gt[vid][0]
        if frames[-1] >= len(phases):
            raise DataFormatError(f"video {vid!r}: prediction for frame {frames[-1]} beyond {len(phases)} frames")
        per_video[vid] = eval_video(phases[frames], [preds[vid][f] for f in frames])
    if not per_video:
        raise DataFormatError("no predictions to evaluate")
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_json(
        out / "metrics.json",
        aggregate(list(per_video.values())),
        {"per_video": {k: v.to_dict() for k, v in per_video.items()}},
    )
    return EXIT_OK


def _pool_for_scoring(m: Manifest, clips: ClipIndex, labeled_path: str | None) -> PoolState:
    labeled = set()
    if labeled_path:
        with open(labeled_path, encoding="utf-8") as fh:
            reader = csv.DictReader(fh, delimiter="\t")
            for row in reader:
                vid, _, end = row["clip_id"].rpartition(":")
                labeled.add((vid, int(end)))
    unknown = labeled - clips.clips.keys()
    if unknown:
        raise DataFormatError(f"labeled clips not in the train pool: {sorted(unknown)[:3]}")
    return PoolState(labeled, set(clips.clips) - labeled)


def cmd_score(args) -> int:
    m = _load(args)
    out = _require_out(args)
    if args.checkpoint is None:
        raise UsageError("score needs --checkpoint")
    model = NLRCNet.load(args.checkpoint)
    ds = _datasets(m)
    clips = ClipIndex(ds.subset(m.split.train), model.config.T)
    pool = _pool_for_scoring(m, clips, args.labeled)
    strategy = m.strategies[0] if m.strategies else m.selection.strategy
    cfg = type(m.selection)(**{**m.selection.__dict__, "strategy": strategy})
    scores = score_pool(model, clips, pool, cfg, seed=m.seed)
    n_c = min(budget_size(cfg.batch_fraction, pool.total), len(pool.unlabeled))
    selected = select_batch(pool, scores, n_c)
    out.mkdir(parents=True, exist_ok=True)
    write_scores_tsv(out / "scores.tsv", pool.round, scores, selected)
    return EXIT_OK


def cmd_export_depmatrix(args) -> int:
    m = _load(args)
    out = _require_out(args)
    if args.checkpoint is None:
        raise UsageError("export-depmatrix needs --checkpoint")
    model = NLRCNet.load(args.checkpoint)
    if not model.use_nonlocal:
        raise UsageError("checkpoint has no non-local block")
    ds = _datasets(m)
    videos = ds.subset(args.videos.split(",")) if args.videos else ds.subset(m.split.train)
    clips = ClipIndex(videos, model.config.T)
    ids = clips.ids()
    mode = args.mode or m.selection.matrix_mode
    out.mkdir(parents=True, exist_ok=True)
    clamped = 0
    with open(out / "depmatrix.tsv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for start in range(0, len(ids), 1024):
            chunk = ids[start:start + 1024]
            mats, c = dependency_matrices(model.lstm_states(clips.features(chunk)), model.params, mode)
            clamped += c
            for cid, mat in zip(chunk, mats):
                w.writerow([format_clip_id(cid)] + [repr(float(v)) for v in mat.ravel()])
    log.info("exported %d matrices (%s mode, %d clamped logits)", len(ids), mode, clamped)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "al": cmd_al,
    "compare": cmd_compare,
    "eval": cmd_eval,
    "score": cmd_score,
    "export-depmatrix": cmd_export_depmatrix,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="experiment manifest (JSON)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the manifest/spec seed")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="parallelism cap")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lrtd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--spec", help="SyntheticSpec JSON (defaults if omitted)")
    sub.add_parser("al", parents=[common], help="run one active-learning experiment")
    sub.add_parser("compare", parents=[common], help="run several strategies on a shared initial pool")
    p = sub.add_parser("eval", parents=[common], help="score predictions against annotations")
    p.add_argument("--predictions", help="TSV: video_id, frame_index, phase")
    p.add_argument("--annotations", help="annotation TSV")
    p.add_argument("--num-phases", type=int, default=7)
    p = sub.add_parser("score", parents=[common], help="score the unlabeled pool with a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--labeled", help="selected.tsv listing already-labeled clips")
    p = sub.add_parser("export-depmatrix", parents=[common], help="dump dependency matrices as TSV")
    p.add_argument("--checkpoint")
    p.add_argument("--videos", help="comma-separated video ids (default: train split)")
    p.add_argument("--mode", choices=("raw", "normalized"))
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.seed, args.out = env_overrides(args.seed, args.out)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        _setup_logging(Path(args.out) if args.out else None, args.verbose)
        return COMMANDS[args.command](args)
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ManifestError, DataFormatError, UsageError, DimensionError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

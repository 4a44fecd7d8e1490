"""Clip scoring and batch selection.

Every strategy produces scores where LOWER means MORE worth annotating, so a
single ascending-rank selection serves them all:

* ``lrtd``: mean of the ``n_m`` largest entries of the non-local dependency matrix;
* ``emb_dot``: same score over raw dot products of LSTM states (no embeddings);
* ``entropy_mean`` / ``entropy_max``: negated mean / max MC-dropout entropy of
  the clip's per-frame predictions;
* ``random``: a seeded uniform draw.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import NLRCNet
from .data import ClipId, ClipIndex, PoolState
from .nonlocal_block import POOL_K, POOL_S, dependency_matrices
from .numkernel import Tensor, maxpool_time

STRATEGIES = ("lrtd", "random", "entropy_mean", "entropy_max", "emb_dot")


@dataclass(frozen=True)
class ClipScore:
    clip_id: ClipId
    score: float
    strategy: str

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"non-finite score for clip {self.clip_id}")


@dataclass
class SelectionConfig:
    strategy: str = "lrtd"
    n_m: int = 5
    batch_fraction: float = 0.10
    init_fraction: float = 0.10
    matrix_mode: str = "raw"
    mc_passes: int = 8

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"selection.strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.n_m < 1:
            raise ValueError("selection.n_m must be >= 1")
        if not 0.0 < self.batch_fraction <= 1.0:
            raise ValueError("selection.batch_fraction must lie in (0, 1]")
        if not 0.0 < self.init_fraction < 1.0:
            raise ValueError("selection.init_fraction must lie in (0, 1)")
        if self.matrix_mode not in ("raw", "normalized"):
            raise ValueError("selection.matrix_mode must be 'raw' or 'normalized'")
        if self.mc_passes < 1:
            raise ValueError("selection.mc_passes must be >= 1")


def lrtd_score(matrix: np.ndarray, n_m: int = 5) -> float:
    """Mean of the ``n_m`` largest entries (``n_m`` capped at the entry count)."""
    values = np.asarray(matrix, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("empty dependency matrix")
    k = min(n_m, values.size)
    return float(np.sort(values)[-k:].mean())


def lrtd_scores(matrices: np.ndarray, n_m: int = 5) -> np.ndarray:
    """Row-wise ``lrtd_score`` over a ``B x ...`` stack of matrices."""
    flat = matrices.reshape(len(matrices), -1)
    if flat.shape[1] == 0:
        raise ValueError("empty dependency matrix")
    k = min(n_m, flat.shape[1])
    return np.sort(flat, axis=1)[:, -k:].mean(axis=1)


def select_batch(pool: PoolState, scores: Sequence[ClipScore], n_c: int) -> list[ClipId]:
    """The ``n_c`` lowest-scoring unlabeled clips, ties broken by clip id."""
    by_id = {s.clip_id: s.score for s in scores}
    missing = pool.unlabeled - by_id.keys()
    if missing:
        raise KeyError(f"no score for unlabeled clip(s) {sorted(missing)[:3]}")
    extra = by_id.keys() - pool.unlabeled
    if extra:
        raise KeyError(f"scores given for clips outside the unlabeled pool: {sorted(extra)[:3]}")
    if not 0 <= n_c <= len(pool.unlabeled):
        raise ValueError(f"cannot select {n_c} clips from {len(pool.unlabeled)} unlabeled")
    ranked = sorted(pool.unlabeled, key=lambda cid: (by_id[cid], cid))
    return ranked[:n_c]


def _clip_seed(seed: int, clip_id: ClipId) -> list[int]:
    return [seed, zlib.crc32(clip_id[0].encode("utf-8")), clip_id[1]]


def emb_dot_matrices(states: np.ndarray) -> np.ndarray:
    """``c_i^T c_hat_j`` with ``c_hat`` the time-subsampled LSTM states, ``B x T x T'``."""
    pooled = maxpool_time(Tensor(states), POOL_K, POOL_S).data
    return np.einsum("bht,bhs->bts", states, pooled)


def score_clips(
    model: NLRCNet | None,
    features: np.ndarray,
    ids: Sequence[ClipId],
    config: SelectionConfig,
    seed: int = 0,
) -> tuple[np.ndarray, int]:
    """Scores for ``B x D x T`` clips; also returns the number of clamped logits."""
    strategy = config.strategy
    if strategy == "random":
        return np.array([np.random.default_rng(_clip_seed(seed, cid)).random() for cid in ids]), 0
    if model is None:
        raise ValueError(f"strategy {strategy!r} needs a trained model")
    if strategy == "lrtd":
        if not model.use_nonlocal:
            raise ValueError("lrtd scoring needs a model with the non-local block")
        states = model.lstm_states(features)
        mats, clamped = dependency_matrices(states, model.params, config.matrix_mode)
        return lrtd_scores(mats, config.n_m), clamped
    if strategy == "emb_dot":
        return lrtd_scores(emb_dot_matrices(model.lstm_states(features)), config.n_m), 0
    rngs = [np.random.default_rng(_clip_seed(seed, cid)) for cid in ids]
    ent = model.frame_entropies(features, config.mc_passes, model.config.dropout, rngs)
    agg = ent.mean(axis=1) if strategy == "entropy_mean" else ent.max(axis=1)
    return -agg, 0


def score_pool(
    model: NLRCNet | None,
    clips: ClipIndex,
    pool: PoolState,
    config: SelectionConfig,
    seed: int = 0,
    batch: int = 1024,
) -> list[ClipScore]:
    """Score every clip of D_U, in clip-id order."""
    ids = sorted(pool.unlabeled)
    out = []
    for start in range(0, len(ids), batch):
        chunk = ids[start:start + batch]
        values, _ = score_clips(model, clips.features(chunk), chunk, config, seed)
        out.extend(ClipScore(cid, float(v), config.strategy) for cid, v in zip(chunk, values))
    return out


def format_clip_id(cid: ClipId) -> str:
    return f"{cid[0]}:{cid[1]}"


def parse_clip_id(text: str) -> ClipId:
    vid, _, end = text.rpartition(":")
    if not vid:
        raise ValueError(f"bad clip id {text!r}")
    return vid, int(end)


SCORE_COLUMNS = ("round", "strategy", "clip_id", "score", "selected")


def write_scores_tsv(
    path: str | Path, round_index: int, scores: Iterable[ClipScore], selected: Iterable[ClipId]
) -> None:
    chosen = set(selected)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for s in sorted(scores, key=lambda s: s.clip_id):
            w.writerow([round_index, s.strategy, format_clip_id(s.clip_id), repr(s.score), int(s.clip_id in chosen)])

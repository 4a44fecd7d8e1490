"""Datasets of per-frame features, clip generation, pool bookkeeping and the
synthetic phase-sequence generator.

Feature file (little-endian)::

    b"LRTDFEAT" | u32 version=1 | u32 num_videos
    per video: u16 name_len | name (utf-8) | u32 F | u32 D | F*D float32 row-major

Annotation file: UTF-8 TSV with header
``video_id<TAB>frame_index<TAB>phase<TAB>outlier_flag``; one row per frame,
``frame_index`` starting at 0.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

FEATURE_MAGIC = b"LRTDFEAT"
FEATURE_VERSION = 1
ANNOTATION_HEADER = ("video_id", "frame_index", "phase", "outlier_flag")

ClipId = tuple[str, int]


class DataFormatError(ValueError):
    """Malformed or inconsistent dataset file."""


@dataclass(frozen=True)
class FrameRecord:
    video_id: str
    frame_index: int
    feature: np.ndarray
    phase: int


@dataclass(eq=False)
class Video:
    """One video: an ``F x D`` feature matrix plus per-frame phase labels.

    ``outlier`` is the generator's side channel; models never read it.
    """

    video_id: str
    features: np.ndarray
    phases: np.ndarray
    outlier: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.phases = np.asarray(self.phases, dtype=np.int64)
        if self.outlier is None:
            self.outlier = np.zeros(len(self.phases), dtype=np.int64)
        self.outlier = np.asarray(self.outlier, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.phases):
            raise DataFormatError(
                f"video {self.video_id!r}: {self.features.shape} features vs {len(self.phases)} labels"
            )

    @property
    def num_frames(self) -> int:
        return len(self.phases)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def frames(self) -> Iterator[FrameRecord]:
        for i in range(self.num_frames):
            yield FrameRecord(self.video_id, i, self.features[i], int(self.phases[i]))

    def clip_features(self, T: int) -> np.ndarray:
        """All stride-1 windows as an ``(F-T+1) x D x T`` array (view)."""
        if self.num_frames < T:
            return np.empty((0, self.dim, T))
        return np.lib.stride_tricks.sliding_window_view(self.features, T, axis=0)

    def __eq__(self, other):
        if not isinstance(other, Video):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.phases, other.phases)
            and np.array_equal(self.outlier, other.outlier)
        )


@dataclass(frozen=True)
class Clip:
    """``T`` consecutive frames of one video, labeled by its last frame."""

    video: Video = field(repr=False, compare=False)
    end: int
    T: int

    @property
    def clip_id(self) -> ClipId:
        return (self.video.video_id, self.end)

    @property
    def start(self) -> int:
        return self.end - self.T + 1

    @property
    def features(self) -> np.ndarray:
        """``D x T`` feature block."""
        return self.video.features[self.start:self.end + 1].T

    @property
    def phases(self) -> np.ndarray:
        return self.video.phases[self.start:self.end + 1]

    @property
    def label(self) -> int:
        return int(self.video.phases[self.end])

    @property
    def has_outlier(self) -> bool:
        return bool(self.video.outlier[self.start:self.end + 1].any())

    def frames(self) -> list[FrameRecord]:
        return [
            FrameRecord(self.video.video_id, i, self.video.features[i], int(self.video.phases[i]))
            for i in range(self.start, self.end + 1)
        ]


def make_clips(video: Video, T: int) -> list[Clip]:
    """Stride-1 sliding windows; a video of F frames yields max(0, F-T+1) clips."""
    if T < 1:
        raise ValueError(f"clip length must be >= 1, got {T}")
    return [Clip(video, end, T) for end in range(T - 1, video.num_frames)]


class ClipIndex:
    """All clips of a set of videos, addressable by clip id, with batched feature gathering."""

    def __init__(self, videos: Sequence[Video], T: int):
        self.T = T
        self.videos = {v.video_id: v for v in videos}
        if len(self.videos) != len(videos):
            raise DataFormatError("duplicate video ids")
        self.clips: dict[ClipId, Clip] = {}
        for v in videos:
            for c in make_clips(v, T):
                self.clips[c.clip_id] = c
        self._windows = {v.video_id: v.clip_features(T) for v in videos}

    def __len__(self) -> int:
        return len(self.clips)

    def ids(self) -> list[ClipId]:
        return sorted(self.clips)

    def features(self, ids: Sequence[ClipId]) -> np.ndarray:
        """``B x D x T`` block for the given clip ids."""
        if not ids:
            v = next(iter(self.videos.values()))
            return np.empty((0, v.dim, self.T))
        return np.stack([self._windows[vid][end - self.T + 1] for vid, end in ids])

    def labels(self, ids: Sequence[ClipId]) -> np.ndarray:
        return np.array([self.videos[vid].phases[end] for vid, end in ids], dtype=np.int64)

    def phase_windows(self, ids: Sequence[ClipId]) -> np.ndarray:
        return np.stack([self.videos[vid].phases[end - self.T + 1:end + 1] for vid, end in ids])


# ------------------------------------------------------------------------ pool


@dataclass
class RoundSelection:
    round: int
    strategy: str
    selected: list[ClipId]
    scores: dict[ClipId, float] = field(default_factory=dict)


@dataclass
class PoolState:
    """Partition of all clips into labeled (D_A) and unlabeled (D_U) sets."""

    labeled: set[ClipId]
    unlabeled: set[ClipId]
    round: int = 0
    history: list[RoundSelection] = field(default_factory=list)

    def __post_init__(self):
        self.check()

    @property
    def total(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    @property
    def fraction(self) -> float:
        return len(self.labeled) / self.total

    def check(self) -> None:
        if self.labeled & self.unlabeled:
            raise AssertionError("labeled and unlabeled sets overlap")

    def label(self, ids: Iterable[ClipId], strategy: str, scores: dict[ClipId, float] | None = None) -> None:
        """Move ``ids`` from D_U to D_A and open a new round."""
        ids = sorted(ids)
        missing = [i for i in ids if i not in self.unlabeled]
        if missing:
            raise KeyError(f"clips not in the unlabeled pool: {missing[:3]}")
        self.unlabeled.difference_update(ids)
        self.labeled.update(ids)
        self.round += 1
        self.history.append(RoundSelection(self.round, strategy, ids, dict(scores or {})))
        self.check()


def init_pool(clip_ids: Sequence[ClipId], init_fraction: float, seed: int) -> PoolState:
    """Draw round(init_fraction * N) clips uniformly without replacement (seeded)."""
    if not clip_ids:
        raise ValueError("cannot initialise a pool from zero clips")
    if not 0.0 < init_fraction < 1.0:
        raise ValueError(f"init_fraction must lie in (0, 1), got {init_fraction}")
    ordered = sorted(clip_ids)
    n = budget_size(init_fraction, len(ordered))
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(ordered), size=n, replace=False)
    labeled = {ordered[i] for i in pick}
    pool = PoolState(labeled, set(ordered) - labeled)
    pool.history.append(RoundSelection(0, "init", sorted(labeled)))
    return pool


# ------------------------------------------------------------------- file I/O


def write_features(path: str | Path, videos: Sequence[Video]) -> None:
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC)
    buf.write(struct.pack("<II", FEATURE_VERSION, len(videos)))
    for v in videos:
        name = v.video_id.encode("utf-8")
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<II", v.num_frames, v.dim))
        buf.write(np.ascontiguousarray(v.features, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def write_annotations(path: str | Path, videos: Sequence[Video]) -> None:
    lines = ["\t".join(ANNOTATION_HEADER)]
    for v in videos:
        for i in range(v.num_frames):
            lines.append(f"{v.video_id}\t{i}\t{int(v.phases[i])}\t{int(v.outlier[i])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_features(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    pos = 0

    def need(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise DataFormatError(f"{path}: truncated while reading {what} at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if need(8, "magic") != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic, expected {FEATURE_MAGIC!r}")
    version, count = struct.unpack("<II", need(8, "header"))
    if version != FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    dim = None
    for k in range(count):
        (n,) = struct.unpack("<H", need(2, f"name length of video {k}"))
        name = need(n, f"name of video {k}").decode("utf-8")
        F, D = struct.unpack("<II", need(8, f"shape of video {name!r}"))
        if dim is not None and D != dim:
            raise DataFormatError(f"{path}: video {name!r} has D={D}, expected {dim}")
        dim = D
        arr = np.frombuffer(need(4 * F * D, f"features of video {name!r}"), dtype="<f4")
        if name in out:
            raise DataFormatError(f"{path}: duplicate video {name!r}")
        out[name] = arr.reshape(F, D).astype(np.float64)
    if pos != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def read_annotations(path: str | Path, num_phases: int = 7) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Parse the TSV into ``{video_id: (phases, outlier_flags)}``."""
    path = Path(path)
    rows: dict[str, tuple[list[int], list[int]]] = {}
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != ANNOTATION_HEADER:
            raise DataFormatError(f"{path}:1: bad header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            vid = parts[0]
            try:
                idx, phase, flag = int(parts[1]), int(parts[2]), int(parts[3])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer field") from None
            if not 0 <= phase < num_phases:
                raise DataFormatError(f"{path}:{lineno}: phase {phase} outside [0, {num_phases - 1}]")
            if flag not in (0, 1):
                raise DataFormatError(f"{path}:{lineno}: outlier_flag must be 0 or 1")
            phases, flags = rows.setdefault(vid, ([], []))
            if idx != len(phases):
                raise DataFormatError(
                    f"{path}:{lineno}: video {vid!r} frame_index {idx}, expected {len(phases)}"
                )
            phases.append(phase)
            flags.append(flag)
    return {k: (np.array(p, dtype=np.int64), np.array(f, dtype=np.int64)) for k, (p, f) in rows.items()}


@dataclass
class Dataset:
    videos: list[Video]
    num_phases: int

    @property
    def dim(self) -> int:
        return self.videos[0].dim

    def by_id(self) -> dict[str, Video]:
        return {v.video_id: v for v in self.videos}

    def subset(self, ids: Sequence[str]) -> list[Video]:
        table = self.by_id()
        missing = [i for i in ids if i not in table]
        if missing:
            raise KeyError(f"unknown video ids: {missing}")
        return [table[i] for i in ids]

    def summary(self) -> dict:
        return {
            "videos": len(self.videos),
            "frames": sum(v.num_frames for v in self.videos),
            "D": self.dim,
            "P": self.num_phases,
        }


def load_dataset(feature_path: str | Path, annotation_path: str | Path, num_phases: int = 7) -> Dataset:
    feats = read_features(feature_path)
    ann = read_annotations(annotation_path, num_phases)
    if set(feats) != set(ann):
        only_f = sorted(set(feats) - set(ann))
        only_a = sorted(set(ann) - set(feats))
        raise DataFormatError(f"video sets differ: features-only {only_f}, annotations-only {only_a}")
    videos = []
    for vid, arr in feats.items():
        phases, flags = ann[vid]
        if len(phases) != len(arr):
            raise DataFormatError(
                f"video {vid!r}: {len(arr)} feature frames but {len(phases)} annotation rows"
            )
        videos.append(Video(vid, arr, phases, flags))
    if not videos:
        raise DataFormatError(f"{feature_path}: no videos")
    return Dataset(videos, num_phases)


def save_dataset(out_dir: str | Path, videos: Sequence[Video]) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fpath, apath = out / "features.bin", out / "annotations.tsv"
    write_features(fpath, videos)
    write_annotations(apath, videos)
    return fpath, apath


# ------------------------------------------------------------------ synthetic


@dataclass
class SyntheticSpec:
    """Parameters of the AR(1) phase-sequence generator.

    Each video walks the phases in ``phase_order``; a phase after the first is
    skipped with ``skip_prob``.  Within a phase the feature follows
    ``x_t = rho * x_{t-1} + (1 - rho) * mu_phase + eps`` with ``eps ~ N(0, noise_scale^2)``.
    With ``p_noise`` a frame is replaced by a low-energy outlier draw
    ``N(0, outlier_scale^2)`` (a blurred/uninformative frame); the recursion
    continues from the replaced value.
    """

    num_videos: int = 20
    min_frames: int = 180
    max_frames: int = 220
    dim: int = 16
    num_phases: int = 7
    prototype_scale: float = 1.0
    phase_order: list[int] | None = None
    skip_prob: float = 0.0
    rho: float = 0.7
    p_noise: float = 0.03
    noise_scale: float = 0.3
    outlier_scale: float = 0.3
    seed: int = 0
    prototypes: list[list[float]] | None = None

    def validate(self) -> None:
        if self.num_videos < 1:
            raise ValueError("num_videos must be >= 1")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("min_frames/max_frames must satisfy 1 <= min_frames <= max_frames")
        if self.dim < 1 or self.num_phases < 1:
            raise ValueError("dim and num_phases must be >= 1")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if not 0.0 <= self.p_noise < 1.0:
            raise ValueError(f"p_noise must lie in [0, 1), got {self.p_noise}")
        if not 0.0 <= self.skip_prob < 1.0:
            raise ValueError(f"skip_prob must lie in [0, 1), got {self.skip_prob}")
        if self.noise_scale < 0 or self.outlier_scale < 0 or self.prototype_scale < 0:
            raise ValueError("scales must be nonnegative")
        order = self.order()
        if sorted(set(order)) != sorted(order) or not all(0 <= p < self.num_phases for p in order):
            raise ValueError("phase_order must list distinct phases in [0, num_phases)")
        if self.prototypes is not None:
            arr = np.asarray(self.prototypes, dtype=float)
            if arr.shape != (self.num_phases, self.dim):
                raise ValueError(f"prototypes must be {self.num_phases}x{self.dim}, got {arr.shape}")

    def order(self) -> list[int]:
        return list(range(self.num_phases)) if self.phase_order is None else list(self.phase_order)


def phase_prototypes(spec: SyntheticSpec) -> np.ndarray:
    if spec.prototypes is not None:
        return np.asarray(spec.prototypes, dtype=np.float64)
    rng = np.random.default_rng([spec.seed, 0])
    return rng.normal(size=(spec.num_phases, spec.dim)) * spec.prototype_scale


def _phase_track(rng: np.random.Generator, order: list[int], F: int, skip_prob: float) -> np.ndarray:
    kept = [order[0]] + [p for p in order[1:] if rng.random() >= skip_prob]
    kept = kept[:F]
    weights = rng.uniform(0.5, 1.5, size=len(kept))
    # every kept phase gets at least one frame; the rest is split by weight
    extra = F - len(kept)
    cuts = np.floor(np.cumsum(weights) / weights.sum() * extra + 1e-9).astype(int)
    lengths = np.diff(np.concatenate([[0], cuts])) + 1
    lengths[-1] += F - lengths.sum()
    return np.repeat(kept, lengths)


def synthesize(spec: SyntheticSpec) -> list[Video]:
    """Generate the dataset in memory; a pure function of ``spec``."""
    spec.validate()
    mu = phase_prototypes(spec)
    order = spec.order()
    width = len(str(spec.num_videos - 1))
    videos = []
    for k in range(spec.num_videos):
        rng = np.random.default_rng([spec.seed, 1, k])
        F = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        phases = _phase_track(rng, order, F, spec.skip_prob)
        eps = rng.normal(size=(F, spec.dim)) * spec.noise_scale
        flip = rng.random(F) < spec.p_noise
        outliers = rng.normal(size=(F, spec.dim)) * spec.outlier_scale
        x = np.empty((F, spec.dim))
        prev = mu[phases[0]]
        for t in range(F):
            cur = spec.rho * prev + (1.0 - spec.rho) * mu[phases[t]] + eps[t]
            if flip[t]:
                cur = outliers[t]
            x[t] = cur
            prev = cur
        # the on-disk format is float32; round here so memory and disk agree
        x = x.astype(np.float32).astype(np.float64)
        videos.append(Video(f"video{k:0{width}d}", x, phases, flip.astype(np.int64)))
    return videos


def gen_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> tuple[Path, Path]:
    return save_dataset(out_dir, synthesize(spec))


def nearest_prototype(features: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    d = ((features[:, None, :] - prototypes[None, :, :]) ** 2).sum(axis=-1)
    return d.argmin(axis=1)


def budget_size(fraction: float, total: int) -> int:
    """Clip count for a budget fraction; the half-up rounding keeps 0.1*N steps exact."""
    return int(math.floor(fraction * total + 0.5 + 1e-9))

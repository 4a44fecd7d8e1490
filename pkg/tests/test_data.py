import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrtd.data import (
    ANNOTATION_HEADER,
    DataFormatError,
    PoolState,
    SyntheticSpec,
    Video,
    gen_synthetic,
    init_pool,
    load_dataset,
    make_clips,
    nearest_prototype,
    phase_prototypes,
    save_dataset,
    synthesize,
)


def _video(F, D=4, vid="v0", seed=0):
    rng = np.random.default_rng(seed)
    return Video(vid, rng.normal(size=(F, D)).astype(np.float32), rng.integers(0, 7, F))


def test_load_fixture(tmp_path):
    v = _video(12)
    save_dataset(tmp_path, [v])
    ds = load_dataset(tmp_path / "features.bin", tmp_path / "annotations.tsv")
    assert len(list(ds.videos[0].frames())) == 12
    assert ds.summary() == {"videos": 1, "frames": 12, "D": 4, "P": 7}


def test_feature_file_layout(tmp_path):
    v = _video(3, D=2, vid="ab")
    save_dataset(tmp_path, [v])
    raw = (tmp_path / "features.bin").read_bytes()
    assert raw[:8] == b"LRTDFEAT"
    assert struct.unpack("<II", raw[8:16]) == (1, 1)
    assert struct.unpack("<H", raw[16:18]) == (2,)
    assert raw[18:20] == b"ab"
    assert struct.unpack("<II", raw[20:28]) == (3, 2)
    payload = np.frombuffer(raw[28:], dtype="<f4").reshape(3, 2)
    assert np.array_equal(payload, v.features.astype(np.float32))
    lines = (tmp_path / "annotations.tsv").read_text().splitlines()
    assert lines[0] == "\t".join(ANNOTATION_HEADER)
    assert lines[1].split("\t")[:2] == ["ab", "0"]


def test_phase_out_of_range(tmp_path):
    save_dataset(tmp_path, [_video(5)])
    ann = tmp_path / "annotations.tsv"
    lines = ann.read_text().splitlines()
    parts = lines[3].split("\t")
    parts[2] = "9"
    lines[3] = "\t".join(parts)
    ann.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError, match=r"annotations.tsv:4: phase 9"):
        load_dataset(tmp_path / "features.bin", ann)


def test_frame_count_mismatch_names_video(tmp_path):
    save_dataset(tmp_path, [_video(100, vid="clip_A")])
    ann = tmp_path / "annotations.tsv"
    lines = ann.read_text().splitlines()
    ann.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DataFormatError, match="clip_A"):
        load_dataset(tmp_path / "features.bin", ann)


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda b: b"XXXXXXXX" + b[8:], "bad magic"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\0", "trailing"),
    ],
)
def test_malformed_feature_file(tmp_path, mutate, match):
    save_dataset(tmp_path, [_video(4)])
    f = tmp_path / "features.bin"
    f.write_bytes(mutate(f.read_bytes()))
    with pytest.raises(DataFormatError, match=match):
        load_dataset(f, tmp_path / "annotations.tsv")


def test_non_contiguous_frames(tmp_path):
    save_dataset(tmp_path, [_video(4)])
    ann = tmp_path / "annotations.tsv"
    lines = ann.read_text().splitlines()
    del lines[2]
    ann.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError, match="frame_index 2, expected 1"):
        load_dataset(tmp_path / "features.bin", ann)


def test_bad_header(tmp_path):
    save_dataset(tmp_path, [_video(4)])
    ann = tmp_path / "annotations.tsv"
    ann.write_text("video\tframe\n" + "\n".join(ann.read_text().splitlines()[1:]))
    with pytest.raises(DataFormatError, match=":1: bad header"):
        load_dataset(tmp_path / "features.bin", ann)


@pytest.mark.parametrize("F,expected_ends", [(12, [9, 10, 11]), (10, [9]), (9, [])])
def test_make_clips_examples(F, expected_ends):
    clips = make_clips(_video(F), 10)
    assert [c.end for c in clips] == expected_ends


def test_make_clips_count_exhaustive():
    for T in range(1, 8):
        for F in range(0, 3 * T + 1):
            v = _video(F) if F else Video("e", np.zeros((0, 4)), np.zeros(0, dtype=int))
            clips = make_clips(v, T)
            assert len(clips) == max(0, F - T + 1)
            for a, b in zip(clips, clips[1:]):
                shared = set(range(a.start, a.end + 1)) & set(range(b.start, b.end + 1))
                assert len(shared) == T - 1


def test_clip_label_is_last_frame():
    v = _video(15)
    for c in make_clips(v, 10):
        frames = c.frames()
        assert len(frames) == 10
        assert c.label == frames[-1].phase
        assert [f.frame_index for f in frames] == list(range(c.start, c.end + 1))
        assert np.array_equal(c.features, v.features[c.start:c.end + 1].T)


def _ids(n):
    return [("v", i) for i in range(n)]


def test_init_pool_sizes_and_determinism():
    pool = init_pool(_ids(100), 0.1, seed=4)
    assert len(pool.labeled) == 10 and len(pool.unlabeled) == 90
    assert init_pool(_ids(100), 0.1, seed=4).labeled == pool.labeled
    with pytest.raises(ValueError):
        init_pool(_ids(100), 1.0, seed=0)
    with pytest.raises(ValueError):
        init_pool([], 0.1, seed=0)


@given(st.integers(5, 60), st.lists(st.integers(0, 10**6), max_size=8), st.integers(0, 100))
def test_pool_partition_invariant(n, picks, seed):
    ids = _ids(n)
    pool = init_pool(ids, 0.2, seed)
    prev = set(pool.labeled)
    for p in picks:
        if not pool.unlabeled:
            break
        ordered = sorted(pool.unlabeled)
        chosen = [ordered[p % len(ordered)], ordered[(p // 7) % len(ordered)]]
        pool.label(set(chosen), "test")
        assert not (pool.labeled & pool.unlabeled)
        assert pool.labeled | pool.unlabeled == set(ids)
        assert prev <= pool.labeled
        prev = set(pool.labeled)


def test_pool_rejects_labeled_clip():
    pool = PoolState({("v", 0)}, {("v", 1)})
    with pytest.raises(KeyError):
        pool.label([("v", 0)], "x")


# ------------------------------------------------------------------ synthetic


def test_synthetic_separable_matches_nearest_centroid():
    protos = (np.eye(7, 16) * 20.0).tolist()
    spec = SyntheticSpec(num_videos=3, rho=0.0, p_noise=0.0, noise_scale=0.5, prototypes=protos, seed=1)
    mu = phase_prototypes(spec)
    for v in synthesize(spec):
        assert (nearest_prototype(v.features, mu) == v.phases).all()


def test_synthetic_no_noise_means_no_outliers():
    for v in synthesize(SyntheticSpec(num_videos=4, p_noise=0.0)):
        assert v.outlier.sum() == 0


def test_synthetic_walks_phase_order():
    spec = SyntheticSpec(num_videos=5, skip_prob=0.3, seed=2)
    for v in synthesize(spec):
        assert (np.diff(v.phases) >= 0).all()
        assert v.phases[0] == 0
    order = [3, 1, 0]
    spec = SyntheticSpec(num_videos=2, num_phases=4, phase_order=order, seed=2)
    for v in synthesize(spec):
        seen = list(dict.fromkeys(v.phases.tolist()))
        assert seen == order


def test_synthetic_bytes_deterministic(tmp_path):
    spec = SyntheticSpec(num_videos=3, seed=9)
    gen_synthetic(spec, tmp_path / "a")
    gen_synthetic(spec, tmp_path / "b")
    for name in ("features.bin", "annotations.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synthetic_round_trip(tmp_path):
    spec = SyntheticSpec(num_videos=4, seed=5)
    videos = synthesize(spec)
    f, a = gen_synthetic(spec, tmp_path)
    assert load_dataset(f, a).videos == videos


@pytest.mark.parametrize("field,value", [("rho", 1.0), ("p_noise", -0.1), ("num_videos", 0)])
def test_synthetic_spec_validation(field, value):
    spec = SyntheticSpec(**{field: value})
    with pytest.raises(ValueError, match=field):
        spec.validate()

import numpy as np
import pytest

from lrtd.alloop import Experiment, StopRule, budget_schedule, run_active_learning, summary_rows
from lrtd.backbone import EncoderConfig, NLRCNet
from lrtd.data import ClipIndex, SyntheticSpec, budget_size, synthesize
from lrtd.metrics import eval_video
from lrtd.selector import SelectionConfig
from lrtd.training import TrainConfig

FAST = TrainConfig(pretrain_epochs=1, finetune_epochs=1)


def _videos(n=8, seed=0):
    return synthesize(SyntheticSpec(num_videos=n, min_frames=40, max_frames=50, dim=6, num_phases=4, seed=seed))


def _exp(strategy="lrtd", stop=None, seed=0, videos=None, train=FAST):
    videos = videos or _videos()
    return Experiment(
        train_videos=videos[:5],
        test_videos=videos[5:],
        encoder=EncoderConfig(D=6, H=6, T=6, P=4),
        train=train,
        selection=SelectionConfig(strategy=strategy),
        stop=stop or StopRule(),
        seed=seed,
    )


class RecordingTrainer:
    """Stub trainer: remembers every labeled set it was asked to fit."""

    def __init__(self, encoder):
        self.encoder = encoder
        self.calls = []

    def __call__(self, features, labels, seed, nonlocal_on, init):
        self.calls.append((features.copy(), labels.copy()))
        return NLRCNet.initialize(self.encoder, seed, use_nonlocal=nonlocal_on)


def scripted_evaluator(acc_rounds):
    """Stub evaluator returning a fixed per-video accuracy table per round."""
    state = {"r": 0}

    def evaluate(model, videos):
        accs = acc_rounds[min(state["r"], len(acc_rounds) - 1)]
        state["r"] += 1
        out = {}
        for v, a in zip(videos, accs):
            n = 100
            k = int(round(a * n))
            out[v.video_id] = eval_video([0] * n, [0] * k + [1] * (n - k))
        return out

    return evaluate


def test_budget_schedule():
    assert np.allclose(budget_schedule(0.1, 0.1, 0.5), [0.1, 0.2, 0.3, 0.4, 0.5])
    assert np.allclose(budget_schedule(0.1, 0.2, 0.5), [0.1, 0.3, 0.5])
    assert budget_schedule(0.1, 0.1, 0.1) == [0.1]


def test_fixed_budget_fractions_and_accounting():
    exp = _exp()
    trainer = RecordingTrainer(exp.encoder)
    recs = run_active_learning(exp, trainer=trainer)
    N = len(ClipIndex(exp.train_videos, 6))
    assert [r.labeled for r in recs] == [budget_size(f, N) for f in (0.1, 0.2, 0.3, 0.4, 0.5)]
    assert [round(r.target_fraction, 10) for r in recs] == [0.1, 0.2, 0.3, 0.4, 0.5]
    for r in recs:
        assert abs(r.fraction - r.target_fraction) <= 0.5 / N + 1e-12
    for a, b in zip(recs, recs[1:]):
        assert len(b.selected) == b.labeled - a.labeled
        assert not set(b.selected) & set().union(*[set(x.selected) for x in recs[: b.round]])
    # every round's training set strictly contains the previous one
    sizes = [len(lab) for _, lab in trainer.calls]
    assert sizes == sorted(sizes) and len(set(sizes)) == len(sizes)


def test_no_leakage_into_training():
    exp = _exp()
    trainer = RecordingTrainer(exp.encoder)
    run_active_learning(exp, trainer=trainer)
    held = ClipIndex(exp.test_videos, 6)
    held_rows = {tuple(f.ravel()) for f in held.features(held.ids())}
    for feats, _ in trainer.calls:
        assert not any(tuple(f.ravel()) in held_rows for f in feats)


def test_leakage_guard():
    videos = _videos()
    exp = _exp(videos=videos)
    exp.test_videos = videos[4:]
    with pytest.raises(ValueError, match="both"):
        run_active_learning(exp)


def test_round_zero_shared_across_strategies():
    first = {}
    for strategy in ("lrtd", "random", "entropy_mean", "emb_dot"):
        recs = run_active_learning(_exp(strategy), evaluator=None)
        first[strategy] = recs[0]
    ref = first["lrtd"]
    for rec in first.values():
        assert rec.selected == ref.selected and rec.per_video_acc == ref.per_video_acc


def test_run_deterministic(tmp_path):
    a = run_active_learning(_exp("entropy_max"), out_dir=tmp_path / "a")
    b = run_active_learning(_exp("entropy_max"), out_dir=tmp_path / "b")
    assert a == b
    for rel in ("rounds/round_2/scores.tsv", "rounds/round_2/checkpoint.bin", "rounds/round_4/metrics.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert summary_rows("x", 0, a) == summary_rows("x", 0, b)


def test_different_seeds_differ():
    a = run_active_learning(_exp("random", seed=0), trainer=RecordingTrainer(EncoderConfig(D=6, H=6, T=6, P=4)))
    b = run_active_learning(_exp("random", seed=1), trainer=RecordingTrainer(EncoderConfig(D=6, H=6, T=6, P=4)))
    assert a[0].selected != b[0].selected


def test_significance_stop_at_first_flat_round():
    # 4 videos; rounds 1 and 2 improve everywhere, round 3 is noise around round 2
    table = [
        [0.50, 0.52, 0.48, 0.51],
        [0.60, 0.63, 0.58, 0.61],
        [0.70, 0.72, 0.69, 0.71],
        [0.71, 0.70, 0.70, 0.71],
        [0.90, 0.90, 0.90, 0.90],
    ]
    videos = _videos(9)
    exp = _exp(stop=StopRule(mode="significance"), videos=videos)
    exp.test_videos = videos[5:]
    trainer = RecordingTrainer(exp.encoder)
    recs = run_active_learning(exp, trainer=trainer, evaluator=scripted_evaluator(table))
    assert [r.round for r in recs] == [0, 1, 2, 3]
    assert recs[1].p_value < 0.05 and recs[2].p_value < 0.05 and recs[3].p_value > 0.05


def test_significance_never_stops_when_always_improving():
    table = [[0.1 * r + d for d in (0.0, 0.01, 0.03, 0.02)] for r in range(1, 6)]
    videos = _videos(9)
    exp = _exp(stop=StopRule(mode="significance"), videos=videos)
    exp.test_videos = videos[5:]
    recs = run_active_learning(exp, trainer=RecordingTrainer(exp.encoder), evaluator=scripted_evaluator(table))
    assert len(recs) == 5 and recs[0].p_value is None


def test_lrtd_requires_block():
    exp = _exp(train=TrainConfig(pretrain_epochs=1, finetune_epochs=1, use_nonlocal=False))
    with pytest.raises(ValueError, match="use_nonlocal"):
        run_active_learning(exp)


def test_round_artifacts(tmp_path):
    run_active_learning(_exp("lrtd"), out_dir=tmp_path)
    r1 = tmp_path / "rounds" / "round_1"
    assert sorted(p.name for p in r1.iterdir()) == ["checkpoint.bin", "metrics.json", "scores.tsv", "selected.tsv"]
    scores = (r1 / "scores.tsv").read_text().splitlines()
    selected = (r1 / "selected.tsv").read_text().splitlines()
    assert sum(line.endswith("\t1") for line in scores[1:]) == len(selected) - 1
    NLRCNet.load(r1 / "checkpoint.bin")

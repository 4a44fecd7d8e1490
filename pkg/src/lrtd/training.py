"""Two-stage training of NL-RCNet.

Stage 1 trains the encoder and classifier with the non-local block bypassed
(SGD with momentum).  Stage 2 attaches a freshly initialised non-local block
(zero ``W_z``) and trains everything end to end with Adam; a model without
the block is fine-tuned the same way.  Both stages use a
step schedule: the learning rate is divided by ``lr_decay`` every
``lr_period`` epochs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .backbone import EncoderConfig, NLRCNet
from .numkernel import NumericError, Param, Tape, Tensor, cross_entropy

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss or gradient)."""


@dataclass
class TrainConfig:
    pretrain_epochs: int = 6
    pretrain_lr: float = 0.1
    frontend_lr_scale: float = 1.0
    momentum: float = 0.9
    finetune_epochs: int = 6
    finetune_lr: float = 2e-3
    nonlocal_lr_scale: float = 10.0
    lr_decay: float = 10.0
    lr_period: int = 3
    batch_size: int = 32
    max_epochs: int = 25
    pretrain_optimizer: str = "sgd"
    finetune_optimizer: str = "adam"
    warm_start: bool = False
    use_nonlocal: bool = True

    def validate(self) -> None:
        if self.pretrain_epochs < 1 or self.finetune_epochs < 1:
            raise ValueError("train epochs must be >= 1")
        if self.pretrain_epochs > self.max_epochs or self.finetune_epochs > self.max_epochs:
            raise ValueError(f"epochs per stage are capped at max_epochs={self.max_epochs}")
        if min(self.pretrain_lr, self.finetune_lr, self.frontend_lr_scale, self.nonlocal_lr_scale) <= 0:
            raise ValueError("learning rates must be > 0")
        if self.lr_decay <= 0 or self.lr_period < 1:
            raise ValueError("lr_decay must be > 0 and lr_period >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        for opt in (self.pretrain_optimizer, self.finetune_optimizer):
            if opt not in ("sgd", "adam"):
                raise ValueError(f"unknown optimizer {opt!r}")

    @classmethod
    def full_scale_schedule(cls) -> "TrainConfig":
        """The full-scale recipe: 5e-4 / 5e-5 base rates, /10 every 3 epochs, 25 epochs."""
        return cls(
            pretrain_epochs=25,
            pretrain_lr=5e-4,
            frontend_lr_scale=0.1,
            finetune_epochs=25,
            finetune_lr=5e-5,
            nonlocal_lr_scale=10.0,
            lr_decay=10.0,
            lr_period=3,
        )


def lr_at(base: float, epoch: int, decay: float, period: int) -> float:
    """Step schedule, ``epoch`` counted from 0."""
    return base / decay ** (epoch // period)


class SGD:
    def __init__(self, params: list[Param], lrs: list[float], momentum: float = 0.0):
        self.params, self.base = params, lrs
        self.momentum = momentum
        self.scale = 1.0
        self.velocity = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        for p, lr, v in zip(self.params, self.base, self.velocity):
            v *= self.momentum
            v -= lr * self.scale * p.grad
            p.value += v


class Adam:
    def __init__(self, params: list[Param], lrs: list[float], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.base = params, lrs
        self.b1, self.b2 = betas
        self.eps = eps
        self.scale = 1.0
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, lr, m, v in zip(self.params, self.base, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.value -= lr * self.scale * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _make_optimizer(kind: str, params: list[Param], lrs: list[float], cfg: TrainConfig):
    if kind == "sgd":
        return SGD(params, lrs, cfg.momentum)
    return Adam(params, lrs)


@dataclass
class TrainHistory:
    stage: list[str] = field(default_factory=list)
    epoch: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


def _run_stage(
    model: NLRCNet,
    stage: str,
    features: np.ndarray,
    labels: np.ndarray,
    names: list[str],
    optimizer,
    epochs: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
    nonlocal_on: bool,
    history: TrainHistory,
) -> None:
    params = [model.params[n] for n in names]
    n = len(labels)
    step = 0
    for epoch in range(epochs):
        optimizer.scale = lr_at(1.0, epoch, cfg.lr_decay, cfg.lr_period)
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            for p in params:
                p.zero_grad()
            try:
                with Tape() as tape:
                    logits = model.logits(Tensor(features[idx]), nonlocal_on)
                    loss = cross_entropy(logits, labels[idx])
                tape.backward(loss)
            except NumericError as exc:
                raise TrainingError(f"{stage} epoch {epoch} step {step}: {exc}") from exc
            value = loss.item()
            if not np.isfinite(value) or not all(np.isfinite(p.grad).all() for p in params):
                raise TrainingError(f"{stage} epoch {epoch} step {step}: loss diverged ({value})")
            optimizer.step()
            if not all(np.isfinite(p.value).all() for p in params):
                raise TrainingError(f"{stage} epoch {epoch} step {step}: parameters overflowed")
            total += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
            step += 1
        history.stage.append(stage)
        history.epoch.append(epoch)
        history.lr.append(optimizer.scale)
        history.loss.append(total / n)
        history.accuracy.append(correct / n)
        log.debug("%s epoch %d loss %.4f acc %.3f", stage, epoch, total / n, correct / n)


def train_model(
    features: np.ndarray,
    labels: np.ndarray,
    encoder: EncoderConfig,
    cfg: TrainConfig,
    seed: int,
    use_nonlocal: bool = True,
    init: NLRCNet | None = None,
) -> tuple[NLRCNet, TrainHistory]:
    """Train from scratch (or from ``init`` when warm-starting); deterministic given ``seed``."""
    cfg.validate()
    encoder.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot train on an empty labeled set")
    if features.shape[1:] != (encoder.D, encoder.T):
        raise ValueError(f"features {features.shape[1:]} do not match D={encoder.D}, T={encoder.T}")
    rng = np.random.default_rng([seed, 101])
    history = TrainHistory()

    if init is not None:
        model = NLRCNet(encoder, {k: Param(k, p.value) for k, p in init.params.items()}, init.use_nonlocal)
    else:
        model = NLRCNet.initialize(encoder, seed, use_nonlocal=False)

    names = [n for n in model.param_names() if not n.startswith("nl.")]
    lrs = [cfg.pretrain_lr * (cfg.frontend_lr_scale if n.startswith("proj.") else 1.0) for n in names]
    opt = _make_optimizer(cfg.pretrain_optimizer, model.param_list(names), lrs, cfg)
    _run_stage(model, "pretrain", features, labels, names, opt, cfg.pretrain_epochs, cfg, rng, False, history)

    # without the block, stage 2 still fine-tunes the CNN-LSTM so every
    # architecture gets the same epoch budget
    if use_nonlocal and not model.use_nonlocal:
        model.attach_nonlocal(seed)
    names = model.param_names()
    lrs = [cfg.finetune_lr * (cfg.nonlocal_lr_scale if n.startswith("nl.") else 1.0) for n in names]
    opt = _make_optimizer(cfg.finetune_optimizer, model.param_list(names), lrs, cfg)
    _run_stage(
        model, "finetune", features, labels, names, opt, cfg.finetune_epochs, cfg, rng, model.use_nonlocal, history
    )
    return model, history

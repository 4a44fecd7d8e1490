"""Recurrent clip encoder (per-frame projection + LSTM), the classifier head,
and the NL-RCNet model that composes them with the non-local block.

Shapes: clip features are ``B x D x T``; hidden sequences ``B x H x T``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .nonlocal_block import NONLOCAL_PARAMS, init_nonlocal, nonlocal_forward
from .numkernel import DimensionError, Param, Tensor

CKPT_MAGIC = b"LRTDCKPT"
CKPT_VERSION = 1


@dataclass
class EncoderConfig:
    D: int = 16
    H: int = 32
    T: int = 10
    P: int = 7
    dropout: float = 0.1

    def validate(self) -> None:
        for name in ("D", "H", "T", "P"):
            if getattr(self, name) < 1:
                raise ValueError(f"encoder.{name} must be positive")
        if self.H % 2:
            raise ValueError("encoder.H must be even")
        if self.T < 2:
            raise ValueError("encoder.T must be >= 2 for the non-local block")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("encoder.dropout must lie in [0, 1)")


BACKBONE_PARAMS = ("proj.W", "proj.b", "lstm.Wx", "lstm.Wh", "lstm.b", "fc.W", "fc.b")


def init_backbone(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Param]:
    D, H, P = cfg.D, cfg.H, cfg.P

    def uniform(fan_in, fan_out, shape):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)

    lstm_b = np.zeros(4 * H)
    lstm_b[H:2 * H] = 1.0  # forget-gate bias
    return {
        "proj.W": Param("proj.W", uniform(D, H, (H, D))),
        "proj.b": Param("proj.b", np.zeros(H)),
        "lstm.Wx": Param("lstm.Wx", uniform(H, 4 * H, (4 * H, H))),
        "lstm.Wh": Param("lstm.Wh", uniform(H, 4 * H, (4 * H, H))),
        "lstm.b": Param("lstm.b", lstm_b),
        "fc.W": Param("fc.W", uniform(H, P, (H, P))),
        "fc.b": Param("fc.b", np.zeros(P)),
    }


def encode(x: Tensor, params) -> Tensor:
    """Project frames (affine + tanh) and run an LSTM from zero state.

    Gate layout in ``lstm.Wx``/``lstm.Wh``/``lstm.b`` rows: input, forget,
    cell candidate, output.
    """
    W = params["proj.W"]
    if x.data.ndim != 3 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"encode expects B x {W.shape[1]} x T features, got {x.shape}")
    H = W.shape[0]
    B, _, T = x.shape
    u = nk.tanh(nk.add_bias(nk.matmul(W.tensor(), x), params["proj.b"].tensor(), axis=1))
    pre = nk.add_bias(nk.matmul(params["lstm.Wx"].tensor(), u), params["lstm.b"].tensor(), axis=1)
    Wh_t = nk.transpose(params["lstm.Wh"].tensor())  # H x 4H
    h = c = None
    outs = []
    for t in range(T):
        gates = nk.take(pre, 2, t)  # B x 4H
        if h is not None:
            gates = nk.add(gates, nk.matmul(h, Wh_t))
        i = nk.sigmoid(nk.slice_axis(gates, 1, 0, H))
        f = nk.sigmoid(nk.slice_axis(gates, 1, H, 2 * H))
        g = nk.tanh(nk.slice_axis(gates, 1, 2 * H, 3 * H))
        o = nk.sigmoid(nk.slice_axis(gates, 1, 3 * H, 4 * H))
        c = nk.mul(i, g) if c is None else nk.add(nk.mul(f, c), nk.mul(i, g))
        h = nk.mul(o, nk.tanh(c))
        outs.append(h)
    return nk.stack(outs, axis=2)


def classify(z: Tensor, params) -> Tensor:
    """Global temporal max-pool then affine map to phase logits (``B x P``)."""
    W = params["fc.W"]
    if z.data.ndim != 3 or z.shape[1] != W.shape[0]:
        raise DimensionError(f"classify expects B x {W.shape[0]} x T, got {z.shape}")
    B, H, T = z.shape
    pooled = nk.reshape(nk.maxpool_time(z, T, 1), (B, H))
    return nk.add_bias(nk.matmul(pooled, W.tensor()), params["fc.b"].tensor())


def _softmax_np(a: np.ndarray) -> np.ndarray:
    return nk._softmax(a)


def entropy_nats(p: np.ndarray) -> np.ndarray:
    """Shannon entropy along the last axis, with 0 log 0 = 0."""
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


class NLRCNet:
    """Encoder + optional non-local block + classifier over one parameter dict."""

    def __init__(self, config: EncoderConfig, params: dict[str, Param], use_nonlocal: bool = True):
        self.config = config
        self.params = params
        self.use_nonlocal = use_nonlocal

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int, use_nonlocal: bool = True) -> "NLRCNet":
        config.validate()
        rng = np.random.default_rng([seed, 17])
        params = init_backbone(config, rng)
        if use_nonlocal:
            params.update(init_nonlocal(config.H, np.random.default_rng([seed, 29])))
        return cls(config, params, use_nonlocal)

    def attach_nonlocal(self, seed: int) -> None:
        self.params.update(init_nonlocal(self.config.H, np.random.default_rng([seed, 29])))
        self.use_nonlocal = True

    def param_list(self, names: Sequence[str] | None = None) -> list[Param]:
        names = self.param_names() if names is None else names
        return [self.params[n] for n in names]

    def param_names(self) -> list[str]:
        names = list(BACKBONE_PARAMS)
        if self.use_nonlocal:
            names += NONLOCAL_PARAMS
        return names

    # -- tape-level forward

    def hidden(self, x: Tensor, nonlocal_on: bool | None = None) -> Tensor:
        on = self.use_nonlocal if nonlocal_on is None else nonlocal_on
        c = encode(x, self.params)
        return nonlocal_forward(c, self.params) if on else c

    def logits(self, x: Tensor, nonlocal_on: bool | None = None) -> Tensor:
        return classify(self.hidden(x, nonlocal_on), self.params)

    def loss(self, features: np.ndarray, labels: np.ndarray, nonlocal_on: bool | None = None) -> Tensor:
        return nk.cross_entropy(self.logits(Tensor(features), nonlocal_on), labels)

    # -- inference (no tape)

    def lstm_states(self, features: np.ndarray, batch: int = 512) -> np.ndarray:
        return self._batched(features, batch, lambda x: encode(Tensor(x), self.params).data)

    def hidden_states(self, features: np.ndarray, batch: int = 512) -> np.ndarray:
        return self._batched(features, batch, lambda x: self.hidden(Tensor(x)).data)

    def predict_logits(self, features: np.ndarray, batch: int = 512) -> np.ndarray:
        return self._batched(features, batch, lambda x: self.logits(Tensor(x)).data)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.predict_logits(features).argmax(axis=1)

    @staticmethod
    def _batched(features: np.ndarray, batch: int, fn) -> np.ndarray:
        outs = [fn(features[i:i + batch]) for i in range(0, len(features), batch)]
        return np.concatenate(outs, axis=0)

    def frame_logits(self, z: np.ndarray) -> np.ndarray:
        """Per-frame logits ``B x T x P`` from causal (prefix) max-pooling of ``z``.

        The last frame's logits equal the clip logits.
        """
        prefix = np.maximum.accumulate(z, axis=2)
        return np.einsum("bht,hp->btp", prefix, self.params["fc.W"].value) + self.params["fc.b"].value

    def frame_entropies(
        self,
        features: np.ndarray,
        mc_passes: int,
        rate: float,
        rngs: Sequence[np.random.Generator] | None = None,
    ) -> np.ndarray:
        """Entropy of the MC-dropout mean prediction for each frame, ``B x T``.

        Dropout (inverted scaling) is applied to the hidden sequence; ``rngs``
        holds one generator per clip so results do not depend on batching.
        """
        if mc_passes < 1:
            raise ValueError("mc_passes must be >= 1")
        z = self.hidden_states(features)
        B, H, T = z.shape
        mean = np.zeros((B, T, self.config.P))
        for _ in range(mc_passes):
            if rate > 0.0:
                if rngs is None or len(rngs) != B:
                    raise ValueError("one generator per clip is required when rate > 0")
                keep = np.stack([r.random((H, T)) >= rate for r in rngs])
                zk = z * keep / (1.0 - rate)
            else:
                zk = z
            mean += _softmax_np(self.frame_logits(zk))
        mean /= mc_passes
        return entropy_nats(mean)

    def predictive_entropy(
        self, features: np.ndarray, mc_passes: int = 1, rate: float = 0.0, seed: int = 0
    ) -> float:
        """MC-dropout predictive entropy (nats) of one ``D x T`` clip's label."""
        rngs = [np.random.default_rng(seed)]
        return float(self.frame_entropies(features[None], mc_passes, rate, rngs)[0, -1])

    # -- checkpoints

    def save(self, path: str | Path) -> None:
        names = self.param_names()
        header = {
            "config": asdict(self.config),
            "use_nonlocal": self.use_nonlocal,
            "params": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob]
        parts += [np.ascontiguousarray(self.params[n].value, dtype="<f8").tobytes() for n in names]
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path: str | Path) -> "NLRCNet":
        raw = Path(path).read_bytes()
        if raw[:8] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", raw[8:16])
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        pos = 16 + hlen
        params = {}
        for spec in header["params"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) * 8
            if pos + n > len(raw):
                raise ValueError(f"{path}: truncated payload for {spec['name']}")
            params[spec["name"]] = Param(spec["name"], np.frombuffer(raw[pos:pos + n], "<f8").reshape(shape))
            pos += n
        if pos != len(raw):
            raise ValueError(f"{path}: trailing bytes after payload")
        return cls(EncoderConfig(**header["config"]), params, header["use_nonlocal"])

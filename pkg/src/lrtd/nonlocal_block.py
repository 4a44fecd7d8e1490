"""Temporal non-local block with embedded-Gaussian affinities.

Input ``x`` is a batch of hidden sequences, ``B x H x T``.  The block embeds
each step with ``theta``, ``phi`` and ``g`` (width ``H/2``), subsamples the
``phi`` and ``g`` paths with a max-pool of window 2 / stride 2 along time, and
computes

    A = softmax_rows(theta(x)^T phi_hat)          # B x T x T'
    y = g_hat A^T                                 # B x H/2 x T
    z = W_z y + x

The dependency matrix used for clip scoring is ``exp(theta(x)^T phi_hat)``
(raw) or its row-normalised version.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .numkernel import DimensionError, Param, Tensor

POOL_K = 2
POOL_S = 2
LOGIT_CLAMP = 60.0

NONLOCAL_PARAMS = ("nl.theta", "nl.phi", "nl.g", "nl.z")


def init_nonlocal(H: int, rng: np.random.Generator, embed: int | None = None) -> dict[str, Param]:
    """Random theta/phi/g, zero W_z (the block starts as the identity)."""
    e = embed or H // 2
    std = 1.0 / np.sqrt(H)
    return {
        "nl.theta": Param("nl.theta", rng.normal(0.0, std, size=(e, H))),
        "nl.phi": Param("nl.phi", rng.normal(0.0, std, size=(e, H))),
        "nl.g": Param("nl.g", rng.normal(0.0, std, size=(e, H))),
        "nl.z": Param("nl.z", np.zeros((H, e))),
    }


def _check_input(x: np.ndarray, params) -> None:
    H = params["nl.theta"].shape[1]
    if x.ndim != 3 or x.shape[1] != H:
        raise DimensionError(f"non-local block expects B x {H} x T input, got {x.shape}")
    if x.shape[2] < 2:
        raise DimensionError(f"non-local block needs T >= 2, got T={x.shape[2]}")


def affinity_logits(x: Tensor, params) -> Tensor:
    """``theta(x)^T phi_hat`` as a ``B x T x T'`` tensor."""
    _check_input(x.data, params)
    theta = nk.matmul(params["nl.theta"].tensor(), x)
    phi_hat = nk.maxpool_time(nk.matmul(params["nl.phi"].tensor(), x), POOL_K, POOL_S)
    return nk.matmul(nk.transpose(theta), phi_hat)


def nonlocal_forward(x: Tensor, params) -> Tensor:
    """Residual non-local block, differentiable on the active tape."""
    attn = nk.softmax_rows(affinity_logits(x, params))
    g_hat = nk.maxpool_time(nk.matmul(params["nl.g"].tensor(), x), POOL_K, POOL_S)
    y = nk.matmul(g_hat, nk.transpose(attn))
    return nk.add(nk.matmul(params["nl.z"].tensor(), y), x)


@dataclass
class DependencyMatrix:
    """Per-clip ``T x T'`` dependency values; ``clamped`` counts clipped logits."""

    values: np.ndarray
    mode: str
    clamped: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def dependency_matrices(x: np.ndarray, params, mode: str = "raw") -> tuple[np.ndarray, int]:
    """Batched dependency matrices for ``B x H x T`` hidden sequences.

    Returns ``(B x T x T' values, number of clamped logits)``.
    """
    if mode not in ("raw", "normalized"):
        raise ValueError(f"mode must be 'raw' or 'normalized', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    logits = affinity_logits(Tensor(x), params).data
    if mode == "normalized":
        return nk._softmax(logits), 0
    clamped = int(np.count_nonzero(np.abs(logits) > LOGIT_CLAMP))
    return np.exp(np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)), clamped


def dependency_matrix(x: np.ndarray, params, mode: str = "raw") -> DependencyMatrix:
    """Dependency matrix of one ``H x T`` hidden sequence."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected an H x T sequence, got {x.shape}")
    values, clamped = dependency_matrices(x[None], params, mode)
    return DependencyMatrix(values[0], mode, clamped)


def pair_count(T: int, subsampled: bool) -> int:
    """Number of pairwise affinities evaluated for a clip of length ``T``."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    return T * (nk.pooled_length(T, POOL_K, POOL_S) if subsampled else T)

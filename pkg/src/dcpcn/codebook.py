"""Vector-quantization codebooks.

A feature is replaced by its nearest code (plain l2, ties to the lowest
index). Codes learn through the usual VQ loss pair, and the encoder side
sees them through a straight-through estimator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, straight_through

__all__ = [
    "Codebook",
    "QuantizedSet",
    "UsageStats",
    "init_codebook",
    "nearest_indices",
    "quantize",
    "straight_through",
    "vq_losses",
    "usage_histogram",
]


class Codebook:
    def __init__(self, vectors: np.ndarray, name: str = "codebook"):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2:
            raise ValueError(f"codebook vectors must be K x R, got {vectors.shape}")
        self.vectors = Tensor(vectors, requires_grad=True)
        self.name = name
        self.usage = np.zeros(vectors.shape[0], dtype=np.int64)

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def R(self) -> int:
        return self.vectors.shape[1]

    def reset_usage(self) -> None:
        self.usage[:] = 0

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}vectors", self.vectors

    def __repr__(self) -> str:
        return f"Codebook({self.name!r}, K={self.K}, R={self.R})"


@dataclass
class QuantizedSet:
    indices: np.ndarray
    codes: Tensor
    source_count: int

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class UsageStats:
    counts: np.ndarray
    dead_fraction: float


def init_codebook(K: int, R: int, seed: int, dtype=np.float64, name: str = "codebook") -> Codebook:
    if K < 1 or R < 1:
        raise ValueError(f"codebook needs K >= 1 and R >= 1, got K={K}, R={R}")
    rng = np.random.default_rng(seed)
    return Codebook(rng.uniform(-1.0 / K, 1.0 / K, size=(K, R)).astype(dtype), name=name)


def nearest_indices(features: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Index of the l2-nearest row of ``vectors`` for every row of ``features``."""
    diff = features[:, None, :] - vectors[None, :, :]
    return np.argmin((diff * diff).sum(axis=-1), axis=1)


def quantize(features, codebook: Codebook, track_usage: bool = True) -> QuantizedSet:
    """Assign every feature row to its nearest code.

    ``codes`` is gathered from the codebook tensor, so losses on it reach
    the code vectors.
    """
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    if data.ndim != 2 or data.shape[1] != codebook.R:
        raise ValueError(f"features {data.shape} do not match codebook dimension R={codebook.R}")
    idx = nearest_indices(data, codebook.vectors.data)
    ag.note_decision(idx)
    if track_usage:
        codebook.usage += np.bincount(idx, minlength=codebook.K)
    return QuantizedSet(idx, ag.take(codebook.vectors, idx), len(idx))


def vq_losses(features: Tensor, q: QuantizedSet) -> tuple[Tensor, Tensor]:
    """(codebook term, commitment term).

    The codebook term moves codes towards frozen features, the commitment
    term moves features towards frozen codes. Both are mean squared l2.
    """
    if len(q) == 0:
        raise ValueError("vq_losses on an empty quantized set")
    if features.shape != q.codes.shape:
        raise ValueError(f"feature/code counts differ: {features.shape} vs {q.codes.shape}")
    to_code = ag.stop_gradient(features) - q.codes
    to_feat = features - ag.stop_gradient(q.codes)
    codebook_term = ag.mean(ag.sum_over(to_code * to_code, axis=-1))
    commitment_term = ag.mean(ag.sum_over(to_feat * to_feat, axis=-1))
    return codebook_term, commitment_term


def usage_histogram(codebook: Codebook) -> UsageStats:
    counts = codebook.usage.copy()
    return UsageStats(counts, float(np.mean(counts == 0)))

"""Quantized information exchange between the two codebooks.

One stream takes the codes picked in a source codebook, drops repeats,
maps them into the target codebook's space with a small MLP, snaps each to
its nearest target code and blends the pair by their cosine similarity.
The stream's loss spreads the re-targeted vectors apart (internal term) and
pulls each onto its snapped code (external term).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .codebook import Codebook, QuantizedSet, nearest_indices
from .layers import Linear, Module


@dataclass
class DedupSet:
    indices: np.ndarray
    vectors: Tensor
    count: int

    @property
    def codes(self) -> Tensor:
        return self.vectors

    def __len__(self) -> int:
        return self.count


class RetargetParams(Module):
    """Cascading MLP R -> 2R -> 2R -> R with relu between layers."""

    def __init__(self, R: int, rng: np.random.Generator, dtype=np.float64):
        self.R = R
        self.fc1 = Linear(R, 2 * R, rng, dtype)
        self.fc2 = Linear(2 * R, 2 * R, rng, dtype)
        self.fc3 = Linear(2 * R, R, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc3(ag.relu(self.fc2(ag.relu(self.fc1(x)))))


def deduplicate(q: QuantizedSet | DedupSet) -> DedupSet:
    """Keep the first occurrence of every code index, preserving order."""
    if len(q.indices) == 0:
        raise ValueError("cannot deduplicate an empty set")
    _, first = np.unique(q.indices, return_index=True)
    keep = np.sort(first)
    return DedupSet(q.indices[keep], ag.take(q.codes, keep), len(keep))


def retarget(d: DedupSet | Tensor, params: RetargetParams) -> Tensor:
    vectors = d.vectors if isinstance(d, DedupSet) else d
    if vectors.shape[-1] != params.R:
        raise ValueError(f"vectors of width {vectors.shape[-1]} fed to a width-{params.R} re-targeter")
    return params(vectors)


def nearest_codes(z_r: Tensor, target: Codebook) -> tuple[np.ndarray, Tensor]:
    """Row-wise nearest target code; the gathered codes carry gradient to the codebook."""
    if z_r.shape[-1] != target.R:
        raise ValueError(f"width {z_r.shape[-1]} does not match codebook R={target.R}")
    idx = nearest_indices(z_r.data, target.vectors.data)
    ag.note_decision(idx)
    return idx, ag.take(target.vectors, idx)


def nearest_code(z_r: Tensor, target: Codebook) -> tuple[int, Tensor]:
    idx, rows = nearest_codes(ag.reshape(z_r, (1, -1)), target)
    return int(idx[0]), ag.reshape(rows, (target.R,))


def adaptive_factor(z_r: Tensor, z_s: Tensor) -> Tensor:
    """Cosine similarity along the last axis, defined as 0 when a norm vanishes."""
    dot = ag.sum_over(z_r * z_s, axis=-1)
    denom = ag.l2_norm(z_r) * ag.l2_norm(z_s)
    # dot is exactly 0 wherever denom is, so adding 1 there yields alpha = 0
    return dot / (denom + Tensor((denom.data == 0).astype(denom.dtype)))


def merge(z_r: Tensor, z_s: Tensor) -> Tensor:
    if z_r.shape != z_s.shape:
        raise ValueError(f"merge needs equal shapes, got {z_r.shape} and {z_s.shape}")
    alpha = adaptive_factor(z_r, z_s)
    alpha = ag.reshape(alpha, alpha.shape + (1,))
    return alpha * z_r + (1 - alpha) * z_s


def internal_loss(z_r: Tensor) -> Tensor:
    t = z_r.shape[0]
    if t < 1:
        raise ValueError("internal loss needs at least one vector")
    if t == 1:
        return Tensor(np.zeros((), dtype=z_r.dtype))
    i, j = np.nonzero(~np.eye(t, dtype=bool))
    d = ag.l2_norm(ag.take(z_r, i) - ag.take(z_r, j), axis=-1)
    return ag.sum_over(1 - d) / t


def external_loss(z_r: Tensor, z_s: Tensor) -> Tensor:
    if z_r.shape != z_s.shape:
        raise ValueError(f"external loss needs paired sets, got {z_r.shape} and {z_s.shape}")
    return ag.mean(ag.l2_norm(z_r - z_s, axis=-1))


@dataclass
class StreamResult:
    dedup: DedupSet
    retargeted: Tensor
    target_indices: np.ndarray
    selected: Tensor
    merged: Tensor
    internal: Tensor
    external: Tensor

    @property
    def loss(self) -> Tensor:
        return self.internal + self.external


def exchange(q: QuantizedSet, target: Codebook, params: RetargetParams) -> StreamResult:
    """One direction of the exchange: dedup, re-target, snap, merge."""
    dedup = deduplicate(q)
    z_r = retarget(dedup, params)
    idx, z_s = nearest_codes(z_r, target)
    return StreamResult(
        dedup=dedup,
        retargeted=z_r,
        target_indices=idx,
        selected=z_s,
        merged=merge(z_r, z_s),
        internal=internal_loss(z_r),
        external=external_loss(z_r, z_s),
    )


@dataclass
class QIEOutput:
    merged: Tensor
    loss: Tensor
    forward: StreamResult
    reverse: StreamResult | None


def qie_apply(
    enc_q: QuantizedSet,
    dec_codebook: Codebook,
    fwd_params: RetargetParams,
    dec_q: QuantizedSet | None = None,
    enc_codebook: Codebook | None = None,
    rev_params: RetargetParams | None = None,
    include_reverse: bool = True,
) -> QIEOutput:
    """Run the forward stream and, when its inputs are given, the reverse one.

    Only the forward stream's merged vectors are returned for decoding; the
    reverse stream contributes its loss when ``include_reverse`` is set.
    """
    fwd = exchange(enc_q, dec_codebook, fwd_params)
    loss = fwd.loss
    rev = None
    if dec_q is not None and enc_codebook is not None and rev_params is not None:
        rev = exchange(dec_q, enc_codebook, rev_params)
        if include_reverse:
            loss = loss + rev.loss
    return QIEOutput(fwd.merged, loss, fwd, rev)

"""Point-cloud sampling, grouping and evaluation metrics.

Everything here is plain numpy and deterministic; ties are always broken
towards the lowest index. :func:`chamfer_loss` is the one differentiable
entry point and is what the training objective uses.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

DEFAULT_FSCORE_TAU = 0.01


@dataclass
class PointCloud:
    points: np.ndarray
    label: str | int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"point cloud must be N x 3, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud has non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class RegionCenters:
    indices: np.ndarray
    coords: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an N x 3 array, got shape {pts.shape}")
    return pts


def _nonempty(*clouds: np.ndarray) -> None:
    for c in clouds:
        if len(c) == 0:
            raise ValueError("point cloud is empty")


def pairwise_sq_dists(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Exact squared distances by explicit differences (|P| x |Q|)."""
    diff = p[:, None, :] - q[None, :, :]
    return (diff * diff).sum(axis=-1)


def farthest_point_sample(cloud, m: int, start_index: int = 0) -> RegionCenters:
    pts = as_points(cloud)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"cannot pick {m} centers from {n} points")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range for {n} points")
    picked = np.empty(m, dtype=np.intp)
    picked[0] = start_index
    diff = pts - pts[start_index]
    min_d = (diff * diff).sum(axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d))
        picked[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(min_d, (diff * diff).sum(axis=1), out=min_d)
    return RegionCenters(picked, pts[picked].copy())


def group_regions(cloud, centers: RegionCenters | np.ndarray, k: int) -> np.ndarray:
    """Row ``m`` holds the ``k`` nearest points to center ``m``, nearest first."""
    pts = as_points(cloud)
    if k > len(pts) or k < 1:
        raise ValueError(f"cannot group k={k} neighbours from {len(pts)} points")
    coords = centers.coords if isinstance(centers, RegionCenters) else np.asarray(centers)
    d = pairwise_sq_dists(coords, pts)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def _nearest_dists(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = pairwise_sq_dists(p, q)
    return d.min(axis=1), d.min(axis=0)


def chamfer_l1(p, q) -> float:
    p, q = as_points(p), as_points(q)
    _nonempty(p, q)
    dpq, dqp = _nearest_dists(p, q)
    return float(np.sqrt(dpq).mean() + np.sqrt(dqp).mean())


def chamfer_l2(p, q) -> float:
    p, q = as_points(p), as_points(q)
    _nonempty(p, q)
    dpq, dqp = _nearest_dists(p, q)
    return float(dpq.mean() + dqp.mean())


def f_score(p, q, tau: float = DEFAULT_FSCORE_TAU) -> float:
    if tau <= 0:
        raise ValueError("tau must be positive")
    p, q = as_points(p), as_points(q)
    _nonempty(p, q)
    dpq, dqp = _nearest_dists(p, q)
    precision = float(np.mean(np.sqrt(dpq) <= tau))
    recall = float(np.mean(np.sqrt(dqp) <= tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def mmd(completions: Sequence, references: Sequence) -> float:
    """Mean over completions of the smallest CD-l2 to any reference."""
    if len(completions) == 0 or len(references) == 0:
        raise ValueError("mmd needs non-empty completion and reference lists")
    refs = [as_points(r) for r in references]
    best = [min(chamfer_l2(c, r) for r in refs) for c in completions]
    return float(np.mean(best))


def nearest_neighbor_indices(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched nearest neighbours (B,N,3) vs (B,M,3) for use in losses.

    Uses the expanded-norm form for speed; exact ties are irrelevant here
    because the loss recomputes distances through the gathered points.
    """
    xx = (x * x).sum(-1)[:, :, None]
    yy = (y * y).sum(-1)[:, None, :]
    d = xx + yy - 2 * np.matmul(x, np.swapaxes(y, 1, 2))
    return d.argmin(axis=2), d.argmin(axis=1)


def chamfer_loss(pred: Tensor, gt: np.ndarray, squared: bool = False) -> Tensor:
    """Differentiable batch-mean Chamfer distance between (B,N,3) and (B,M,3)."""
    gt = np.asarray(gt, dtype=pred.dtype)
    b, n, _ = pred.shape
    m = gt.shape[1]
    nn_pred, nn_gt = nearest_neighbor_indices(pred.data, gt)
    ag.note_decision(nn_pred)
    ag.note_decision(nn_gt)
    offsets_gt = (np.arange(b)[:, None] * m + nn_pred).reshape(-1)
    offsets_pred = (np.arange(b)[:, None] * n + nn_gt).reshape(-1)
    flat_pred = ag.reshape(pred, (b * n, 3))
    to_gt = flat_pred - Tensor(gt.reshape(b * m, 3)[offsets_gt])
    to_pred = Tensor(gt.reshape(b * m, 3)) - ag.take(flat_pred, offsets_pred)
    if squared:
        term_a = ag.sum_over(to_gt * to_gt, axis=-1)
        term_b = ag.sum_over(to_pred * to_pred, axis=-1)
    else:
        term_a = ag.l2_norm(to_gt, axis=-1)
        term_b = ag.l2_norm(to_pred, axis=-1)
    return ag.mean(term_a) + ag.mean(term_b)

"""Codebook statistics, sampling-consistency measurement, single-file
completion and the model-level gradient check."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .codebook import nearest_indices, usage_histogram
from .data import (
    SHAPE_KINDS,
    ShapeSpec,
    gen_shape,
    make_sample,
    normalization,
    normalize,
    random_unit_vector,
    read_xyz,
    resample_surface,
    make_partial,
    write_xyz,
)
from .errors import ConfigError, DataError
from .geometry import farthest_point_sample
from .model import DCPCN, ModelConfig, total_loss

HIST_BINS = 32


# ------------------------------------------------------------- codebook stats


@dataclass
class CodebookStats:
    histograms: dict[str, np.ndarray]  # name -> (dims, bins) counts
    edges: np.ndarray  # (dims, bins + 1)
    dims: list[int]
    tv_distance: dict[int, float] | None
    usage: dict[str, dict]

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["codebook", "dim", "bin", "lo", "hi", "count"])
        for name, hist in self.histograms.items():
            for d_i, dim in enumerate(self.dims):
                for b in range(HIST_BINS):
                    lo, hi = self.edges[d_i, b], self.edges[d_i, b + 1]
                    writer.writerow([name, dim, b, repr(float(lo)), repr(float(hi)), int(hist[d_i, b])])
        return buf.getvalue()


def codebook_stats(model: DCPCN, dims: Sequence[int] | None = None) -> CodebookStats:
    """Per-dimension value histograms over the joint observed range of the active codebooks."""
    books = model.codebooks()
    if not books:
        raise ConfigError("this checkpoint has no active codebook (ablation row A); nothing to report")
    R = books[0].R
    dims = list(range(min(5, R))) if dims is None else [int(d) for d in dims]
    if any(not 0 <= d < R for d in dims):
        raise ConfigError(f"dimensions {dims} out of range for R={R}")
    stacked = np.stack([cb.vectors.data[:, dims].astype(np.float64) for cb in books])  # (books, K, dims)
    lo, hi = stacked.min(axis=(0, 1)), stacked.max(axis=(0, 1))
    hi = np.where(hi > lo, hi, lo + 1e-12)
    edges = np.stack([np.linspace(lo[i], hi[i], HIST_BINS + 1) for i in range(len(dims))])
    hists = {}
    for cb, values in zip(books, stacked):
        hists[cb.name] = np.stack(
            [np.histogram(values[:, i], bins=edges[i])[0] for i in range(len(dims))]
        )
    tv = None
    if len(books) == 2:
        a, b = (hists[cb.name] / cb.K for cb in books)
        tv = {dim: float(0.5 * np.abs(a[i] - b[i]).sum()) for i, dim in enumerate(dims)}
    usage = {}
    for cb in books:
        u = usage_histogram(cb)
        usage[cb.name] = {"used": int((u.counts > 0).sum()), "dead_fraction": u.dead_fraction}
    return CodebookStats(hists, edges, dims, tv, usage)


def write_codebook_stats(stats: CodebookStats, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "codebook_hist.csv", "svg": out / "codebook_hist.svg", "json": out / "codebook_stats.json"}
    paths["csv"].write_text(stats.csv_text(), encoding="utf-8")
    summary = {
        "dims": stats.dims,
        "bins": HIST_BINS,
        "codebooks": list(stats.histograms),
        "usage": stats.usage,
        "tv_distance": None if stats.tv_distance is None else {str(k): v for k, v in stats.tv_distance.items()},
        "mean_tv_distance": None if stats.tv_distance is None else float(np.mean(list(stats.tv_distance.values()))),
    }
    paths["json"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_svg(stats, paths["svg"])
    return paths


def _write_svg(stats: CodebookStats, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "codebook-stats"
    fig, axes = plt.subplots(1, len(stats.dims), figsize=(3 * len(stats.dims), 2.6), squeeze=False)
    for i, dim in enumerate(stats.dims):
        ax = axes[0, i]
        centers = 0.5 * (stats.edges[i, :-1] + stats.edges[i, 1:])
        for name, hist in stats.histograms.items():
            ax.step(centers, hist[i], where="mid", label=name)
        ax.set_title(f"dim {dim}")
        ax.tick_params(labelsize=6)
    axes[0, 0].legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ----------------------------------------------------- sampling consistency


@dataclass
class AgreementResult:
    per_shape: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_shape))


def encoder_codes(model: DCPCN, partial: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Region centers and encoder-codebook indices for one partial cloud."""
    if model.encoder_codebook is None:
        raise ConfigError("model has no encoder codebook")
    centers, shallow = model.extract_shallow(partial)
    idx = nearest_indices(shallow.data[0], model.encoder_codebook.vectors.data)
    return centers[0], idx


def code_agreement(
    model: DCPCN,
    n_shapes: int = 20,
    seed: int = 1234,
    n_gt: int = 2048,
    n_partial: int = 512,
    keep_ratio: float = 0.5,
) -> AgreementResult:
    """Fraction of regions whose encoder code survives an independent resampling.

    Each shape is sampled twice with different seeds and cropped from the same
    view; regions of the first sample are matched to the nearest region
    center of the second.
    """
    rng = np.random.default_rng(seed)
    rates = []
    for s in range(n_shapes):
        kind = SHAPE_KINDS[s % len(SHAPE_KINDS)]
        spec = ShapeSpec(kind, n_gt, int(rng.integers(0, 2**31 - 1)))
        view = random_unit_vector(rng)
        partials = []
        for cloud in (gen_shape(spec), resample_surface(spec, int(rng.integers(0, 2**31 - 1)))):
            cropped = make_partial(normalize(cloud), view, keep_ratio)
            partials.append(farthest_point_sample(cropped, n_partial, 0).coords)
        (ca, ia), (cb, ib) = (encoder_codes(model, p) for p in partials)
        d = ((ca[:, None, :] - cb[None, :, :]) ** 2).sum(-1)
        match = d.argmin(axis=1)
        rates.append(float(np.mean(ia == ib[match])))
    return AgreementResult(rates)


# -------------------------------------------------------------- completion


def complete_one(model: DCPCN, in_path, out_path) -> str:
    """Complete one XYZ file; the output is mapped back to the input's frame."""
    cloud = read_xyz(in_path)
    need = max(model.config.M, model.config.k)
    if len(cloud) < need:
        raise ValueError(f"{in_path}: {len(cloud)} points, need at least max(M, k) = {need}")
    centroid, scale = normalization(cloud)
    normed = normalize(cloud)
    out = model.forward(normed.points, track_usage=False)
    completed = out.complete.data[0].astype(np.float64) * scale + centroid
    try:
        write_xyz(completed, out_path)
    except OSError as exc:
        raise DataError(f"cannot write {out_path}: {exc.strerror or exc}") from exc
    return f"{in_path}: {len(cloud)} points -> {out_path}: {len(completed)} points"


# --------------------------------------------------------------- gradcheck


@dataclass
class GradcheckReport:
    result: ag.GradCheckResult
    seconds: float
    n_params: int
    n_tensors: int
    exchange_sizes: tuple[int, int] | None
    floor: float

    def summary(self) -> str:
        worst = self.result.worst
        return (
            f"max relative error {self.result.max_rel_error:.3e} at {worst[0]}[{worst[1]}]; "
            f"{self.result.checked} entries checked over {self.n_tensors} tensors "
            f"({self.n_params} parameters), {len(self.result.skipped)} skipped at kinks; "
            f"gradient floor {self.floor:.2e}; {self.seconds:.1f}s"
        )


def gradcheck_sample(config: ModelConfig, seed: int = 0, n_gt: int = 256) -> tuple[np.ndarray, np.ndarray]:
    n_partial = max(config.M, config.k) * 4
    rng = np.random.default_rng(seed)
    partial, gt = make_sample("cube", seed, rng, max(n_gt, 2 * n_partial), n_partial, 0.5)
    return partial.points, farthest_point_sample(gt, n_gt, 0).coords


def resolution_floor(loss_value: float, eps: float, tol: float, dtype=np.float64) -> float:
    """Smallest gradient magnitude whose central difference resolves relative error ``tol``.

    One rounding step in a loss of size ``|L|`` shifts a central difference by
    about ``u*|L|/eps``; below ``u*|L|/(eps*tol)`` that noise alone exceeds ``tol``.
    """
    return max(1e-6, float(np.finfo(dtype).eps) * abs(loss_value) / (eps * tol))


def run_gradcheck(
    config: ModelConfig,
    eps: float = 1e-5,
    per_tensor: int = 12,
    seed: int = 0,
    full: bool = False,
    tol: float = 1e-4,
) -> GradcheckReport:
    """Central differences against the taped gradient of the total loss at 64-bit.

    Every parameter tensor is checked; unless ``full`` is set, each contributes
    its largest-gradient entry plus ``per_tensor - 1`` seeded random entries.
    Gradients below :func:`resolution_floor` are compared against the floor.
    """
    cfg = config.replace(dtype="float64").validate()
    model = DCPCN(cfg)
    partial, gt = gradcheck_sample(cfg, seed)
    params = dict(model.named_parameters())

    def loss() -> ag.Tensor:
        return total_loss(model.forward(partial, track_usage=False), gt, cfg)

    start = time.perf_counter()
    model.zero_grad()
    with ag.GradientTape() as tape:
        out = model.forward(partial, track_usage=False)
        value = total_loss(out, gt, cfg)
    ag.backward(tape, value)
    sizes = None
    if cfg.use_qie:
        sizes = (len(np.unique(out.encoder_indices)), len(np.unique(out.decoder_indices)))
    entries = None
    if not full:
        rng = np.random.default_rng(seed)
        entries = {}
        for name, p in params.items():
            g = np.zeros(p.size) if p.grad is None else np.abs(p.grad.reshape(-1))
            picks = [int(np.argmax(g))]
            others = np.setdiff1d(np.arange(p.size), picks)
            take_n = min(per_tensor - 1, len(others))
            picks += [int(i) for i in rng.choice(others, size=take_n, replace=False)]
            entries[name] = picks
    floor = resolution_floor(float(value.data), eps, tol)
    result = ag.finite_diff_check(loss, params, eps=eps, entries=entries, floor=floor)
    n_params = sum(p.size for p in params.values())
    return GradcheckReport(result, time.perf_counter() - start, n_params, len(params), sizes, floor)

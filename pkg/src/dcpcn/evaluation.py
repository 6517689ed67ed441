"""Held-out metrics, reports and the A-F ablation runner."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .codebook import usage_histogram
from .data import Dataset
from .errors import DataError
from .geometry import DEFAULT_FSCORE_TAU, chamfer_l1, chamfer_l2, f_score, mmd
from .model import ABLATIONS, DCPCN, ModelConfig, ablation_config

METRICS = ("cd_l1", "cd_l2", "fscore")
CD_SCALE = 1e3

# published full-scale ablation rows: CD-l1 x1e3, CD-l2 x1e3, F-score@1%
REFERENCE_ABLATION = {
    "A": (6.53, 0.194, 0.845),
    "B": (6.48, 0.193, 0.850),
    "C": (6.52, 0.194, 0.843),
    "D": (6.47, 0.192, 0.848),
    "E": (6.46, 0.192, 0.850),
    "F": (6.685, 0.200, 0.837),
}

Predictor = Callable[[np.ndarray], np.ndarray]


def model_predictor(model: DCPCN, batch_size: int = 16, track_usage: bool = False) -> Predictor:
    """Wrap a model as ``partials (B,N,3) -> completions (B,N',3)``."""

    def predict(partial: np.ndarray) -> np.ndarray:
        chunks = []
        for start in range(0, len(partial), batch_size):
            out = model.forward(partial[start : start + batch_size], track_usage=track_usage)
            chunks.append(out.complete.data.astype(np.float64))
        return np.concatenate(chunks)

    return predict


@dataclass
class MetricsReport:
    per_category: dict[str, dict[str, float]]
    mean: dict[str, float]
    count: int
    config_fingerprint: str
    dataset_hash: str
    mmd: float | None = None
    codebook_usage: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config_fingerprint": self.config_fingerprint,
            "dataset_hash": self.dataset_hash,
            "count": self.count,
            "scale": {"cd_l1": CD_SCALE, "cd_l2": CD_SCALE, "fscore": 1.0},
            "per_category": self.per_category,
            "mean": self.mean,
            "mmd": self.mmd,
            "codebook_usage": self.codebook_usage,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [
            f"config {self.config_fingerprint}  data {self.dataset_hash}  clouds {self.count}",
            f"{'category':<12}{'CD-l1 x1e3':>12}{'CD-l2 x1e3':>12}{'F@1%':>8}",
        ]
        for cat, row in self.per_category.items():
            lines.append(f"{cat:<12}{row['cd_l1']:>12.4f}{row['cd_l2']:>12.4f}{row['fscore']:>8.4f}")
        m = self.mean
        lines.append(f"{'mean':<12}{m['cd_l1']:>12.4f}{m['cd_l2']:>12.4f}{m['fscore']:>8.4f}")
        if self.mmd is not None:
            lines.append(f"MMD (CD-l2 x1e3): {self.mmd:.4f}")
        for name, usage in self.codebook_usage.items():
            lines.append(f"codebook {name}: {usage['used']} codes used, dead fraction {usage['dead_fraction']:.3f}")
        return "\n".join(lines) + "\n"


def per_cloud_metrics(pred: np.ndarray, gt: np.ndarray, tau: float = DEFAULT_FSCORE_TAU) -> dict[str, float]:
    return {
        "cd_l1": chamfer_l1(pred, gt) * CD_SCALE,
        "cd_l2": chamfer_l2(pred, gt) * CD_SCALE,
        "fscore": f_score(pred, gt, tau),
    }


def summarize(
    preds: Sequence[np.ndarray],
    dataset: Dataset,
    config_fingerprint: str,
    tau: float = DEFAULT_FSCORE_TAU,
) -> MetricsReport:
    rows = [per_cloud_metrics(p, g, tau) for p, g in zip(preds, dataset.gt)]
    per_category: dict[str, dict[str, float]] = {}
    for cat in dict.fromkeys(dataset.categories):
        members = [r for r, c in zip(rows, dataset.categories) if c == cat]
        per_category[cat] = {k: float(np.mean([r[k] for r in members])) for k in METRICS}
    mean = {k: float(np.mean([row[k] for row in per_category.values()])) for k in METRICS}
    return MetricsReport(per_category, mean, len(rows), config_fingerprint, dataset.digest())


def evaluate(
    model: DCPCN,
    dataset: Dataset,
    references: Sequence[np.ndarray] | None = None,
    predictor: Predictor | None = None,
    tau: float = DEFAULT_FSCORE_TAU,
) -> MetricsReport:
    """Metrics over ``dataset``; ``predictor`` defaults to the model itself.

    Codebook usage is counted afresh over this pass.
    """
    need = max(model.config.M, model.config.k)
    if dataset.partial.shape[1] < need:
        raise DataError(
            f"partial clouds have {dataset.partial.shape[1]} points but the model needs at least {need} "
            f"(M={model.config.M}, k={model.config.k})"
        )
    for cb in model.codebooks():
        cb.reset_usage()
    preds = (predictor or model_predictor(model, track_usage=True))(dataset.partial)
    report = summarize(list(preds), dataset, model.config.fingerprint(), tau)
    if references is not None:
        report.mmd = mmd(list(preds), list(references)) * CD_SCALE
    for cb in model.codebooks():
        stats = usage_histogram(cb)
        report.codebook_usage[cb.name] = {
            "used": int((stats.counts > 0).sum()),
            "dead_fraction": stats.dead_fraction,
            "counts": stats.counts.tolist(),
        }
    return report


@dataclass
class AblationRow:
    row: str
    config: ModelConfig
    report: MetricsReport
    history: list[dict]
    codebook_sites: dict[str, str | None]

    @property
    def max_abs_codebook_loss(self) -> float:
        return max((abs(h["codebook"]) for h in self.history), default=0.0)


def ablation_table(rows: Sequence[AblationRow]) -> str:
    head = (
        f"{'row':<4}{'EC':>4}{'DC':>4}{'QIE':>5}{'shared':>8}"
        f"{'CD-l1':>10}{'CD-l2':>10}{'F@1%':>8}{'max|Lcb|':>10}"
        f"{'ref CD-l1':>11}{'ref CD-l2':>11}{'ref F':>7}"
    )
    out = [head]
    tick = {True: "x", False: "-"}
    for r in rows:
        c, m = r.config, r.report.mean
        ref = REFERENCE_ABLATION[r.row]
        out.append(
            f"{r.row:<4}{tick[c.use_encoder_codebook]:>4}{tick[c.use_decoder_codebook]:>4}"
            f"{tick[c.use_qie]:>5}{tick[c.shared_codebook]:>8}"
            f"{m['cd_l1']:>10.3f}{m['cd_l2']:>10.3f}{m['fscore']:>8.3f}{r.max_abs_codebook_loss:>10.4f}"
            f"{ref[0]:>11.3f}{ref[1]:>11.3f}{ref[2]:>7.3f}"
        )
    ranked = sorted(rows, key=lambda r: r.report.mean["cd_l1"])
    out.append("desk-scale order by CD-l1: " + " < ".join(r.row for r in ranked))
    out.append("reference order by CD-l1:  " + " < ".join(sorted(REFERENCE_ABLATION, key=lambda k: REFERENCE_ABLATION[k][0])))
    out.append("reference columns are published full-scale results, shown for comparison only")
    return "\n".join(out) + "\n"


def ablate(
    base: ModelConfig,
    train_set: Dataset,
    test_set: Dataset,
    out_dir=None,
    rows: Sequence[str] = tuple(ABLATIONS),
    on_epoch: Callable[[str, str], None] | None = None,
) -> list[AblationRow]:
    """Train and evaluate every ablation row with the same seed and data."""
    from .checkpoint import save_checkpoint
    from .training import train

    results = []
    out = Path(out_dir) if out_dir is not None else None
    for row in rows:
        cfg = ablation_config(base, row)
        callback = (lambda line, _row=row: on_epoch(_row, line)) if on_epoch else None
        state = train(cfg, train_set, on_epoch=callback)
        report = evaluate(state.model, test_set)
        model = state.model
        sites = {
            "encoder": model.encoder_codebook.name if model.encoder_codebook is not None else None,
            "decoder": model.decoder_codebook.name if model.decoder_codebook is not None else None,
        }
        results.append(AblationRow(row, cfg, report, state.history, sites))
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(state, out / f"{row}.ckpt.json")
            (out / f"{row}.report.json").write_text(report.to_json(), encoding="utf-8")
    if out is not None:
        (out / "ablation.txt").write_text(ablation_table(results), encoding="utf-8")
        summary = {
            r.row: {
                "toggles": {k: getattr(r.config, k) for k in ABLATIONS[r.row]},
                "mean": r.report.mean,
                "max_abs_codebook_loss": r.max_abs_codebook_loss,
                "codebook_sites": r.codebook_sites,
                "reference": dict(zip(METRICS, REFERENCE_ABLATION[r.row])),
            }
            for r in results
        }
        (out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return results

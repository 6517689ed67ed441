"""Single-document JSON checkpoints.

Reals are written with Python's shortest round-trip ``repr`` (at most 17
significant digits), so a load/save cycle reproduces the file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import DCPCN, ModelConfig
from .training import TrainState, make_optimizer

FORMAT_VERSION = 1

log = logging.getLogger(__name__)


def _to_lists(arrays: dict[str, np.ndarray]) -> dict[str, list]:
    return {name: np.asarray(a).tolist() for name, a in arrays.items()}


def checkpoint_document(state: TrainState) -> dict:
    model = state.model
    codebooks = {}
    params = dict(model.named_parameters())
    for cb in model.codebooks():
        name = next(n for n, p in params.items() if p is cb.vectors)
        sites = [
            site
            for site, book in (("encoder", model.encoder_codebook), ("decoder", model.decoder_codebook))
            if book is cb
        ]
        codebooks[cb.name] = {"param": name, "sites": sites, "usage": cb.usage.tolist()}
    opt = state.optimizer
    return {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "epoch": state.epoch,
        "params": _to_lists(model.state_dict()),
        "codebooks": codebooks,
        "optimizer": {"step": opt.t, "m": _to_lists(opt.m), "v": _to_lists(opt.v)},
        "rng_state": state.rng.bit_generator.state,
        "history": state.history,
    }


def dumps(state: TrainState) -> str:
    return json.dumps(checkpoint_document(state), separators=(",", ":")) + "\n"


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(state), encoding="utf-8")
    return path


def load_checkpoint(path, config: ModelConfig | None = None) -> TrainState:
    """Rebuild the full training state; the embedded config wins over ``config``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a valid checkpoint ({exc})") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {doc.get('format_version')!r}")
    embedded = ModelConfig.from_dict(doc["config"])
    if config is not None and config != embedded:
        diffs = sorted(k for k, v in config.to_dict().items() if doc["config"].get(k) != v)
        log.warning("checkpoint config overrides the supplied config (differs in: %s)", ", ".join(diffs))
    model = DCPCN(embedded)
    model.load_state_dict({k: np.asarray(v) for k, v in doc["params"].items()})
    by_name = {cb.name: cb for cb in model.codebooks()}
    for name, entry in doc.get("codebooks", {}).items():
        if name not in by_name:
            raise ConfigError(f"{path}: checkpoint codebook {name!r} not present in its own config")
        by_name[name].usage[:] = np.asarray(entry["usage"], dtype=np.int64)
    optimizer = make_optimizer(model)
    optimizer.load_state(doc["optimizer"])
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng_state"]
    return TrainState(model, optimizer, rng, int(doc["epoch"]), list(doc.get("history", [])))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]

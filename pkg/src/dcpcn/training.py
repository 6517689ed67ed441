"""Adam optimizer and the mini-batch training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .codebook import usage_histogram
from .data import Dataset
from .errors import NumericError
from .model import DCPCN, ModelConfig, total_loss

log = logging.getLogger(__name__)

LOSS_KEYS = ("total", "cd_complete", "cd_coarse", "codebook", "vq_codebook", "vq_commitment")


class Adam:
    def __init__(self, params: dict[str, ag.Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"step": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["step"])
        for name in self.params:
            self.m[name] = np.asarray(state["m"][name], dtype=self.params[name].dtype).reshape(self.params[name].shape)
            self.v[name] = np.asarray(state["v"][name], dtype=self.params[name].dtype).reshape(self.params[name].shape)


def make_optimizer(model: DCPCN) -> Adam:
    cfg = model.config
    return Adam(dict(model.named_parameters()), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)


@dataclass
class TrainState:
    model: DCPCN
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def new_state(config: ModelConfig) -> TrainState:
    model = DCPCN(config)
    return TrainState(model, make_optimizer(model), np.random.default_rng(config.seed))


def format_log_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train_step(model: DCPCN, optimizer: Adam, partial: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    model.zero_grad()
    with ag.GradientTape() as tape:
        outputs = model.forward(partial)
        loss = total_loss(outputs, gt, model.config)
    values = outputs.loss_values()
    if not all(np.isfinite(v) for v in values.values()):
        raise NumericError(f"non-finite loss: {values}")
    ag.backward(tape, loss)
    optimizer.step()
    return values


def train(
    config: ModelConfig,
    train_set: Dataset,
    state: TrainState | None = None,
    on_epoch: Callable[[str], None] | None = None,
) -> TrainState:
    """Run epochs ``state.epoch+1 .. config.epochs``; one JSON log line per epoch."""
    config.validate()
    state = state or new_state(config)
    model, opt = state.model, state.optimizer
    n = len(train_set)
    bs = config.batch_size
    while state.epoch < config.epochs:
        epoch = state.epoch + 1
        for cb in model.codebooks():
            cb.reset_usage()
        order = state.rng.permutation(n)
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        batches = 0
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            try:
                values = train_step(model, opt, train_set.partial[idx], train_set.gt[idx])
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b + 1}: {exc}") from None
            for key in LOSS_KEYS:
                sums[key] += values[key]
            batches += 1
        record = {"epoch": epoch, **{k: sums[k] / batches for k in LOSS_KEYS}}
        record["dead_code_fraction"] = {cb.name: usage_histogram(cb).dead_fraction for cb in model.codebooks()}
        state.epoch = epoch
        state.history.append(record)
        line = format_log_line(record)
        log.info(line)
        if on_epoch is not None:
            on_epoch(line)
    return state

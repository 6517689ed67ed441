"""The dual-codebook completion network and its training objective.

Data flow for one batch of partial clouds (B, N, 3)::

    FPS centers + kNN regions -> shallow features (B, M, R)
      -> [encoder codebook]   -> transformer encoder memory (B, M, C)
      -> coarse cloud (B, N_coarse, 3)
      -> transformer decoder over coarse-point queries -> deep features (B, H, C)
      -> project to R -> [decoder codebook] -> [exchange]
      -> fuse with deep features -> folding head -> complete cloud (B, N_coarse*g^2, 3)

Bracketed stages are switched by the ablation toggles in :class:`ModelConfig`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .codebook import Codebook, QuantizedSet, init_codebook, nearest_indices, quantize, vq_losses
from .errors import ConfigError
from .geometry import chamfer_loss, farthest_point_sample, group_regions
from .layers import MLP, DecoderLayer, EncoderLayer, Linear, Module
from .qie import RetargetParams, qie_apply

ABLATIONS: dict[str, dict[str, bool]] = {
    "A": dict(use_encoder_codebook=False, use_decoder_codebook=False, use_qie=False, shared_codebook=False),
    "B": dict(use_encoder_codebook=True, use_decoder_codebook=False, use_qie=False, shared_codebook=False),
    "C": dict(use_encoder_codebook=False, use_decoder_codebook=True, use_qie=False, shared_codebook=False),
    "D": dict(use_encoder_codebook=True, use_decoder_codebook=True, use_qie=False, shared_codebook=False),
    "E": dict(use_encoder_codebook=True, use_decoder_codebook=True, use_qie=True, shared_codebook=False),
    "F": dict(use_encoder_codebook=True, use_decoder_codebook=True, use_qie=False, shared_codebook=True),
}


@dataclass(frozen=True)
class ModelConfig:
    M: int = 16
    k: int = 32
    R: int = 64
    C: int = 128
    K: int = 64
    N_coarse: int = 64
    g: int = 2
    encoder_depth: int = 2
    decoder_depth: int = 2
    heads: int = 4
    use_encoder_codebook: bool = True
    use_decoder_codebook: bool = True
    use_qie: bool = True
    shared_codebook: bool = False
    qie_reverse_loss: bool = True
    coarse_from: str = "encoder"
    grid_span: float = 0.2
    w_cd_complete: float = 1.0
    w_cd_coarse: float = 1.0
    w_codebook: float = 1.0
    w_vq_codebook: float = 1.0
    w_vq_commitment: float = 0.25
    seed: int = 0
    dtype: str = "float32"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999

    @property
    def N_complete(self) -> int:
        return self.N_coarse * self.g * self.g

    @property
    def H(self) -> int:
        return self.N_coarse

    def validate(self) -> "ModelConfig":
        for name in ("M", "k", "R", "C", "K", "N_coarse", "g", "heads", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("encoder_depth", "decoder_depth", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.C % self.heads:
            raise ConfigError(f"C={self.C} is not divisible by heads={self.heads}")
        if self.shared_codebook and not (self.use_encoder_codebook and self.use_decoder_codebook):
            raise ConfigError("shared_codebook requires both use_encoder_codebook and use_decoder_codebook")
        if self.use_qie and not (self.use_encoder_codebook and self.use_decoder_codebook):
            raise ConfigError("use_qie requires both codebooks to be enabled")
        if self.coarse_from not in ("encoder", "shallow"):
            raise ConfigError(f"coarse_from must be 'encoder' or 'shallow', got {self.coarse_from!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optimizer settings out of range")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        clean = {}
        for key, value in data.items():
            expected = type(getattr(cls(), key))
            if expected is bool and not isinstance(value, bool):
                raise ConfigError(f"{key} must be true/false, got {value!r}")
            if expected is int and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{key} must be an integer, got {value!r}")
            if expected is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
                raise ConfigError(f"{key} must be a number, got {value!r}")
            if expected is str and not isinstance(value, str):
                raise ConfigError(f"{key} must be a string, got {value!r}")
            clean[key] = float(value) if expected is float else value
        return cls(**clean).validate()

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def ablation_config(base: ModelConfig, row: str) -> ModelConfig:
    if row not in ABLATIONS:
        raise ConfigError(f"unknown ablation row {row!r}; expected one of {''.join(ABLATIONS)}")
    return base.replace(**ABLATIONS[row]).validate()


@dataclass
class ModelOutputs:
    coarse: Tensor
    complete: Tensor
    centers: np.ndarray
    components: dict[str, Tensor]
    encoder_indices: np.ndarray | None = None
    decoder_indices: np.ndarray | None = None
    codebook_sites: dict[str, Codebook | None] = field(default_factory=dict)
    total: Tensor | None = None

    def loss_values(self) -> dict[str, float]:
        values = {name: float(t.data) for name, t in self.components.items()}
        if self.total is not None:
            values["total"] = float(self.total.data)
        return values


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def folding_grid(g: int, span: float) -> np.ndarray:
    """g*g points of a square grid in [-span, span]^2, row-major."""
    axis = np.linspace(-span, span, g) if g > 1 else np.zeros(1)
    u, v = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=1)


class DCPCN(Module):
    """Dual-codebook point completion network."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        dt = np.dtype(config.dtype)
        R, C, heads = config.R, config.C, config.heads
        rng = np.random.default_rng(config.seed)

        self.sf_mlp = MLP([3, R, R], rng, dt)
        self.enc_proj = Linear(R, C, rng, dt)
        self.enc_pos = MLP([3, C, C], rng, dt)
        self.encoder = [EncoderLayer(C, heads, rng, dt) for _ in range(config.encoder_depth)]
        self.coarse_mlp = MLP([C if config.coarse_from == "encoder" else R, C, 3 * config.N_coarse], rng, dt)
        self.query_embed = MLP([3, C, C], rng, dt)
        self.decoder = [DecoderLayer(C, heads, rng, dt) for _ in range(config.decoder_depth)]
        self.deep_proj = Linear(C, R, rng, dt)
        self.fuse = Linear(C + R, C, rng, dt)
        self.fold = MLP([C + 2, C, C, 3], rng, dt)

        # separate streams so toggling a codebook never shifts the shared layers' init
        self.encoder_codebook: Codebook | None = None
        self.decoder_codebook: Codebook | None = None
        if config.shared_codebook:
            shared = init_codebook(config.K, R, config.seed + 1, dt, name="C_shared")
            self.encoder_codebook = self.decoder_codebook = shared
        else:
            if config.use_encoder_codebook:
                self.encoder_codebook = init_codebook(config.K, R, config.seed + 1, dt, name="C_E")
            if config.use_decoder_codebook:
                self.decoder_codebook = init_codebook(config.K, R, config.seed + 2, dt, name="C_D")
        self.retarget_fwd: RetargetParams | None = None
        self.retarget_rev: RetargetParams | None = None
        if config.use_qie:
            qrng = np.random.default_rng(config.seed + 3)
            self.retarget_fwd = RetargetParams(R, qrng, dt)
            self.retarget_rev = RetargetParams(R, qrng, dt)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    def codebooks(self) -> list[Codebook]:
        seen: list[Codebook] = []
        for cb in (self.encoder_codebook, self.decoder_codebook):
            if cb is not None and all(cb is not s for s in seen):
                seen.append(cb)
        return seen

    # ------------------------------------------------------------------ stages

    def regions(self, partial: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """FPS centers (B, M, 3) and center-relative region offsets (B, M, k, 3)."""
        cfg = self.config
        if partial.shape[1] < max(cfg.M, cfg.k):
            raise ValueError(
                f"partial cloud has {partial.shape[1]} points; need at least max(M, k) = {max(cfg.M, cfg.k)}"
            )
        centers, offsets = [], []
        for cloud in partial:
            fps = farthest_point_sample(cloud, cfg.M, 0)
            groups = group_regions(cloud, fps, cfg.k)
            centers.append(fps.coords)
            offsets.append(cloud[groups] - fps.coords[:, None, :])
        return np.stack(centers), np.stack(offsets)

    def extract_shallow(self, partial: np.ndarray) -> tuple[np.ndarray, Tensor]:
        partial = _batched(partial)
        centers, offsets = self.regions(partial)
        h = self.sf_mlp(Tensor(offsets.astype(self.dtype)))
        return centers, ag.max_over(h, axis=2)

    def encode(self, z: Tensor, centers: np.ndarray) -> Tensor:
        x = self.enc_proj(z) + self.enc_pos(Tensor(np.asarray(centers, dtype=self.dtype)))
        for layer in self.encoder:
            x = layer(x)
        return x

    def predict_coarse(self, features: Tensor) -> Tensor:
        pooled = ag.max_over(features, axis=1)
        out = self.coarse_mlp(pooled)
        return ag.tanh(ag.reshape(out, (features.shape[0], self.config.N_coarse, 3)))

    def decode(self, memory: Tensor, coarse: Tensor) -> Tensor:
        x = self.query_embed(coarse)
        for layer in self.decoder:
            x = layer(x, memory)
        return x

    def fuse_deep(self, deep: Tensor, quantized: Tensor) -> Tensor:
        if deep.shape[:-1] != quantized.shape[:-1]:
            raise ValueError(f"cannot fuse deep features {deep.shape} with {quantized.shape}")
        return self.fuse(ag.concat([deep, quantized], axis=-1))

    def predict_detail(self, fused: Tensor, coarse: Tensor) -> Tensor:
        cfg = self.config
        b, h, _ = coarse.shape
        cells = cfg.g * cfg.g
        rep = np.repeat(np.arange(h), cells)
        grid = np.tile(folding_grid(cfg.g, cfg.grid_span), (h, 1)).astype(self.dtype)
        grid = Tensor(np.broadcast_to(grid, (b, h * cells, 2)).copy())
        offsets = self.fold(ag.concat([ag.take(fused, rep, axis=1), grid], axis=-1))
        return ag.take(coarse, rep, axis=1) + offsets

    # ----------------------------------------------------------------- forward

    def forward(self, partial, track_usage: bool = True) -> ModelOutputs:
        cfg = self.config
        dt = self.dtype
        partial = _batched(partial)
        b = partial.shape[0]
        centers, shallow = self.extract_shallow(partial)
        components = {
            "codebook": _zero(dt),
            "vq_codebook": _zero(dt),
            "vq_commitment": _zero(dt),
        }
        sites: dict[str, Codebook | None] = {"encoder": None, "decoder": None}

        enc_idx = None
        z = shallow
        if cfg.use_encoder_codebook:
            z, enc_idx = self._quantize_site(shallow, self.encoder_codebook, components, track_usage)
            sites["encoder"] = self.encoder_codebook

        memory = self.encode(z, centers)
        coarse = self.predict_coarse(memory if cfg.coarse_from == "encoder" else shallow)
        deep = self.decode(memory, coarse)
        projected = self.deep_proj(deep)

        dec_idx = None
        zd = projected
        if cfg.use_decoder_codebook:
            zd, dec_idx = self._quantize_site(projected, self.decoder_codebook, components, track_usage)
            sites["decoder"] = self.decoder_codebook

        side = zd
        if cfg.use_qie:
            side, components["codebook"] = self._exchange(enc_idx, dec_idx, zd, b)

        fused = self.fuse_deep(deep, side)
        complete = self.predict_detail(fused, coarse)
        return ModelOutputs(
            coarse=coarse,
            complete=complete,
            centers=centers,
            components=components,
            encoder_indices=enc_idx,
            decoder_indices=dec_idx,
            codebook_sites=sites,
        )

    __call__ = forward

    def _quantize_site(self, features: Tensor, codebook: Codebook, components, track_usage):
        b, n, r = features.shape
        flat = ag.reshape(features, (b * n, r))
        q = quantize(flat, codebook, track_usage=track_usage)
        cb_term, commit_term = vq_losses(flat, q)
        components["vq_codebook"] = components["vq_codebook"] + cb_term
        components["vq_commitment"] = components["vq_commitment"] + commit_term
        out = ag.reshape(ag.straight_through(flat, q.codes), (b, n, r))
        return out, q.indices.reshape(b, n)

    def _exchange(self, enc_idx, dec_idx, zd: Tensor, b: int) -> tuple[Tensor, Tensor]:
        """Per-sample exchange; each decoder row takes the merged vector nearest its code."""
        cfg = self.config
        rows, losses = [], []
        for i in range(b):
            enc_q = QuantizedSet(enc_idx[i], ag.take(self.encoder_codebook.vectors, enc_idx[i]), cfg.M)
            dec_q = None
            if cfg.qie_reverse_loss:
                dec_q = QuantizedSet(dec_idx[i], ag.take(self.decoder_codebook.vectors, dec_idx[i]), cfg.H)
            out = qie_apply(
                enc_q,
                self.decoder_codebook,
                self.retarget_fwd,
                dec_q=dec_q,
                enc_codebook=self.encoder_codebook,
                rev_params=self.retarget_rev,
                include_reverse=cfg.qie_reverse_loss,
            )
            losses.append(out.loss)
            pick = nearest_indices(zd.data[i], out.merged.data)
            ag.note_decision(pick)
            rows.append(ag.take(out.merged, pick))
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        return ag.stack(rows, axis=0), total / b

    # ------------------------------------------------------------------- state

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError(f"parameter mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=self.dtype)
            if arr.shape != p.shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.copy()


def _batched(partial) -> np.ndarray:
    arr = np.asarray(partial, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"partial clouds must be (B, N, 3) or (N, 3), got {arr.shape}")
    return arr


def forward_full(partial, model: DCPCN, track_usage: bool = True) -> ModelOutputs:
    return model.forward(partial, track_usage=track_usage)


def total_loss(outputs: ModelOutputs, gt, config: ModelConfig) -> Tensor:
    """Weighted sum of completion, coarse, exchange and VQ terms; fills ``outputs``."""
    gt = _batched(gt)
    if gt.shape[1] == 0:
        raise ValueError("ground-truth cloud is empty")
    comps = outputs.components
    comps["cd_complete"] = chamfer_loss(outputs.complete, gt)
    comps["cd_coarse"] = chamfer_loss(outputs.coarse, gt)
    weights = loss_weights(config)
    total = None
    for name in ("cd_complete", "cd_coarse", "codebook", "vq_codebook", "vq_commitment"):
        term = comps[name] * weights[name]
        total = term if total is None else total + term
    outputs.total = total
    return total


def loss_weights(config: ModelConfig) -> dict[str, float]:
    return {
        "cd_complete": config.w_cd_complete,
        "cd_coarse": config.w_cd_coarse,
        "codebook": config.w_codebook,
        "vq_codebook": config.w_vq_codebook,
        "vq_commitment": config.w_vq_commitment,
    }

"""DLRM-style network: embeddings, feature cross, MLP trunk, sigmoid head.

Supports four sharing configurations. Masks (when used) apply to the MLP
weight matrices only; embeddings and biases are always fully shared.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import nn
from .errors import CheckpointFormatError, ConfigError, ShapeError, StateError

CKPT_MAGIC = b"LTCK"
CKPT_VERSION = 1

# layer_share: the last two FC transitions (hidden -> small hidden -> output)
# form the per-task tower; everything below is the shared trunk.
TOWER_TRANSITIONS = 2


class Task(str, Enum):
    CTR = "ctr"
    CVR = "cvr"


TASKS = (Task.CTR, Task.CVR)


class SharingMode(str, Enum):
    SINGLE_TASK = "single_task"
    LAYER_SHARE = "layer_share"
    CONNECTION_SHARE = "connection_share"
    NEURON_SHARE = "neuron_share"


class CrossKind(str, Enum):
    NONE = "none"
    PAIRWISE_DOT = "pairwise_dot"
    PAIRWISE_PRODUCT = "pairwise_product"


def cross_output_width(n_fields: int, embedding_dim: int, cross_kind: CrossKind) -> int:
    """Width of the MLP input produced by the feature-cross layer."""
    flat = n_fields * embedding_dim
    pairs = n_fields * (n_fields - 1) // 2
    kind = CrossKind(cross_kind)
    if kind is CrossKind.NONE:
        return flat
    if kind is CrossKind.PAIRWISE_DOT:
        return flat + pairs
    return flat + pairs * embedding_dim


@dataclass(frozen=True)
class ModelConfig:
    field_cardinalities: tuple[int, ...]
    embedding_dim: int
    mlp_dims: tuple[int, ...]  # includes the input width and the final width 1
    cross_kind: CrossKind = CrossKind.PAIRWISE_DOT
    sharing_mode: SharingMode = SharingMode.CONNECTION_SHARE

    def __post_init__(self):
        object.__setattr__(self, "field_cardinalities", tuple(int(c) for c in self.field_cardinalities))
        object.__setattr__(self, "mlp_dims", tuple(int(d) for d in self.mlp_dims))
        object.__setattr__(self, "cross_kind", CrossKind(self.cross_kind))
        object.__setattr__(self, "sharing_mode", SharingMode(self.sharing_mode))
        if not self.field_cardinalities or any(c < 1 for c in self.field_cardinalities):
            raise ConfigError(f"field cardinalities must all be >= 1: {self.field_cardinalities}")
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if len(self.mlp_dims) < 2:
            raise ConfigError("mlp_dims needs at least an input width and an output width")
        expected = cross_output_width(self.n_fields, self.embedding_dim, self.cross_kind)
        if self.mlp_dims[0] != expected:
            raise ConfigError(
                f"mlp_dims[0]={self.mlp_dims[0]} but the cross layer produces width {expected} "
                f"for {self.n_fields} fields, dim {self.embedding_dim}, {self.cross_kind.value}"
            )
        if self.mlp_dims[-1] != 1:
            raise ConfigError(f"final MLP width must be 1, got {self.mlp_dims[-1]}")
        if self.sharing_mode is SharingMode.LAYER_SHARE and len(self.mlp_dims) < TOWER_TRANSITIONS + 2:
            raise ConfigError("layer_share needs at least one trunk transition below the tower")

    @property
    def n_fields(self) -> int:
        return len(self.field_cardinalities)

    @property
    def n_transitions(self) -> int:
        return len(self.mlp_dims) - 1

    def to_json_dict(self) -> dict:
        return {
            "field_cardinalities": list(self.field_cardinalities),
            "embedding_dim": self.embedding_dim,
            "mlp_dims": list(self.mlp_dims),
            "cross_kind": self.cross_kind.value,
            "sharing_mode": self.sharing_mode.value,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            field_cardinalities=tuple(d["field_cardinalities"]),
            embedding_dim=d["embedding_dim"],
            mlp_dims=tuple(d["mlp_dims"]),
            cross_kind=CrossKind(d["cross_kind"]),
            sharing_mode=SharingMode(d["sharing_mode"]),
        )


def default_mlp_dims(n_fields: int, embedding_dim: int,
                     cross_kind: CrossKind = CrossKind.PAIRWISE_DOT,
                     hidden: tuple[int, ...] = (64, 32, 16)) -> tuple[int, ...]:
    """Desk-scale dims: cross width -> hidden chain -> 1."""
    return (cross_output_width(n_fields, embedding_dim, cross_kind), *hidden, 1)


@dataclass
class ModelParams:
    """All trainable weights, plus the frozen rewind snapshot."""

    embeddings: list[np.ndarray]            # per field: (cardinality, dim)
    mlp_weights: list[np.ndarray]           # trunk only in layer_share mode
    mlp_biases: list[np.ndarray]
    head_weights: dict[Task, list[np.ndarray]] | None = None  # layer_share only
    head_biases: dict[Task, list[np.ndarray]] | None = None
    init_snapshot: "ModelParams | None" = None

    def blocks(self) -> list[np.ndarray]:
        """All parameter arrays in fixed declaration order."""
        out = [*self.embeddings, *self.mlp_weights, *self.mlp_biases]
        if self.head_weights is not None:
            for task in TASKS:
                out.extend(self.head_weights[task])
                out.extend(self.head_biases[task])
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            embeddings=[e.copy() for e in self.embeddings],
            mlp_weights=[w.copy() for w in self.mlp_weights],
            mlp_biases=[b.copy() for b in self.mlp_biases],
            head_weights=None if self.head_weights is None else {
                t: [w.copy() for w in ws] for t, ws in self.head_weights.items()},
            head_biases=None if self.head_biases is None else {
                t: [b.copy() for b in bs] for t, bs in self.head_biases.items()},
            init_snapshot=None,
        )

    def take_snapshot(self) -> None:
        """Freeze a deep copy of the current weights as the rewind point."""
        self.init_snapshot = self.copy()

    def rewind(self) -> None:
        """Restore live weights to the frozen snapshot, bit-exactly."""
        if self.init_snapshot is None:
            raise StateError("rewind called before a snapshot was taken")
        for live, snap in zip(self.blocks(), self.init_snapshot.blocks()):
            np.copyto(live, snap)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Xavier-uniform weights, zero biases, deterministic under seed."""
    rng = nn.make_rng(seed)
    embeddings = [nn.xavier_init(card, cfg.embedding_dim, rng)
                  for card in cfg.field_cardinalities]
    dims = cfg.mlp_dims
    if cfg.sharing_mode is SharingMode.LAYER_SHARE:
        trunk_dims = dims[:len(dims) - TOWER_TRANSITIONS]
        tower_dims = dims[len(dims) - TOWER_TRANSITIONS - 1:]
        mlp_weights = [nn.xavier_init(a, b, rng) for a, b in zip(trunk_dims, trunk_dims[1:])]
        mlp_biases = [np.zeros(b, dtype=nn.DTYPE) for b in trunk_dims[1:]]
        head_weights, head_biases = {}, {}
        for task in TASKS:
            head_weights[task] = [nn.xavier_init(a, b, rng) for a, b in zip(tower_dims, tower_dims[1:])]
            head_biases[task] = [np.zeros(b, dtype=nn.DTYPE) for b in tower_dims[1:]]
        return ModelParams(embeddings, mlp_weights, mlp_biases, head_weights, head_biases)
    mlp_weights = [nn.xavier_init(a, b, rng) for a, b in zip(dims, dims[1:])]
    mlp_biases = [np.zeros(b, dtype=nn.DTYPE) for b in dims[1:]]
    return ModelParams(embeddings, mlp_weights, mlp_biases)


def embed(ids: np.ndarray, embeddings: list[np.ndarray],
          cardinalities: tuple[int, ...] | None = None) -> np.ndarray:
    """Row lookup per field: (n, F) int ids -> (n, F, dim)."""
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.shape[1] != len(embeddings):
        raise ShapeError(f"embed: ids {ids.shape} for {len(embeddings)} fields")
    cols = []
    for f, table in enumerate(embeddings):
        fid = ids[:, f]
        bad = (fid < 0) | (fid >= table.shape[0])
        if bad.any():
            which = int(fid[bad][0])
            raise IndexError(f"feature id {which} out of range for field {f} "
                             f"(cardinality {table.shape[0]})")
        cols.append(table[fid])
    return np.stack(cols, axis=1)


def feature_cross(emb: np.ndarray, cross_kind: CrossKind) -> np.ndarray:
    """(n, F, d) embeddings -> (n, cross_output_width) MLP input."""
    n, F, d = emb.shape
    flat = emb.reshape(n, F * d)
    kind = CrossKind(cross_kind)
    if kind is CrossKind.NONE or F == 1:
        return flat
    pi, pj = np.triu_indices(F, k=1)
    if kind is CrossKind.PAIRWISE_DOT:
        dots = np.einsum("npd,npd->np", emb[:, pi, :], emb[:, pj, :])
        return np.concatenate([flat, dots], axis=1)
    prods = (emb[:, pi, :] * emb[:, pj, :]).reshape(n, -1)
    return np.concatenate([flat, prods], axis=1)


def _feature_cross_backward(emb: np.ndarray, d_x: np.ndarray,
                            cross_kind: CrossKind) -> np.ndarray:
    """Gradient through feature_cross: d_x (n, width) -> d_emb (n, F, d)."""
    n, F, d = emb.shape
    flat_w = F * d
    d_emb = d_x[:, :flat_w].reshape(n, F, d).copy()
    kind = CrossKind(cross_kind)
    if kind is CrossKind.NONE or F == 1:
        return d_emb
    pi, pj = np.triu_indices(F, k=1)
    if kind is CrossKind.PAIRWISE_DOT:
        g = d_x[:, flat_w:]                       # (n, n_pairs)
        np.add.at(d_emb, (slice(None), pi), g[:, :, None] * emb[:, pj, :])
        np.add.at(d_emb, (slice(None), pj), g[:, :, None] * emb[:, pi, :])
    else:
        g = d_x[:, flat_w:].reshape(n, len(pi), d)
        np.add.at(d_emb, (slice(None), pi), g * emb[:, pj, :])
        np.add.at(d_emb, (slice(None), pj), g * emb[:, pi, :])
    return d_emb


@dataclass
class ForwardCache:
    ids: np.ndarray
    emb: np.ndarray
    cross: np.ndarray
    layer_inputs: list[np.ndarray]      # input to each FC transition (post-ReLU)
    pre_activations: list[np.ndarray]   # z of each FC transition
    logits: np.ndarray
    task: Task
    used_tower: bool


@dataclass
class Grads:
    """Gradient arrays mirroring ModelParams (zeros for untouched blocks)."""

    embeddings: list[np.ndarray]
    mlp_weights: list[np.ndarray]
    mlp_biases: list[np.ndarray]
    head_weights: dict[Task, list[np.ndarray]] | None = None
    head_biases: dict[Task, list[np.ndarray]] | None = None

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Grads":
        return cls(
            embeddings=[np.zeros_like(e) for e in params.embeddings],
            mlp_weights=[np.zeros_like(w) for w in params.mlp_weights],
            mlp_biases=[np.zeros_like(b) for b in params.mlp_biases],
            head_weights=None if params.head_weights is None else {
                t: [np.zeros_like(w) for w in ws] for t, ws in params.head_weights.items()},
            head_biases=None if params.head_biases is None else {
                t: [np.zeros_like(b) for b in bs] for t, bs in params.head_biases.items()},
        )

    def blocks(self) -> list[np.ndarray]:
        out = [*self.embeddings, *self.mlp_weights, *self.mlp_biases]
        if self.head_weights is not None:
            for task in TASKS:
                out.extend(self.head_weights[task])
                out.extend(self.head_biases[task])
        return out


def _mask_layers(mask) -> list[np.ndarray] | None:
    if mask is None:
        return None
    return mask.layers if hasattr(mask, "layers") else list(mask)


def forward(ids: np.ndarray, params: ModelParams, cfg: ModelConfig, task: Task,
            mask=None, want_cache: bool = False):
    """Predictions in (0,1) for a batch of feature-id rows.

    ``mask`` (connection/neuron modes only) multiplies each MLP weight matrix
    elementwise before use; embeddings and biases are never masked.
    """
    task = Task(task)
    layers = _mask_layers(mask)
    if layers is not None and cfg.sharing_mode in (SharingMode.SINGLE_TASK, SharingMode.LAYER_SHARE):
        raise ConfigError(f"mask supplied in {cfg.sharing_mode.value} mode")
    emb = embed(ids, params.embeddings)
    x = feature_cross(emb, cfg.cross_kind)

    if cfg.sharing_mode is SharingMode.LAYER_SHARE:
        weights = params.mlp_weights + params.head_weights[task]
        biases = params.mlp_biases + params.head_biases[task]
        used_tower = True
    else:
        weights, biases = params.mlp_weights, params.mlp_biases
        used_tower = False
    if layers is not None:
        if len(layers) != len(weights):
            raise ShapeError(f"mask has {len(layers)} layers, model has {len(weights)}")
        for m, w in zip(layers, weights):
            if m.shape != w.shape:
                raise ShapeError(f"mask layer {m.shape} vs weight {w.shape}")
        weights = [w * m for w, m in zip(weights, layers)]

    layer_inputs, pre_acts = [], []
    h = x
    for li, (w, b) in enumerate(zip(weights, biases)):
        layer_inputs.append(h)
        z = nn.affine_forward(h, w, b)
        pre_acts.append(z)
        h = nn.relu(z) if li < len(weights) - 1 else z
    logits = h[:, 0]
    # keep predictions in the open interval even at saturated logits
    preds = np.clip(nn.sigmoid(logits), np.finfo(np.float64).tiny,
                    np.nextafter(1.0, 0.0))
    if not want_cache:
        return preds
    cache = ForwardCache(ids=np.asarray(ids), emb=emb, cross=x,
                         layer_inputs=layer_inputs, pre_activations=pre_acts,
                         logits=logits, task=task, used_tower=used_tower)
    return preds, cache


def backward(d_logits: np.ndarray, cache: ForwardCache, params: ModelParams,
             cfg: ModelConfig, mask=None) -> Grads:
    """Gradients of a scalar loss given d loss / d logit per sample."""
    if cache is None or not cache.layer_inputs:
        raise StateError("backward called without a cached forward pass")
    task = cache.task
    layers = _mask_layers(mask)
    if cache.used_tower:
        weights = params.mlp_weights + params.head_weights[task]
    else:
        weights = params.mlp_weights
    if layers is not None:
        eff_weights = [w * m for w, m in zip(weights, layers)]
    else:
        eff_weights = weights

    grads = Grads.zeros_like(params)
    if cache.used_tower:
        g_w = grads.mlp_weights + grads.head_weights[task]
        g_b = grads.mlp_biases + grads.head_biases[task]
    else:
        g_w, g_b = grads.mlp_weights, grads.mlp_biases

    d_out = d_logits[:, None]
    for li in range(len(eff_weights) - 1, -1, -1):
        if li < len(eff_weights) - 1:
            d_out = d_out * (cache.pre_activations[li] > 0)
        d_w, d_b, d_in = nn.affine_backward(cache.layer_inputs[li], eff_weights[li], d_out)
        if layers is not None:
            d_w *= layers[li]  # masked connections get exactly zero gradient
        g_w[li] += d_w
        g_b[li] += d_b
        d_out = d_in

    d_emb = _feature_cross_backward(cache.emb, d_out, cfg.cross_kind)
    for f in range(cfg.n_fields):
        np.add.at(grads.embeddings[f], cache.ids[:, f], d_emb[:, f, :])
    return grads


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig) -> None:
    """Binary checkpoint: magic, version, config JSON, 64-bit LE blocks."""
    header = json.dumps(cfg.to_json_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for block in params.blocks():
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig.from_json_dict(json.loads(raw[12:12 + hlen].decode("utf-8")))
    except (ValueError, KeyError) as exc:
        raise CheckpointFormatError(f"{path}: bad checkpoint header: {exc}") from exc
    params = init_params(cfg, seed=0)  # shapes only; values overwritten below
    offset = 12 + hlen
    for block in params.blocks():
        nbytes = block.size * 8
        if offset + nbytes > len(raw):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        block[...] = np.frombuffer(raw, dtype="<f8", count=block.size,
                                   offset=offset).reshape(block.shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: trailing bytes in checkpoint")
    return cfg, params

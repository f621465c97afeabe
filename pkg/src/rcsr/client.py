"""Client-side local training and the per-round statistics payload.

A client copies the broadcast parameters, runs Adam over its local
batches with the modality-appropriate objective, and reports back its
update together with a compact summary: local prototypes (global ones
standing in for missing modalities), update geometry, a modality mask,
and its mean training loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import losses
from . import model as model_mod
from . import seeding
from .data import SyntheticDataset

Array = np.ndarray
log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class EmptyClientError(RuntimeError):
    """Raised instead of silently returning a zero update."""


class DegeneratePrototypeError(ValueError):
    """A prototype collapsed to the zero vector."""


@dataclass
class ClientState:
    """Static per-client facts: identity, modality, and data split."""

    client_id: int
    modality_type: str
    train_indices: Array
    holdout_indices: Array


@dataclass(frozen=True)
class LocalSettings:
    """Everything one local round needs besides the broadcast weights."""

    lr: float
    batch_size: int
    epochs: int
    weights: losses.LossWeights
    master_seed: int
    round_index: int


@dataclass
class LocalResult:
    params: model_mod.TrainableParams
    mean_loss: float
    steps: int
    step_losses: list[float] = field(default_factory=list)


@dataclass
class ClientStatistics:
    """The payload the aggregation router consumes, one row per client."""

    client_id: int
    proto_image: Array
    proto_text: Array
    geometry: Array  # (update norm, max coordinate, drift cosine, per-step norm)
    mask: tuple[int, int]
    loss: float


class Adam(object):
    """Per-round optimizer state; reset every time a client trains."""

    def __init__(self, arrays: Mapping[str, Array]):
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0

    def step(self, arrays: dict[str, Array], grads: Mapping[str, Array],
             lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for name, g in grads.items():
            self.m[name] = ADAM_BETA1 * self.m[name] + (1.0 - ADAM_BETA1) * g
            self.v[name] = ADAM_BETA2 * self.v[name] + (1.0 - ADAM_BETA2) * g * g
            denom = np.sqrt(self.v[name] / bc2) + ADAM_EPS
            arrays[name] -= lr * (self.m[name] / bc1) / denom


def _batch_modalities(modality_type: str) -> tuple[str, ...]:
    if modality_type == "paired":
        return ("image", "text")
    if modality_type == "image_only":
        return ("image",)
    if modality_type == "text_only":
        return ("text",)
    raise ValueError(f"unknown modality type '{modality_type}'")


def _build_loss_graph(backbone: model_mod.FrozenBackbone, modality_type: str,
                      batch: int, global_protos: Mapping[str, Array],
                      round_start: Mapping[str, Array],
                      weights: losses.LossWeights):
    """Differentiable composite objective for one batch size."""
    param_nodes = model_mod.param_inputs(backbone.config)
    raw_nodes = {m: ad.input_(f"raw_{m}", differentiable=False)
                 for m in _batch_modalities(modality_type)}
    embeddings = {m: model_mod.encode_graph(backbone, m, raw_nodes[m], param_nodes)
                  for m in raw_nodes}

    if modality_type == "paired":
        base = losses.info_nce_node(embeddings["image"], embeddings["text"],
                                    weights.temperature, batch)
    else:
        available = next(iter(raw_nodes))
        missing = "text" if available == "image" else "image"
        base = ad.smul(losses.anchor_node(embeddings[available],
                                          global_protos[missing], batch),
                       weights.anchor_weight)

    proto_nodes = {m: losses.batch_prototype_node(z) for m, z in embeddings.items()}
    loss = ad.add(base, losses.drift_node(proto_nodes, global_protos,
                                          weights.align_weight))
    loss = ad.add(loss, losses.proximal_node(param_nodes, round_start,
                                             weights.prox_weight))
    return loss, list(param_nodes)


def local_train(params: model_mod.TrainableParams, backbone: model_mod.FrozenBackbone,
                dataset: SyntheticDataset, client: ClientState,
                global_protos: Mapping[str, Array],
                settings: LocalSettings) -> LocalResult:
    """Adam over local batches; the broadcast parameters are never mutated."""
    indices = client.train_indices
    if indices.size == 0:
        raise EmptyClientError(f"client {client.client_id} has no training data")
    settings.weights.validate()
    if settings.batch_size < 1 or settings.epochs < 1:
        raise ValueError("batch_size and epochs must be >= 1")

    local = params.copy()
    start = {k: v.copy() for k, v in params.arrays.items()}
    optimizer = Adam(local.arrays)
    rng = seeding.derive_rng(settings.master_seed, seeding.CLIENT_TRAIN,
                             settings.round_index, client.client_id)
    graphs: dict[int, tuple] = {}
    step_losses: list[float] = []

    for _ in range(settings.epochs):
        perm = rng.permutation(indices)
        if indices.size <= settings.batch_size:
            chunks = [perm]
        else:
            chunks = [perm[i:i + settings.batch_size]
                      for i in range(0, perm.size, settings.batch_size)]
        for chunk in chunks:
            batch = chunk.size
            if batch not in graphs:
                graphs[batch] = _build_loss_graph(
                    backbone, client.modality_type, batch, global_protos,
                    start, settings.weights)
            loss_node, wrt = graphs[batch]
            bindings = dict(local.arrays)
            for modality in _batch_modalities(client.modality_type):
                raw = dataset.image_raw if modality == "image" else dataset.text_raw
                bindings[f"raw_{modality}"] = raw[chunk]
            value, grads = ad.value_and_gradient(loss_node, bindings, wrt)
            optimizer.step(local.arrays, grads, settings.lr)
            step_losses.append(value)

    return LocalResult(local, float(np.mean(step_losses)), len(step_losses),
                       step_losses)


# ---------------------------------------------------------------------------
# statistics payload
# ---------------------------------------------------------------------------

def compute_prototype(embeddings: Array) -> Array:
    """Normalized mean of unit-norm embedding rows, shape (1, d)."""
    embeddings = ad.as_tensor(embeddings)
    if embeddings.shape[0] == 0:
        raise DegeneratePrototypeError("no embeddings to average")
    mean = embeddings.mean(axis=0, keepdims=True)
    norm = np.linalg.norm(mean)
    if norm < ad.NORM_EPS:
        raise DegeneratePrototypeError(
            f"prototype norm {norm:.2e} below {ad.NORM_EPS}")
    return mean / norm


def build_statistics(client: ClientState, local: model_mod.TrainableParams,
                     round_start: model_mod.TrainableParams,
                     backbone: model_mod.FrozenBackbone, dataset: SyntheticDataset,
                     global_protos: Mapping[str, Array], mean_loss: float,
                     steps: int, prev_update: Array | None) -> ClientStatistics:
    """Summarize one finished local round for the router.

    Missing-modality prototype slots carry the broadcast global
    prototype verbatim; the mask records which slots are genuine.
    """
    if steps < 1:
        raise ValueError("statistics require at least one completed step")
    protos: dict[str, Array] = {}
    for modality in _batch_modalities(client.modality_type):
        raw = dataset.image_raw if modality == "image" else dataset.text_raw
        emb = model_mod.encode(local, backbone, raw[client.train_indices], modality)
        protos[modality] = compute_prototype(emb)
    proto_image = protos.get("image", ad.as_tensor(global_protos["image"]).copy())
    proto_text = protos.get("text", ad.as_tensor(global_protos["text"]).copy())
    mask = (1 if "image" in protos else 0, 1 if "text" in protos else 0)

    flat_delta = model_mod.flatten(local) - model_mod.flatten(round_start)
    norm2 = float(np.linalg.norm(flat_delta))
    norm_inf = float(np.abs(flat_delta).max()) if flat_delta.size else 0.0
    drift_cos = 0.0
    if prev_update is not None:
        prev_norm = float(np.linalg.norm(prev_update))
        if norm2 >= 1e-12 and prev_norm >= 1e-12:
            drift_cos = float(flat_delta @ prev_update / (norm2 * prev_norm))
    geometry = np.array([norm2, norm_inf, drift_cos, norm2 / steps])
    return ClientStatistics(client.client_id, proto_image, proto_text,
                            geometry, mask, float(mean_loss))

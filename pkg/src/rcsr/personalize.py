"""Per-client residual adapters that never travel to the server.

Each client may keep one tiny two-layer adapter per modality branch.
The correction is scaled by a strength tied to the client's routing
weight: clients the router trusts less get more room to specialize,
capped at 0.5 so the shared embedding always dominates. Adapters train
locally against the shared encoder's frozen outputs at a reduced
learning rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import losses
from . import model as model_mod
from . import seeding
from .client import Adam, ClientState
from .data import SyntheticDataset

Array = np.ndarray

W1_INIT_SCALE = 0.05
W2_INIT_SCALE = 1e-4
MAX_STRENGTH = 0.5


@dataclass
class PersonalAdapter:
    """Residual corrections for both modality branches of one client."""

    embed_dim: int
    hidden_dim: int
    arrays: dict[str, Array] = field(default_factory=dict)

    def copy(self) -> "PersonalAdapter":
        return PersonalAdapter(self.embed_dim, self.hidden_dim,
                               {k: v.copy() for k, v in self.arrays.items()})


def init_adapter(embed_dim: int, client_id: int, seed: int,
                 hidden_dim: int | None = None) -> PersonalAdapter:
    """Down projection at a small scale, up projection near zero so the
    adapter starts as an approximate identity."""
    if hidden_dim is None:
        hidden_dim = max(embed_dim // 2, 1)
    if embed_dim < 1 or hidden_dim < 1:
        raise ValueError("adapter dimensions must be >= 1")
    rng = seeding.derive_rng(seed, seeding.PERSONAL, client_id)
    arrays = {}
    for modality in model_mod.MODALITIES:
        arrays[f"{modality}.w1"] = rng.uniform(-W1_INIT_SCALE, W1_INIT_SCALE,
                                               (embed_dim, hidden_dim))
        arrays[f"{modality}.w2"] = rng.uniform(-W2_INIT_SCALE, W2_INIT_SCALE,
                                               (hidden_dim, embed_dim))
    return PersonalAdapter(embed_dim, hidden_dim, arrays)


def personalization_strength(router_weight: float, lambda_p: float) -> float:
    """Adaptation intensity: lambda_p at router weight >= 0.5, growing as
    the weight falls below that, capped at 0.5."""
    if not 0.0 <= router_weight <= 1.0:
        raise ValueError(f"router weight {router_weight} outside [0, 1]")
    if lambda_p <= 0.0:
        raise ValueError(f"lambda_p must be > 0, got {lambda_p}")
    return min(lambda_p * (1.0 + max(0.0, 0.5 - router_weight)), MAX_STRENGTH)


def personalize_embedding(adapter: PersonalAdapter, z: Array, modality: str,
                          strength: float) -> Array:
    """Apply the residual correction and re-normalize rows.

    A strength of zero or an exactly-zero residual returns the input
    unchanged, bit for bit, so a fresh zero adapter is a true identity.
    """
    if modality not in model_mod.MODALITIES:
        raise ValueError(f"unknown modality '{modality}'")
    z = ad.as_tensor(z)
    if z.shape[1] != adapter.embed_dim:
        raise ValueError(f"embedding dim {z.shape[1]} does not match "
                         f"adapter dim {adapter.embed_dim}")
    if strength == 0.0:
        return z.copy()
    w1 = adapter.arrays[f"{modality}.w1"]
    w2 = adapter.arrays[f"{modality}.w2"]
    residual = ad.gelu_value(z @ w1) @ w2
    if not residual.any():
        return z.copy()
    shifted = z + strength * residual
    norms = np.linalg.norm(shifted, axis=1, keepdims=True)
    if np.any(norms < ad.NORM_EPS):
        raise ValueError("personalized embedding collapsed to zero norm")
    return shifted / norms


@dataclass(frozen=True)
class PersonalSettings:
    """One fine-tuning pass: reduced learning rate, usual batching."""

    lr: float
    batch_size: int
    temperature: float
    lambda_p: float
    master_seed: int
    round_index: int


def _personal_graph(modalities: tuple[str, ...], batch: int, strength: float,
                    temperature: float, global_protos: Mapping[str, Array]):
    """Loss over personalized embeddings; the shared encoder output enters
    as data, so only adapter parameters receive gradients."""
    wrt = []
    tilde = {}
    for modality in modalities:
        z = ad.input_(f"z_{modality}", differentiable=False)
        w1 = ad.input_(f"{modality}.w1")
        w2 = ad.input_(f"{modality}.w2")
        wrt.extend([f"{modality}.w1", f"{modality}.w2"])
        residual = ad.matmul(ad.gelu(ad.matmul(z, w1)), w2)
        tilde[modality] = ad.normalize_rows(ad.add(z, ad.smul(residual,
                                                              strength)))
    if len(modalities) == 2:
        loss = losses.info_nce_node(tilde["image"], tilde["text"],
                                    temperature, batch)
    else:
        available = modalities[0]
        missing = "text" if available == "image" else "image"
        loss = losses.anchor_node(tilde[available], global_protos[missing],
                                  batch)
    return loss, wrt


def personal_finetune(adapter: PersonalAdapter,
                      params: model_mod.TrainableParams,
                      backbone: model_mod.FrozenBackbone,
                      dataset: SyntheticDataset, client: ClientState,
                      global_protos: Mapping[str, Array], router_weight: float,
                      settings: PersonalSettings) -> PersonalAdapter:
    """One pass over the client's data updating only the adapter.

    Paired clients tighten the contrastive objective on personalized
    embeddings; single-modality clients anchor theirs to the missing
    modality's global prototype. The shared parameters are read, never
    written.
    """
    if client.train_indices.size == 0:
        raise ValueError(f"client {client.client_id} has no data to "
                         "personalize on")
    if settings.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    strength = personalization_strength(router_weight, settings.lambda_p)
    if client.modality_type == "paired":
        modalities: tuple[str, ...] = ("image", "text")
    elif client.modality_type == "image_only":
        modalities = ("image",)
    elif client.modality_type == "text_only":
        modalities = ("text",)
    else:
        raise ValueError(f"unknown modality type '{client.modality_type}'")

    local = adapter.copy()
    optimizer = Adam(local.arrays)
    rng = seeding.derive_rng(settings.master_seed, seeding.PERSONAL,
                             settings.round_index, client.client_id)
    perm = rng.permutation(client.train_indices)
    if perm.size <= settings.batch_size:
        chunks = [perm]
    else:
        chunks = [perm[i:i + settings.batch_size]
                  for i in range(0, perm.size, settings.batch_size)]
    graphs: dict[int, tuple] = {}
    for chunk in chunks:
        batch = chunk.size
        if batch not in graphs:
            graphs[batch] = _personal_graph(modalities, batch, strength,
                                            settings.temperature,
                                            global_protos)
        loss_node, wrt = graphs[batch]
        bindings = dict(local.arrays)
        for modality in modalities:
            raw = (dataset.image_raw if modality == "image"
                   else dataset.text_raw)
            bindings[f"z_{modality}"] = model_mod.encode(params, backbone,
                                                         raw[chunk], modality)
        _, grads = ad.value_and_gradient(loss_node, bindings, wrt)
        optimizer.step(local.arrays, grads, settings.lr)
    return local

"""Training objectives for paired and single-modality clients.

Each loss exists twice on purpose: a vectorized numpy evaluation (the
reference used by tests and reporting) and a graph builder producing
differentiable nodes for local training. The two routes are held to
agree within 1e-12 by the test suite.

The composite client objective is: symmetric contrastive alignment for
paired batches, prototype anchoring for single-modality batches, plus a
prototype-drift penalty over the modalities the client actually has and
a proximal penalty tying local weights to the round-start weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad

Array = np.ndarray

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Scalar knobs of the composite client objective."""

    temperature: float = 0.07
    anchor_weight: float = 1.0
    align_weight: float = 0.1
    prox_weight: float = 0.01

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        for name in ("anchor_weight", "align_weight", "prox_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _require_unit_rows(z: Array, what: str) -> None:
    norms = np.linalg.norm(z, axis=1)
    if np.abs(norms - 1.0).max() > UNIT_TOL:
        raise ValueError(f"{what} rows must be unit-norm within {UNIT_TOL}")


def _log_softmax_rows(s: Array) -> Array:
    shifted = s - s.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _cos(a: Array, b: Array) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ad.NORM_EPS or nb < ad.NORM_EPS:
        raise ValueError("cosine of a near-zero vector")
    return float((a * b).sum() / (na * nb))


# ---------------------------------------------------------------------------
# symmetric contrastive alignment
# ---------------------------------------------------------------------------

def info_nce(z_image: Array, z_text: Array, temperature: float = 0.07) -> float:
    """Symmetric cross-modal contrastive loss over a paired batch.

    Row i of each matrix is the embedding of the same underlying item;
    both retrieval directions contribute equally.
    """
    z_image, z_text = ad.as_tensor(z_image), ad.as_tensor(z_text)
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if z_image.shape != z_text.shape:
        raise ValueError(f"batch shapes differ: {z_image.shape} vs {z_text.shape}")
    _require_unit_rows(z_image, "image")
    _require_unit_rows(z_text, "text")
    batch = z_image.shape[0]
    logits = z_image @ z_text.T / temperature
    fwd = np.trace(_log_softmax_rows(logits))
    bwd = np.trace(_log_softmax_rows(logits.T))
    return float(-(fwd + bwd) / (2.0 * batch))


def info_nce_node(z_image: ad.Node, z_text: ad.Node, temperature: float,
                  batch: int) -> ad.Node:
    eye = ad.const(np.eye(batch))
    logits = ad.smul(ad.matmul(z_image, ad.transpose(z_text)), 1.0 / temperature)
    fwd = ad.sum_all(ad.mul(ad.log(ad.softmax(logits)), eye))
    bwd = ad.sum_all(ad.mul(ad.log(ad.softmax(ad.transpose(logits))), eye))
    return ad.smul(ad.add(fwd, bwd), -1.0 / (2.0 * batch))


# ---------------------------------------------------------------------------
# prototype anchoring for single-modality batches
# ---------------------------------------------------------------------------

def anchor_loss(z: Array, anchor: Array) -> float:
    """One minus the mean cosine between batch rows and the anchor."""
    z, anchor = ad.as_tensor(z), ad.as_tensor(anchor)
    if anchor.shape != (1, z.shape[1]):
        raise ValueError(f"anchor shape {anchor.shape} does not match rows of {z.shape}")
    if np.linalg.norm(anchor) < ad.NORM_EPS:
        raise ValueError("anchor vector is numerically zero")
    _require_unit_rows(z, "batch")
    _require_unit_rows(anchor, "anchor")
    cosines = [_cos(row, anchor[0]) for row in z]
    return float(1.0 - np.mean(cosines))


def anchor_node(z: ad.Node, anchor: Array, batch: int) -> ad.Node:
    tiled = ad.const(np.repeat(ad.as_tensor(anchor), batch, axis=0))
    return ad.sub(ad.const([[1.0]]), ad.mean_all(ad.cosine(z, tiled)))


# ---------------------------------------------------------------------------
# drift + proximal regularizer
# ---------------------------------------------------------------------------

def reg_loss(local_protos: Mapping[str, Array], global_protos: Mapping[str, Array],
             theta_local: Array, theta_global: Array,
             align_weight: float, prox_weight: float) -> float:
    """Prototype-drift penalty over available modalities plus a proximal term.

    ``local_protos`` holds one unit row per modality the client has;
    missing modalities simply do not contribute a drift term.
    """
    if align_weight < 0 or prox_weight < 0:
        raise ValueError("regularizer weights must be nonnegative")
    if not local_protos:
        raise ValueError("at least one local prototype is required")
    drift = 0.0
    for modality, proto in local_protos.items():
        if modality not in global_protos:
            raise ValueError(f"no global prototype for modality '{modality}'")
        drift += 1.0 - _cos(ad.as_tensor(proto)[0], ad.as_tensor(global_protos[modality])[0])
    theta_local = np.asarray(theta_local, dtype=np.float64).ravel()
    theta_global = np.asarray(theta_global, dtype=np.float64).ravel()
    if theta_local.shape != theta_global.shape:
        raise ValueError("parameter vectors differ in length")
    prox = float(((theta_local - theta_global) ** 2).sum())
    return float(0.5 * align_weight * drift + prox_weight * prox)


def batch_prototype_node(z: ad.Node) -> ad.Node:
    """Normalized column mean of a batch of embeddings, a 1-by-d row."""
    return ad.normalize_rows(ad.mean_rows(z))


def drift_node(proto_nodes: Mapping[str, ad.Node],
               global_protos: Mapping[str, Array], align_weight: float) -> ad.Node:
    total = None
    for modality, proto in proto_nodes.items():
        term = ad.sub(ad.const([[1.0]]),
                      ad.cosine(proto, ad.const(global_protos[modality])))
        total = term if total is None else ad.add(total, term)
    return ad.smul(total, 0.5 * align_weight)


def proximal_node(param_nodes: Mapping[str, ad.Node],
                  round_start: Mapping[str, Array], prox_weight: float) -> ad.Node:
    total = None
    for name, node in param_nodes.items():
        term = ad.sumsq(ad.sub(node, ad.const(round_start[name])))
        total = term if total is None else ad.add(total, term)
    return ad.smul(total, prox_weight)


# ---------------------------------------------------------------------------
# composite client objective
# ---------------------------------------------------------------------------

def client_loss(embeddings: Mapping[str, Array], modality_type: str,
                global_protos: Mapping[str, Array], weights: LossWeights,
                prox_sq: float = 0.0) -> float:
    """Numeric composite objective for one batch.

    ``embeddings`` maps modality name to the batch embedding matrix and
    must match ``modality_type`` exactly. ``prox_sq`` is the precomputed
    squared distance between local and round-start parameters.
    """
    weights.validate()
    provided = set(embeddings)
    if modality_type == "paired":
        if provided != {"image", "text"}:
            raise ValueError(f"paired batch needs image and text, got {sorted(provided)}")
        base = info_nce(embeddings["image"], embeddings["text"], weights.temperature)
        available = ("image", "text")
    elif modality_type in ("image_only", "text_only"):
        modality = "image" if modality_type == "image_only" else "text"
        missing = "text" if modality == "image" else "image"
        if provided != {modality}:
            raise ValueError(f"{modality_type} batch must carry only {modality}, "
                             f"got {sorted(provided)}")
        base = weights.anchor_weight * anchor_loss(embeddings[modality],
                                                   global_protos[missing])
        available = (modality,)
    else:
        raise ValueError(f"unknown modality type '{modality_type}'")

    local_protos = {}
    for modality in available:
        z = ad.as_tensor(embeddings[modality])
        mean = z.mean(axis=0, keepdims=True)
        norm = np.linalg.norm(mean)
        local_protos[modality] = mean / norm if norm >= ad.NORM_EPS else mean
    drift = sum(1.0 - _cos(local_protos[m][0], ad.as_tensor(global_protos[m])[0])
                for m in available)
    return float(base + 0.5 * weights.align_weight * drift
                 + weights.prox_weight * prox_sq)

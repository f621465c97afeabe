"""Learnable aggregation router over client statistics.

Each selected client becomes one token: its two prototype slots (filled
slots are zeroed by their mask bit before entering the network, the
mask itself rides along), update geometry, and scaled training loss.
Tokens pass through a small self-attention stack with no positional
information, so the router is permutation-equivariant by construction,
and a zero-initialized scoring head makes the very first routed round
exactly uniform.

The router trains against two signals: the weighted client prototypes
should reproduce the slowly-moving global prototypes (plus an entropy
bonus that keeps weights spread out), and the weighted cross-modal gap
directions should agree with the global gap direction. Global
prototypes enter both losses as constants or through stop-gradient;
either path must produce bit-identical updates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import seeding
from .client import ClientStatistics

Array = np.ndarray
log = logging.getLogger(__name__)

INIT_SCALE = 0.05
ZERO_DIRECTION_TOL = 1e-6
GEOMETRY_FEATURES = 4
MASK_FEATURES = 2


@dataclass(frozen=True)
class RouterConfig:
    """Shape of the router network; ``embed_dim`` is the prototype width."""

    embed_dim: int
    layers: int = 2
    heads: int = 4
    dim: int = 128

    def validate(self) -> None:
        if self.embed_dim < 1 or self.layers < 1 or self.heads < 1 or self.dim < 1:
            raise ValueError("router dimensions must be >= 1")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def token_dim(self) -> int:
        return 2 * self.embed_dim + GEOMETRY_FEATURES + MASK_FEATURES + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass(frozen=True)
class RouterHyper:
    """Loss weights: per-modality prototype terms, entropy bonus, and the
    factor on the alignment-consistency term."""

    pc_image_weight: float = 1.0
    pc_text_weight: float = 1.0
    entropy_weight: float = 0.2
    align_weight: float = 0.3
    mask_filled_slots: bool = False


@dataclass
class RouterParams:
    config: RouterConfig
    arrays: dict[str, Array] = field(default_factory=dict)

    def copy(self) -> "RouterParams":
        return RouterParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def router_shapes(config: RouterConfig) -> dict[str, tuple[int, int]]:
    config.validate()
    shapes = {"token1": (config.token_dim, config.dim),
              "token2": (config.dim, config.dim)}
    for layer in range(config.layers):
        for head in range(config.heads):
            for kind in ("q", "k", "v"):
                shapes[f"layer{layer}.{kind}{head}"] = (config.dim, config.head_dim)
            shapes[f"layer{layer}.o{head}"] = (config.head_dim, config.dim)
        shapes[f"layer{layer}.ff1"] = (config.dim, config.dim)
        shapes[f"layer{layer}.ff2"] = (config.dim, config.dim)
    shapes["score"] = (config.dim, 1)
    return shapes


def init_router(config: RouterConfig, seed: int) -> RouterParams:
    """Small uniform weights; the scoring head starts at zero so the first
    routed round emits uniform weights regardless of the stats."""
    rng = seeding.derive_rng(seed, seeding.ROUTER_INIT)
    arrays = {}
    for name, shape in router_shapes(config).items():
        if name == "score":
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, shape)
    return RouterParams(config, arrays)


# ---------------------------------------------------------------------------
# token construction
# ---------------------------------------------------------------------------

def _validate_stats(stats: Sequence[ClientStatistics], embed_dim: int) -> None:
    if not stats:
        raise ValueError("router needs at least one client")
    ids = [s.client_id for s in stats]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids in router input")
    for s in stats:
        for proto in (s.proto_image, s.proto_text):
            if ad.as_tensor(proto).shape != (1, embed_dim):
                raise ValueError(f"prototype shape {np.shape(proto)} does not "
                                 f"match embed_dim {embed_dim}")


def token_matrix(stats: Sequence[ClientStatistics], loss_scale: float) -> Array:
    """K-by-token_dim inputs; filled prototype slots are zeroed by mask bit."""
    rows = []
    for s in stats:
        image = ad.as_tensor(s.proto_image)[0] * s.mask[0]
        text = ad.as_tensor(s.proto_text)[0] * s.mask[1]
        rows.append(np.concatenate([
            image, text, np.asarray(s.geometry, dtype=np.float64),
            np.array(s.mask, dtype=np.float64),
            np.array([s.loss / loss_scale])]))
    return np.vstack(rows)


def _resolve_loss_scale(stats: Sequence[ClientStatistics],
                        loss_scale: float | None) -> float:
    if loss_scale is None:
        loss_scale = float(np.mean([abs(s.loss) for s in stats]))
    if loss_scale <= 1e-12:
        return 1.0
    return float(loss_scale)


# ---------------------------------------------------------------------------
# graphs
# ---------------------------------------------------------------------------

def _weights_node(config: RouterConfig, params: dict[str, ad.Node],
                  tokens: Array) -> ad.Node:
    h = ad.matmul(ad.relu(ad.matmul(ad.const(tokens), params["token1"])),
                  params["token2"])
    scale = 1.0 / math.sqrt(config.head_dim)
    for layer in range(config.layers):
        attended = None
        for head in range(config.heads):
            q = ad.matmul(h, params[f"layer{layer}.q{head}"])
            k = ad.matmul(h, params[f"layer{layer}.k{head}"])
            v = ad.matmul(h, params[f"layer{layer}.v{head}"])
            att = ad.softmax(ad.smul(ad.matmul(q, ad.transpose(k)), scale))
            out = ad.matmul(ad.matmul(att, v), params[f"layer{layer}.o{head}"])
            attended = out if attended is None else ad.add(attended, out)
        h = ad.add(h, attended)
        ff = ad.matmul(ad.relu(ad.matmul(h, params[f"layer{layer}.ff1"])),
                       params[f"layer{layer}.ff2"])
        h = ad.add(h, ff)
    scores = ad.matmul(h, params["score"])
    return ad.softmax(ad.transpose(scores))


def _proto_consistency_node(weights: ad.Node, stats: Sequence[ClientStatistics],
                            proto_nodes: dict[str, ad.Node],
                            hyper: RouterHyper) -> ad.Node:
    total = None
    for modality, beta in (("image", hyper.pc_image_weight),
                           ("text", hyper.pc_text_weight)):
        protos = np.vstack([ad.as_tensor(getattr(s, f"proto_{modality}"))
                            for s in stats])
        if hyper.mask_filled_slots:
            # cosine ignores positive rescaling, so dropping filled rows
            # without renormalizing the weights is the same penalty
            bit = 0 if modality == "image" else 1
            protos = protos * np.array([[s.mask[bit]] for s in stats], dtype=float)
        mixed = ad.matmul(weights, ad.const(protos))
        term = ad.smul(ad.sub(ad.const([[1.0]]),
                              ad.cosine(mixed, proto_nodes[modality])), beta)
        total = term if total is None else ad.add(total, term)
    return ad.sub(total, ad.smul(ad.entropy(weights), hyper.entropy_weight))


def _alignment_node(weights: ad.Node, directions: Array,
                    global_direction_node: ad.Node) -> ad.Node | None:
    """Shared builder; returns None when every direction is zero-flagged."""
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    norms = np.linalg.norm(directions, axis=1)
    kept = np.flatnonzero(norms >= ZERO_DIRECTION_TOL)
    if kept.size == 0:
        return None
    unit = directions[kept] / norms[kept][:, None]
    selector = np.zeros((directions.shape[0], kept.size))
    selector[kept, np.arange(kept.size)] = 1.0
    w_kept = ad.matmul(weights, ad.const(selector))

    global_unit = ad.normalize_rows(global_direction_node)
    mixed = ad.normalize_rows(ad.matmul(w_kept, ad.const(unit)))
    agreement = ad.sub(ad.const([[1.0]]), ad.cosine(mixed, global_unit))
    gaps = ad.sub(ad.const(np.ones((kept.size, 1))),
                  ad.matmul(ad.const(unit), ad.transpose(mixed)))
    conflict = ad.div(ad.matmul(w_kept, gaps), ad.sum_all(w_kept))
    return ad.add(agreement, conflict)


def _stat_directions(stats: Sequence[ClientStatistics]) -> Array:
    return np.vstack([ad.as_tensor(s.proto_image) - ad.as_tensor(s.proto_text)
                      for s in stats])


def _router_graph(router: RouterParams, stats: Sequence[ClientStatistics],
                  prototypes: dict[str, Array], hyper: RouterHyper,
                  loss_scale: float | None, proto_mode: str):
    """Weight node, loss node, bindings, and differentiable names."""
    _validate_stats(stats, router.config.embed_dim)
    scale = _resolve_loss_scale(stats, loss_scale)
    params = {name: ad.input_(name) for name in router.arrays}
    bindings: dict[str, Array] = dict(router.arrays)

    if proto_mode == "const":
        proto_nodes = {m: ad.const(prototypes[m]) for m in ("image", "text")}
    elif proto_mode == "stop_gradient":
        proto_nodes = {}
        for m in ("image", "text"):
            proto_nodes[m] = ad.stop_gradient(ad.input_(f"proto_{m}"))
            bindings[f"proto_{m}"] = ad.as_tensor(prototypes[m])
    else:
        raise ValueError(f"unknown proto_mode '{proto_mode}'")

    weights = _weights_node(router.config, params, token_matrix(stats, scale))
    loss = _proto_consistency_node(weights, stats, proto_nodes, hyper)
    align = _alignment_node(weights, _stat_directions(stats),
                            ad.sub(proto_nodes["image"], proto_nodes["text"]))
    if align is None:
        log.warning("all %d client directions are zero-flagged; alignment "
                    "term skipped this round", len(stats))
    else:
        loss = ad.add(loss, ad.smul(align, hyper.align_weight))
    return weights, loss, bindings, list(router.arrays)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def route(router: RouterParams, stats: Sequence[ClientStatistics],
          loss_scale: float | None = None) -> Array:
    """Aggregation weights over the selected clients, a simplex vector."""
    _validate_stats(stats, router.config.embed_dim)
    scale = _resolve_loss_scale(stats, loss_scale)
    params = {name: ad.input_(name) for name in router.arrays}
    weights = _weights_node(router.config, params, token_matrix(stats, scale))
    return ad.forward(weights, router.arrays)[0]


def proto_consistency_loss(weights: Array, stats: Sequence[ClientStatistics],
                           prototypes: dict[str, Array],
                           hyper: RouterHyper) -> float:
    """Penalty for the weighted prototype mix drifting off the global ones,
    minus an entropy bonus on the weights."""
    w = ad.const(np.atleast_2d(weights))
    proto_nodes = {m: ad.const(prototypes[m]) for m in ("image", "text")}
    return ad.evaluate(_proto_consistency_node(w, stats, proto_nodes, hyper))


def alignment_consistency_loss(weights: Array, directions: Array,
                               global_direction: Array) -> float:
    """Disagreement between weighted client gap directions and the global
    gap. Zero-flagged directions are excluded with weights renormalized;
    if every direction is flagged the loss is 0 by convention."""
    node = _alignment_node(ad.const(np.atleast_2d(weights)), directions,
                           ad.const(global_direction))
    if node is None:
        log.warning("alignment loss over zero-flagged directions only; "
                    "returning 0")
        return 0.0
    return ad.evaluate(node)


def router_loss(router: RouterParams, stats: Sequence[ClientStatistics],
                prototypes: dict[str, Array], hyper: RouterHyper,
                loss_scale: float | None = None,
                proto_mode: str = "const") -> float:
    _, loss, bindings, _ = _router_graph(router, stats, prototypes, hyper,
                                         loss_scale, proto_mode)
    return ad.evaluate(loss, bindings)


def router_step(router: RouterParams, stats: Sequence[ClientStatistics],
                prototypes: dict[str, Array], hyper: RouterHyper, lr: float,
                loss_scale: float | None = None,
                proto_mode: str = "const") -> tuple[RouterParams, float]:
    """One plain gradient step on the router loss.

    A non-finite loss or gradient skips the update (with a warning) and
    returns the parameters unchanged.
    """
    _, loss, bindings, wrt = _router_graph(router, stats, prototypes, hyper,
                                           loss_scale, proto_mode)
    try:
        value, grads = ad.value_and_gradient(loss, bindings, wrt)
    except ad.GraphError as err:
        log.warning("router step skipped: %s", err)
        return router.copy(), float("nan")
    if any(not np.isfinite(g).all() for g in grads.values()):
        log.warning("router step skipped: non-finite gradient")
        return router.copy(), value
    updated = {name: router.arrays[name] - lr * grads[name]
               for name in router.arrays}
    return RouterParams(router.config, updated), value

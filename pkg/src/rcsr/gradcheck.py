"""Finite-difference verification of every differentiable objective.

Each registered check builds one loss graph at small dimensions with a
seeded instance and compares reverse-mode gradients against central
differences. The CLI surfaces these as the ``gradcheck`` subcommand;
the registry is also what the acceptance suite drives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import client as client_mod
from . import losses
from . import model as model_mod
from . import personalize as pz
from . import router as router_mod

EMBED = 8
BATCH = 4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    seeds: int

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_error) and self.max_error <= self.tolerance


def _unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    z = rng.normal(size=(rows, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _contrastive(seed: int):
    """Symmetric batch contrastive loss through row normalization."""
    rng = np.random.default_rng(seed)
    zi = ad.normalize_rows(ad.input_("x_image"))
    zt = ad.normalize_rows(ad.input_("x_text"))
    loss = losses.info_nce_node(zi, zt, 0.07, BATCH)
    bindings = {"x_image": rng.normal(size=(BATCH, EMBED)),
                "x_text": rng.normal(size=(BATCH, EMBED))}
    return loss, bindings, ["x_image", "x_text"]


def _anchor(seed: int):
    """Prototype-anchoring loss for a single-modality batch."""
    rng = np.random.default_rng(seed)
    z = ad.normalize_rows(ad.input_("x"))
    loss = losses.anchor_node(z, _unit_rows(rng, 1, EMBED), BATCH)
    return loss, {"x": rng.normal(size=(BATCH, EMBED))}, ["x"]


def _tiny_encoder(seed: int):
    cfg = model_mod.EncoderConfig(raw_dim_image=12, raw_dim_text=10,
                                  backbone_width_image=8,
                                  backbone_width_text=6, num_blocks=1,
                                  bottleneck_dim=4, embed_dim=EMBED)
    return cfg, model_mod.FrozenBackbone(cfg, seed), model_mod.init_params(
        cfg, seed)


def _client_composite(modality_type: str, seed: int):
    """Full local objective through the encoders: task term plus
    prototype drift plus the proximal pull."""
    rng = np.random.default_rng(seed)
    cfg, backbone, params = _tiny_encoder(seed)
    # move away from the zero-init point so gradients are generic
    for name in params.arrays:
        params.arrays[name] = params.arrays[name] + rng.normal(
            scale=0.05, size=params.arrays[name].shape)
    start = model_mod.init_params(cfg, seed)
    protos = {"image": _unit_rows(rng, 1, EMBED),
              "text": _unit_rows(rng, 1, EMBED)}
    loss, wrt = client_mod._build_loss_graph(
        backbone, modality_type, BATCH, protos, start.arrays,
        losses.LossWeights())
    bindings = dict(params.arrays)
    modalities = (("image", 12), ("text", 10))
    for modality, raw_dim in modalities:
        if modality_type == "paired" or modality_type.startswith(modality):
            bindings[f"raw_{modality}"] = rng.normal(size=(BATCH, raw_dim))
    return loss, bindings, wrt


def _paired_client(seed: int):
    return _client_composite("paired", seed)


def _anchored_client(seed: int):
    return _client_composite("image_only", seed)


def _random_stats(rng: np.random.Generator, count: int):
    stats = []
    for k in range(count):
        stats.append(client_mod.ClientStatistics(
            client_id=k, proto_image=_unit_rows(rng, 1, EMBED),
            proto_text=_unit_rows(rng, 1, EMBED),
            geometry=rng.uniform(0.0, 2.0, 4), mask=(1, 1),
            loss=float(rng.uniform(0.5, 2.0))))
    return stats


def _proto_consistency(seed: int):
    """Prototype-consistency penalty with weights from a softmax."""
    rng = np.random.default_rng(seed)
    stats = _random_stats(rng, BATCH)
    weights = ad.softmax(ad.input_("scores"))
    protos = {m: ad.const(_unit_rows(rng, 1, EMBED))
              for m in ("image", "text")}
    loss = router_mod._proto_consistency_node(weights, stats, protos,
                                              router_mod.RouterHyper())
    return loss, {"scores": rng.normal(size=(1, BATCH))}, ["scores"]


def _alignment_consistency(seed: int):
    """Gap-direction agreement penalty with weights from a softmax."""
    rng = np.random.default_rng(seed)
    stats = _random_stats(rng, BATCH)
    weights = ad.softmax(ad.input_("scores"))
    directions = router_mod._stat_directions(stats)
    loss = router_mod._alignment_node(weights, directions,
                                      ad.const(_unit_rows(rng, 1, EMBED)))
    return loss, {"scores": rng.normal(size=(1, BATCH))}, ["scores"]


def _router_objective(seed: int):
    """The full routing network and both its loss terms."""
    rng = np.random.default_rng(seed)
    config = router_mod.RouterConfig(embed_dim=EMBED, layers=1, heads=2,
                                     dim=8)
    router = router_mod.init_router(config, seed)
    for name in router.arrays:
        router.arrays[name] = rng.normal(scale=0.1,
                                         size=router.arrays[name].shape)
    stats = _random_stats(rng, BATCH)
    protos = {m: _unit_rows(rng, 1, EMBED) for m in ("image", "text")}
    _, loss, bindings, wrt = router_mod._router_graph(
        router, stats, protos, router_mod.RouterHyper(), 1.0, "const")
    return loss, bindings, wrt


def _personal_residual(seed: int):
    """Adapter residual correction under the contrastive objective."""
    rng = np.random.default_rng(seed)
    protos = {m: _unit_rows(rng, 1, EMBED) for m in ("image", "text")}
    loss, wrt = pz._personal_graph(("image", "text"), BATCH, 0.3, 0.07,
                                   protos)
    adapter = pz.init_adapter(EMBED, client_id=seed % 7, seed=seed)
    # move off the near-zero init so this probes a generic point
    bindings = {name: value + rng.normal(scale=0.3, size=value.shape)
                for name, value in adapter.arrays.items()}
    bindings["z_image"] = _unit_rows(rng, BATCH, EMBED)
    bindings["z_text"] = _unit_rows(rng, BATCH, EMBED)
    return loss, bindings, wrt


CHECKS: dict[str, Callable[[int], tuple]] = {
    "paired_contrastive": _contrastive,
    "single_modality_anchor": _anchor,
    "paired_client_objective": _paired_client,
    "anchored_client_objective": _anchored_client,
    "proto_consistency": _proto_consistency,
    "alignment_consistency": _alignment_consistency,
    "router_objective": _router_objective,
    "personal_residual": _personal_residual,
}


def run_checks(seed_count: int = 20,
               tolerance: float = 1e-4) -> list[CheckResult]:
    """Worst finite-difference error per registered graph."""
    if seed_count < 1:
        raise ValueError("seed_count must be >= 1")
    results = []
    for name, build in CHECKS.items():
        worst = 0.0
        for seed in range(seed_count):
            loss, bindings, wrt = build(seed)
            error = ad.check_gradients(loss, bindings, wrt)
            worst = max(worst, error)
        results.append(CheckResult(name, worst, tolerance, seed_count))
    return results

"""Dual-encoder model: frozen random backbones plus trainable adapters.

Each modality owns a frozen feature extractor (seeded random input
projection, per-block random mixing with residual connections, and a
fixed projection into the shared embedding space) standing in for a
pretrained encoder. The trainable surface is deliberately small:
per-block bottleneck adapters and a residual two-layer projection head
per encoder. Outputs are row-normalized embeddings.

Trainable parameters live in a name-keyed dict with a fixed ordering so
they flatten to (and unflatten from) a single float64 vector bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import seeding

Array = np.ndarray

MODALITIES = ("image", "text")
ADAPTER_INIT_SCALE = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions of the two encoders and their trainable pieces."""

    raw_dim_image: int = 64
    raw_dim_text: int = 48
    backbone_width_image: int = 32
    backbone_width_text: int = 24
    num_blocks: int = 2
    bottleneck_dim: int = 8
    embed_dim: int = 16
    include_bias: bool = False

    def validate(self) -> None:
        for name in ("raw_dim_image", "raw_dim_text", "backbone_width_image",
                     "backbone_width_text", "num_blocks", "bottleneck_dim",
                     "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        widths = (self.backbone_width_image, self.backbone_width_text)
        if self.bottleneck_dim > min(widths):
            raise ValueError(
                f"bottleneck_dim {self.bottleneck_dim} exceeds backbone width {min(widths)}")

    def raw_dim(self, modality: str) -> int:
        return self.raw_dim_image if modality == "image" else self.raw_dim_text

    def width(self, modality: str) -> int:
        return self.backbone_width_image if modality == "image" else self.backbone_width_text


def _check_modality(modality: str) -> None:
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality '{modality}'")


class FrozenBackbone:
    """Seeded, never-trained feature extractors for both modalities."""

    def __init__(self, config: EncoderConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = seed
        self.input_proj: dict[str, Array] = {}
        self.mixers: dict[str, list[Array]] = {}
        self.native_proj: dict[str, Array] = {}
        for idx, modality in enumerate(MODALITIES):
            rng = seeding.derive_rng(seed, seeding.BACKBONE, idx)
            raw, width = config.raw_dim(modality), config.width(modality)
            self.input_proj[modality] = rng.normal(0.0, raw ** -0.5, (raw, width))
            self.mixers[modality] = [
                rng.normal(0.0, 0.5 * width ** -0.5, (width, width))
                for _ in range(config.num_blocks)]
            self.native_proj[modality] = rng.normal(0.0, width ** -0.5, (width, config.embed_dim))


# ---------------------------------------------------------------------------
# trainable parameters
# ---------------------------------------------------------------------------

@dataclass
class TrainableParams:
    """Name-keyed float64 arrays with a fixed flattening order."""

    config: EncoderConfig
    arrays: dict[str, Array] = field(default_factory=dict)

    def copy(self) -> "TrainableParams":
        return TrainableParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, int]]:
    """Parameter names and shapes in canonical flattening order."""
    config.validate()
    shapes: dict[str, tuple[int, int]] = {}
    for modality in MODALITIES:
        width = config.width(modality)
        for b in range(config.num_blocks):
            shapes[f"{modality}.block{b}.down"] = (width, config.bottleneck_dim)
            if config.include_bias:
                shapes[f"{modality}.block{b}.down_bias"] = (1, config.bottleneck_dim)
            shapes[f"{modality}.block{b}.up"] = (config.bottleneck_dim, width)
            if config.include_bias:
                shapes[f"{modality}.block{b}.up_bias"] = (1, width)
        d = config.embed_dim
        shapes[f"{modality}.head1"] = (d, d)
        if config.include_bias:
            shapes[f"{modality}.head1_bias"] = (1, d)
        shapes[f"{modality}.head2"] = (d, d)
        if config.include_bias:
            shapes[f"{modality}.head2_bias"] = (1, d)
    return shapes


def init_params(config: EncoderConfig, seed: int) -> TrainableParams:
    """Adapter up-projections start at zero so training begins at the
    frozen-backbone representation; everything else is small uniform noise."""
    rng = seeding.derive_rng(seed, seeding.PARAM_INIT)
    arrays: dict[str, Array] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".up") or name.endswith("_bias"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.uniform(-ADAPTER_INIT_SCALE, ADAPTER_INIT_SCALE, shape)
    return TrainableParams(config, arrays)


def param_count(config: EncoderConfig) -> dict[str, int]:
    """Trainable parameter totals, split into adapters and heads."""
    shapes = param_shapes(config)
    adapters = sum(r * c for name, (r, c) in shapes.items() if ".block" in name)
    heads = sum(r * c for name, (r, c) in shapes.items() if ".head" in name)
    return {"adapters": adapters, "heads": heads, "total": adapters + heads}


# ---------------------------------------------------------------------------
# flat-vector algebra
# ---------------------------------------------------------------------------

def flatten(params: TrainableParams) -> Array:
    order = param_shapes(params.config)
    return np.concatenate([params.arrays[name].ravel() for name in order])


def unflatten(config: EncoderConfig, flat: Array) -> TrainableParams:
    shapes = param_shapes(config)
    total = sum(r * c for r, c in shapes.values())
    flat = np.asarray(flat, dtype=np.float64).ravel()
    if flat.size != total:
        raise ValueError(f"flat vector has {flat.size} entries, expected {total}")
    arrays: dict[str, Array] = {}
    offset = 0
    for name, (r, c) in shapes.items():
        arrays[name] = flat[offset:offset + r * c].reshape(r, c).copy()
        offset += r * c
    return TrainableParams(config, arrays)


def delta(a: TrainableParams, b: TrainableParams) -> TrainableParams:
    """Parameter-shaped difference a - b."""
    if a.arrays.keys() != b.arrays.keys():
        raise ValueError("parameter sets do not share a shape table")
    return TrainableParams(a.config, {k: a.arrays[k] - b.arrays[k] for k in a.arrays})


def axpy(base: TrainableParams,
         updates: list[tuple[float, TrainableParams]]) -> TrainableParams:
    """base + sum(w * delta) accumulated in the order given."""
    out = base.copy()
    for weight, d in updates:
        for name in out.arrays:
            out.arrays[name] += weight * d.arrays[name]
    return out


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def param_inputs(config: EncoderConfig) -> dict[str, ad.Node]:
    """One differentiable graph input per trainable array."""
    return {name: ad.input_(name) for name in param_shapes(config)}


def encode_graph(backbone: FrozenBackbone, modality: str, raw_node: ad.Node,
                 params: Mapping[str, ad.Node]) -> ad.Node:
    """Embedding graph for one modality: B-by-raw rows in, unit rows out."""
    _check_modality(modality)
    config = backbone.config
    h = ad.matmul(raw_node, ad.const(backbone.input_proj[modality]))
    for b in range(config.num_blocks):
        h = ad.add(h, ad.matmul(h, ad.const(backbone.mixers[modality][b])))
        t = ad.matmul(h, params[f"{modality}.block{b}.down"])
        if config.include_bias:
            t = ad.add_rowvec(t, params[f"{modality}.block{b}.down_bias"])
        t = ad.matmul(ad.gelu(t), params[f"{modality}.block{b}.up"])
        if config.include_bias:
            t = ad.add_rowvec(t, params[f"{modality}.block{b}.up_bias"])
        h = ad.add(h, t)
    e = ad.matmul(h, ad.const(backbone.native_proj[modality]))
    m = ad.matmul(e, params[f"{modality}.head1"])
    if config.include_bias:
        m = ad.add_rowvec(m, params[f"{modality}.head1_bias"])
    m = ad.matmul(ad.gelu(m), params[f"{modality}.head2"])
    if config.include_bias:
        m = ad.add_rowvec(m, params[f"{modality}.head2_bias"])
    return ad.normalize_rows(ad.add(e, m))


def encode(params: TrainableParams, backbone: FrozenBackbone, raw: Array,
           modality: str) -> Array:
    """Embed raw rows for one modality; rows are unit-norm float64."""
    _check_modality(modality)
    raw = ad.as_tensor(raw)
    expected = backbone.config.raw_dim(modality)
    if raw.shape[1] != expected:
        raise ValueError(f"{modality} raw dim {raw.shape[1]}, expected {expected}")
    nodes = {name: ad.const(arr) for name, arr in params.arrays.items()
             if name.startswith(modality)}
    graph = encode_graph(backbone, modality, ad.const(raw), nodes)
    return ad.forward(graph)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_params(path, params: TrainableParams) -> None:
    """Write flat parameters with a config header to an .npz file."""
    header = json.dumps(asdict(params.config), sort_keys=True)
    np.savez(path, header=np.frombuffer(header.encode(), dtype=np.uint8),
             flat=flatten(params))


def load_params(path) -> TrainableParams:
    with np.load(path) as blob:
        header = json.loads(bytes(blob["header"]).decode())
        flat = blob["flat"]
    return unflatten(EncoderConfig(**header), flat)

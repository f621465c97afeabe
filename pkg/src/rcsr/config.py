"""Experiment configuration: one flat record covering data synthesis,
the encoder, federation mechanics, and every loss weight, with JSON
loading and field-level validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .losses import LossWeights
from .model import EncoderConfig
from .router import RouterConfig, RouterHyper

MODES = ("fedavg", "fedprox", "rcsr", "rcsr_p")


class ConfigError(ValueError):
    """Invalid configuration; message starts with the offending field."""


@dataclass(frozen=True)
class TrainingConfig:
    # synthetic corpus
    num_classes: int = 20
    per_class: int = 100
    per_class_test: int = 20
    latent_dim: int = 32
    raw_dim_image: int = 64
    raw_dim_text: int = 48
    noise: float = 0.05

    # encoder
    width_image: int = 32
    width_text: int = 24
    blocks: int = 2
    bottleneck: int = 8
    embed_dim: int = 16
    include_bias: bool = False

    # federation
    num_clients: int = 10
    rounds: int = 60
    warmup_rounds: int = 20
    personal_round: int | None = None
    participation: float = 0.5
    missing_rate: float = 0.5
    alpha: float = 0.1
    mode: str = "rcsr"
    master_seed: int = 0
    workers: int = 1

    # local training
    lr: float = 0.01
    batch_size: int = 32
    epochs: int = 1
    temperature: float = 0.07
    anchor_weight: float = 1.0
    align_weight: float = 0.1
    prox_weight: float = 0.01

    # router
    router_layers: int = 2
    router_heads: int = 4
    router_dim: int = 128
    router_lr: float = 1e-3
    pc_image_weight: float = 1.0
    pc_text_weight: float = 1.0
    entropy_weight: float = 0.2
    router_align_weight: float = 0.3
    mask_filled_slots: bool = False

    # fairness game and prototype memory
    eta_q: float = 0.1
    tau_fair: float = 0.1
    proto_momentum: float = 0.9
    fairness_zscore: bool = False
    fairness_entropy_mirror: bool = False
    disable_fairness: bool = False

    # personalization
    lambda_p: float = 0.2

    # evaluation and checkpointing
    eval_interval: int = 10
    holdout_fraction: float = 0.2
    checkpoint_interval: int = 0

    def validate(self) -> None:
        positive_ints = ("num_classes", "per_class", "per_class_test",
                         "latent_dim", "raw_dim_image", "raw_dim_text",
                         "width_image", "width_text", "blocks", "bottleneck",
                         "embed_dim", "num_clients", "batch_size", "epochs",
                         "router_layers", "router_heads", "router_dim",
                         "eval_interval", "workers")
        for field in positive_ints:
            if getattr(self, field) < 1:
                raise ConfigError(f"{field}: must be >= 1, "
                                  f"got {getattr(self, field)}")
        nonnegative = ("noise", "rounds", "warmup_rounds", "anchor_weight",
                       "align_weight", "prox_weight", "router_lr",
                       "pc_image_weight", "pc_text_weight", "entropy_weight",
                       "router_align_weight", "eta_q", "tau_fair",
                       "checkpoint_interval")
        for field in nonnegative:
            if getattr(self, field) < 0:
                raise ConfigError(f"{field}: must be >= 0, "
                                  f"got {getattr(self, field)}")
        if self.mode not in MODES:
            raise ConfigError(f"mode: '{self.mode}' not one of {MODES}")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError(f"participation: must be in (0, 1], "
                              f"got {self.participation}")
        if int(self.participation * self.num_clients) < 1:
            raise ConfigError("participation: selects zero clients "
                              f"({self.participation} of {self.num_clients})")
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ConfigError(f"missing_rate: must be in [0, 1], "
                              f"got {self.missing_rate}")
        if self.alpha <= 0.0:
            raise ConfigError(f"alpha: must be > 0, got {self.alpha}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr: must be > 0, got {self.lr}")
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature: must be > 0, "
                              f"got {self.temperature}")
        if not 0.0 <= self.proto_momentum <= 1.0:
            raise ConfigError(f"proto_momentum: must be in [0, 1], "
                              f"got {self.proto_momentum}")
        if self.lambda_p <= 0.0:
            raise ConfigError(f"lambda_p: must be > 0, got {self.lambda_p}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction: must be in [0, 1), "
                              f"got {self.holdout_fraction}")
        if self.personal_round is not None and self.personal_round < 1:
            raise ConfigError(f"personal_round: must be >= 1 or null, "
                              f"got {self.personal_round}")
        if self.router_dim % self.router_heads != 0:
            raise ConfigError(f"router_dim: {self.router_dim} not divisible "
                              f"by router_heads {self.router_heads}")
        try:
            self.encoder().validate()
        except ValueError as err:
            raise ConfigError(f"encoder: {err}") from err

    # ------------------------------------------------------------------
    # derived views consumed by the other modules
    # ------------------------------------------------------------------

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(raw_dim_image=self.raw_dim_image,
                             raw_dim_text=self.raw_dim_text,
                             backbone_width_image=self.width_image,
                             backbone_width_text=self.width_text,
                             num_blocks=self.blocks,
                             bottleneck_dim=self.bottleneck,
                             embed_dim=self.embed_dim,
                             include_bias=self.include_bias)

    def loss_weights(self) -> LossWeights:
        return LossWeights(temperature=self.temperature,
                           anchor_weight=self.anchor_weight,
                           align_weight=self.align_weight,
                           prox_weight=self.prox_weight)

    def router_config(self) -> RouterConfig:
        return RouterConfig(embed_dim=self.embed_dim,
                            layers=self.router_layers,
                            heads=self.router_heads, dim=self.router_dim)

    def router_hyper(self) -> RouterHyper:
        return RouterHyper(pc_image_weight=self.pc_image_weight,
                           pc_text_weight=self.pc_text_weight,
                           entropy_weight=self.entropy_weight,
                           align_weight=self.router_align_weight,
                           mask_filled_slots=self.mask_filled_slots)

    @property
    def resolved_personal_round(self) -> int:
        if self.personal_round is not None:
            return self.personal_round
        return max(self.rounds // 2, 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainingConfig":
        try:
            updated = dataclasses.replace(self, **changes)
        except TypeError as err:
            raise ConfigError(str(err)) from err
        updated.validate()
        return updated


def from_dict(values: dict) -> TrainingConfig:
    known = {f.name for f in dataclasses.fields(TrainingConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration field")
    config = TrainingConfig(**values)
    config.validate()
    return config


def load_config(path: str | Path) -> TrainingConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err})") from err
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return from_dict(values)

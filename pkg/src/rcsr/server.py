"""Federated orchestration: sampling, the three round phases, weighted
aggregation, prototype memory, and the personalization pass.

Round structure. Phase 1 fans local training out to a worker pool and
joins; every cross-client reduction afterwards runs on the server
thread in ascending client id, so results are bit-reproducible for any
worker count. Phase 2 produces router weights: size-proportional during
warm-up and in the baseline modes, otherwise from the learned router,
which then takes one gradient step. Phase 3 folds the fairness game
into the final weights (post-warm-up, non-baseline, unless ablated),
aggregates deltas, and refreshes the global prototypes by EMA.

All randomness is derived per (purpose, round, client) from the master
seed, so a run can be resumed from a checkpoint without replaying
earlier rounds.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from . import client as client_mod
from . import data as data_mod
from . import fairness as fair_mod
from . import model as model_mod
from . import personalize as pz
from . import router as router_mod
from . import seeding
from .config import TrainingConfig, from_dict

Array = np.ndarray
log = logging.getLogger(__name__)

PROBE_SAMPLES = 256
BASELINE_MODES = ("fedavg", "fedprox")
PERSONAL_LR_FACTOR = 0.1


@dataclass
class RoundRecord:
    """Everything one round emitted, for the metrics stream."""

    round_index: int
    selected: list[int]
    router_weights: Array
    q_snapshot: Array
    fused_weights: Array
    client_losses: dict[int, float]
    mean_loss: float
    router_loss: float | None
    weight_entropy: float
    q_entropy: float
    wall_time: float
    metrics: data_mod.RetrievalMetrics | None = None


@dataclass
class ServerState:
    config: TrainingConfig
    params: model_mod.TrainableParams
    backbone: model_mod.FrozenBackbone
    train_set: data_mod.SyntheticDataset
    test_set: data_mod.SyntheticDataset
    clients: list[client_mod.ClientState]
    holdout_sets: dict[int, data_mod.SyntheticDataset]
    prototypes: dict[str, Array]
    fairness: fair_mod.FairnessState
    router: router_mod.RouterParams
    prev_update: Array | None = None
    loss_sum: float = 0.0
    loss_count: int = 0
    adapters: dict[int, pz.PersonalAdapter] = field(default_factory=dict)
    strengths: dict[int, float] = field(default_factory=dict)
    round_index: int = 0

    @property
    def loss_scale(self) -> float | None:
        if self.loss_count == 0:
            return None
        return self.loss_sum / self.loss_count


def entropy_of(weights: Array) -> float:
    weights = np.asarray(weights, dtype=np.float64)
    mass = weights[weights > 0.0]
    return float(-(mass * np.log(mass)).sum())


def sample_clients(num_clients: int, participation: float,
                   rng: np.random.Generator) -> list[int]:
    count = int(math.floor(participation * num_clients))
    if count < 1:
        raise ValueError(f"participation {participation} of {num_clients} "
                         "clients selects nobody")
    chosen = rng.choice(num_clients, size=count, replace=False)
    return sorted(int(c) for c in chosen)


def aggregate(params: model_mod.TrainableParams,
              deltas: Mapping[int, model_mod.TrainableParams],
              weights: Mapping[int, float]) -> model_mod.TrainableParams:
    """Weighted delta application in ascending client id."""
    if set(deltas) != set(weights):
        raise ValueError("delta ids and weight ids disagree")
    pairs = [(weights[cid], deltas[cid]) for cid in sorted(deltas)]
    return model_mod.axpy(params, pairs)


def ema_update(prototypes: Mapping[str, Array],
               stats: list[client_mod.ClientStatistics], weights: Array,
               momentum: float) -> dict[str, Array]:
    """EMA toward the weighted client prototypes, re-normalized to unit
    length; a degenerate result keeps the previous prototype."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum {momentum} outside [0, 1]")
    updated = {}
    for modality in ("image", "text"):
        mixed = np.zeros_like(ad.as_tensor(prototypes[modality]))
        for w, stat in zip(weights, stats):
            mixed = mixed + w * ad.as_tensor(getattr(stat,
                                                     f"proto_{modality}"))
        candidate = (momentum * ad.as_tensor(prototypes[modality])
                     + (1.0 - momentum) * mixed)
        norm = float(np.linalg.norm(candidate))
        if norm < ad.NORM_EPS:
            log.warning("%s prototype EMA degenerated (norm %.2e); keeping "
                        "previous", modality, norm)
            updated[modality] = ad.as_tensor(prototypes[modality]).copy()
        else:
            updated[modality] = candidate / norm
    return updated


def initial_prototypes(params: model_mod.TrainableParams,
                       backbone: model_mod.FrozenBackbone,
                       train_set: data_mod.SyntheticDataset,
                       seed: int) -> dict[str, Array]:
    """Directions of a seeded probe batch through the initial model."""
    rng = seeding.derive_rng(seed, seeding.PROBE)
    count = min(PROBE_SAMPLES, len(train_set))
    idx = rng.choice(len(train_set), size=count, replace=False)
    protos = {}
    for modality, raw in (("image", train_set.image_raw),
                          ("text", train_set.text_raw)):
        z = model_mod.encode(params, backbone, raw[idx], modality)
        protos[modality] = client_mod.compute_prototype(z)
    return protos


def init_state(config: TrainingConfig) -> ServerState:
    config.validate()
    enc = config.encoder()
    seed = config.master_seed
    train_set = data_mod.generate_dataset(
        config.num_classes, config.per_class, config.latent_dim,
        config.raw_dim_image, config.raw_dim_text, config.noise, seed,
        split="train")
    test_set = data_mod.generate_dataset(
        config.num_classes, config.per_class_test, config.latent_dim,
        config.raw_dim_image, config.raw_dim_text, config.noise, seed,
        split="test")
    indices = data_mod.dirichlet_partition(train_set.labels,
                                           config.num_clients, config.alpha,
                                           seed)
    types = data_mod.assign_modalities(config.num_clients,
                                       config.missing_rate, seed)
    clients = []
    holdout_sets = {}
    for cid in range(config.num_clients):
        train_idx, hold_idx = data_mod.split_holdout(
            indices[cid], config.holdout_fraction, seed, cid)
        clients.append(client_mod.ClientState(cid, types[cid], train_idx,
                                              hold_idx))
        holdout_sets[cid] = train_set.subset(hold_idx)

    params = model_mod.init_params(enc, seed)
    backbone = model_mod.FrozenBackbone(enc, seed)
    return ServerState(
        config=config, params=params, backbone=backbone, train_set=train_set,
        test_set=test_set, clients=clients, holdout_sets=holdout_sets,
        prototypes=initial_prototypes(params, backbone, train_set, seed),
        fairness=fair_mod.init_fairness(
            config.num_clients, eta_q=config.eta_q, tau_fair=config.tau_fair,
            zscore=config.fairness_zscore,
            entropy_mirror=config.fairness_entropy_mirror),
        router=router_mod.init_router(config.router_config(), seed))


# ---------------------------------------------------------------------------
# one round
# ---------------------------------------------------------------------------

def _train_one(state: ServerState, cid: int, round_index: int):
    config = state.config
    settings = client_mod.LocalSettings(
        lr=config.lr, batch_size=config.batch_size, epochs=config.epochs,
        weights=config.loss_weights(), master_seed=config.master_seed,
        round_index=round_index)
    result = client_mod.local_train(state.params, state.backbone,
                                    state.train_set, state.clients[cid],
                                    state.prototypes, settings)
    stats = client_mod.build_statistics(
        state.clients[cid], result.params, state.params, state.backbone,
        state.train_set, state.prototypes, result.mean_loss, result.steps,
        state.prev_update)
    delta = model_mod.delta(result.params, state.params)
    return cid, delta, stats


def run_round(state: ServerState, round_index: int,
              pool: ThreadPoolExecutor | None = None) -> RoundRecord:
    started = time.perf_counter()
    config = state.config
    rng = seeding.derive_rng(config.master_seed, seeding.SAMPLING,
                             round_index)
    selected = sample_clients(config.num_clients, config.participation, rng)

    # Phase 1: local training, joined before any reduction
    def train_or_skip(cid):
        try:
            return _train_one(state, cid, round_index)
        except client_mod.EmptyClientError:
            return cid
    if pool is None:
        raw_results = map(train_or_skip, selected)
    else:
        raw_results = pool.map(train_or_skip, selected)
    outcomes = {}
    for item in raw_results:
        if isinstance(item, tuple):
            outcomes[item[0]] = item
    skipped = [cid for cid in selected if cid not in outcomes]

    survivors = sorted(outcomes)
    if not survivors:
        log.warning("round %d: every selected client was skipped; no-op",
                    round_index)
        q = state.fairness.q.copy()
        return RoundRecord(round_index, selected, np.zeros(0), q, np.zeros(0),
                           {}, float("nan"), None, 0.0, entropy_of(q),
                           time.perf_counter() - started)

    deltas = {cid: outcomes[cid][1] for cid in survivors}
    stats = [outcomes[cid][2] for cid in survivors]
    losses = {cid: outcomes[cid][2].loss for cid in survivors}

    # running mean of reported losses, refreshed before routing
    state.loss_sum += sum(losses[cid] for cid in survivors)
    state.loss_count += len(survivors)

    # Phase 2: aggregation weights
    baseline = config.mode in BASELINE_MODES
    warming = round_index <= config.warmup_rounds
    router_loss_value: float | None = None
    if baseline or warming:
        sizes = np.array([state.clients[cid].train_indices.size
                          for cid in survivors], dtype=np.float64)
        router_weights = sizes / sizes.sum()
    else:
        router_weights = router_mod.route(state.router, stats,
                                          state.loss_scale)
        state.router, router_loss_value = router_mod.router_step(
            state.router, stats, state.prototypes, config.router_hyper(),
            config.router_lr, state.loss_scale)

    # Phase 3: fairness fusion, aggregation, prototype EMA
    if baseline or warming or config.disable_fairness:
        fused = router_weights.copy()
    else:
        scaled = [(cid, fair_mod.normalize_loss(
            losses[cid], state.clients[cid].modality_type, state.fairness))
            for cid in survivors]
        fair_mod.update_q(state.fairness, scaled)
        fair_mod.update_group_means(
            state.fairness,
            [(state.clients[cid].modality_type, losses[cid])
             for cid in survivors])
        fused = fair_mod.fuse_weights(router_weights, state.fairness.q,
                                      survivors)

    before = model_mod.flatten(state.params)
    state.params = aggregate(state.params,
                             deltas, dict(zip(survivors, fused)))
    state.prev_update = model_mod.flatten(state.params) - before
    state.prototypes = ema_update(state.prototypes, stats, fused,
                                  config.proto_momentum)

    # personalization pass; adapters stay on their clients
    if (config.mode == "rcsr_p"
            and round_index >= config.resolved_personal_round):
        for position, cid in enumerate(survivors):
            adapter = state.adapters.get(cid)
            if adapter is None:
                adapter = pz.init_adapter(config.embed_dim, cid,
                                          config.master_seed)
            settings = pz.PersonalSettings(
                lr=PERSONAL_LR_FACTOR * config.lr,
                batch_size=config.batch_size,
                temperature=config.temperature, lambda_p=config.lambda_p,
                master_seed=config.master_seed, round_index=round_index)
            weight = float(router_weights[position])
            state.adapters[cid] = pz.personal_finetune(
                adapter, state.params, state.backbone, state.train_set,
                state.clients[cid], state.prototypes, weight, settings)
            state.strengths[cid] = pz.personalization_strength(
                weight, config.lambda_p)

    mean_loss = float(np.mean([losses[cid] for cid in survivors]))
    record = RoundRecord(
        round_index=round_index, selected=selected,
        router_weights=router_weights, q_snapshot=state.fairness.q.copy(),
        fused_weights=fused, client_losses=losses, mean_loss=mean_loss,
        router_loss=router_loss_value,
        weight_entropy=entropy_of(router_weights),
        q_entropy=entropy_of(state.fairness.q),
        wall_time=time.perf_counter() - started)
    if skipped:
        log.warning("round %d skipped empty clients %s", round_index, skipped)

    if (round_index % config.eval_interval == 0
            or round_index == config.rounds):
        record.metrics = evaluate_state(state)
    state.round_index = round_index
    return record


def evaluate_state(state: ServerState) -> data_mod.RetrievalMetrics:
    """Global retrieval on the test split; per-client recall on each
    client's holdout, with personal adapters applied where they exist."""
    transforms = None
    if state.adapters:
        transforms = {}
        for cid, adapter in state.adapters.items():
            strength = state.strengths.get(cid, 0.0)
            transforms[cid] = _personal_transform(adapter, strength)
    return data_mod.evaluate(state.params, state.backbone, state.test_set,
                             ks=(1, 5, 10), client_slices=state.holdout_sets,
                             transforms=transforms)


def _personal_transform(adapter: pz.PersonalAdapter, strength: float):
    def apply(z: Array, modality: str) -> Array:
        return pz.personalize_embedding(adapter, z, modality, strength)
    return apply


def run_training(config: TrainingConfig,
                 state: ServerState | None = None,
                 progress: Callable[[RoundRecord], None] | None = None,
                 ) -> tuple[ServerState, list[RoundRecord],
                            data_mod.RetrievalMetrics]:
    """Drive ``rounds`` federated rounds and a final evaluation.

    Passing ``state`` resumes from its ``round_index + 1``; otherwise a
    fresh state is built from the config.
    """
    if state is None:
        state = init_state(config)
    history: list[RoundRecord] = []
    workers = config.workers
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for round_index in range(state.round_index + 1, config.rounds + 1):
            try:
                record = run_round(state, round_index, pool)
            except Exception as err:
                raise RuntimeError(f"round {round_index}: {err}") from err
            history.append(record)
            if progress is not None:
                progress(record)
    finally:
        if pool is not None:
            pool.shutdown()
    final = evaluate_state(state)
    return state, history, final


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, state: ServerState) -> None:
    payload: dict[str, Array] = {
        "theta": model_mod.flatten(state.params),
        "round_index": np.array([state.round_index]),
        "proto_image": ad.as_tensor(state.prototypes["image"]),
        "proto_text": ad.as_tensor(state.prototypes["text"]),
        "q": state.fairness.q,
        "loss_scale": np.array([state.loss_sum, float(state.loss_count)]),
    }
    header = {
        "config": state.config.to_dict(),
        "group_mean": state.fairness.group_mean,
        "group_sq": state.fairness.group_sq,
        "strengths": {str(k): v for k, v in state.strengths.items()},
    }
    payload["header"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    if state.prev_update is not None:
        payload["prev_update"] = state.prev_update
    for name, arr in state.router.arrays.items():
        payload[f"router.{name}"] = arr
    for cid, adapter in state.adapters.items():
        for name, arr in adapter.arrays.items():
            payload[f"adapter.{cid}.{name}"] = arr
    np.savez(path, **payload)


def load_checkpoint(path: str | Path) -> ServerState:
    with np.load(path) as blob:
        header = json.loads(bytes(blob["header"]).decode("utf-8"))
        config = from_dict(header["config"])
        state = init_state(config)
        state.params = model_mod.unflatten(config.encoder(), blob["theta"])
        state.round_index = int(blob["round_index"][0])
        state.prototypes = {"image": blob["proto_image"],
                            "text": blob["proto_text"]}
        state.fairness.q = blob["q"]
        state.fairness.group_mean = dict(header["group_mean"])
        state.fairness.group_sq = dict(header["group_sq"])
        state.loss_sum = float(blob["loss_scale"][0])
        state.loss_count = int(blob["loss_scale"][1])
        if "prev_update" in blob:
            state.prev_update = blob["prev_update"]
        for name in state.router.arrays:
            state.router.arrays[name] = blob[f"router.{name}"]
        adapters: dict[int, pz.PersonalAdapter] = {}
        for key in blob.files:
            if not key.startswith("adapter."):
                continue
            _, cid_text, name = key.split(".", 2)
            cid = int(cid_text)
            if cid not in adapters:
                adapters[cid] = pz.init_adapter(config.embed_dim, cid,
                                                config.master_seed)
            adapters[cid].arrays[name] = blob[key]
        state.adapters = adapters
        state.strengths = {int(k): float(v)
                           for k, v in header["strengths"].items()}
    return state

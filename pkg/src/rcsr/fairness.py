"""Adversarial client weighting and its fusion with router weights.

The server keeps a simplex vector q over all clients. Each round the
selected clients' losses are normalized by a per-modality-group running
mean, q receives a multiplicative exponentiated-gradient update on the
selected entries, and the final aggregation weights are the elementwise
product of router weights and the selected slice of q, renormalized.

Call order within a round matters and is fixed: normalize each selected
client's loss in ascending client id (the first observation of a group
seeds that group's running mean), update q from those normalized losses,
then fold the round's raw losses into the running means.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Array = np.ndarray
log = logging.getLogger(__name__)

GROUPS = ("paired", "image_only", "text_only")
MEAN_FLOOR = 1e-12
EXP_CLAMP = 50.0
GROUP_MOMENTUM = 0.9


@dataclass
class FairnessState:
    """q over all clients plus per-group running loss statistics.

    ``zscore`` switches loss normalization from the ratio form to a
    z-score against the group's running mean and deviation;
    ``entropy_mirror`` switches the q update to the entropy-regularized
    mirror-ascent rule q_k^(1 - eta*tau) * exp(eta * normalized loss).
    """

    q: Array
    eta_q: float = 0.1
    tau_fair: float = 0.1
    zscore: bool = False
    entropy_mirror: bool = False
    group_mean: dict[str, float] = field(default_factory=dict)
    group_sq: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if self.q.ndim != 1 or self.q.size < 1:
            raise ValueError("q must be a non-empty vector")
        if np.any(self.q <= 0.0) or abs(self.q.sum() - 1.0) > 1e-9:
            raise ValueError("q must lie strictly inside the simplex")
        for group in self.group_mean:
            if group not in GROUPS:
                raise ValueError(f"unknown modality group '{group}'")


def init_fairness(num_clients: int, eta_q: float = 0.1, tau_fair: float = 0.1,
                  zscore: bool = False,
                  entropy_mirror: bool = False) -> FairnessState:
    if num_clients < 1:
        raise ValueError("need at least one client")
    return FairnessState(q=np.full(num_clients, 1.0 / num_clients),
                         eta_q=eta_q, tau_fair=tau_fair, zscore=zscore,
                         entropy_mirror=entropy_mirror)


def normalize_loss(loss: float, group: str, state: FairnessState) -> float:
    """Loss relative to its modality group's running mean.

    The first observation of a group seeds the running mean with the loss
    itself, so it normalizes to 1 (or 0 in z-score mode).
    """
    if group not in GROUPS:
        raise ValueError(f"unknown modality group '{group}'")
    if not math.isfinite(loss):
        raise ValueError(f"non-finite loss {loss} for group '{group}'")
    if group not in state.group_mean:
        state.group_mean[group] = float(loss)
        state.group_sq[group] = float(loss) ** 2
        return 0.0 if state.zscore else 1.0
    mean = state.group_mean[group]
    if state.zscore:
        var = max(state.group_sq[group] - mean * mean, 0.0)
        deviation = math.sqrt(var)
        if deviation <= MEAN_FLOOR:
            return 0.0
        return (loss - mean) / deviation
    if mean <= MEAN_FLOOR:
        log.warning("group '%s' running mean %.3e clamped to %.0e",
                    group, mean, MEAN_FLOOR)
        mean = MEAN_FLOOR
    return loss / mean


def update_group_means(state: FairnessState,
                       observations: Sequence[tuple[str, float]]) -> None:
    """Fold one round's (group, loss) pairs into the running means."""
    by_group: dict[str, list[float]] = {}
    for group, loss in observations:
        if group not in GROUPS:
            raise ValueError(f"unknown modality group '{group}'")
        by_group.setdefault(group, []).append(float(loss))
    for group, values in by_group.items():
        mean = float(np.mean(values))
        sq = float(np.mean(np.square(values)))
        if group not in state.group_mean:
            state.group_mean[group] = mean
            state.group_sq[group] = sq
        else:
            state.group_mean[group] = (GROUP_MOMENTUM * state.group_mean[group]
                                       + (1.0 - GROUP_MOMENTUM) * mean)
            state.group_sq[group] = (GROUP_MOMENTUM * state.group_sq[group]
                                     + (1.0 - GROUP_MOMENTUM) * sq)


def update_q(state: FairnessState,
             selected: Sequence[tuple[int, float]]) -> None:
    """Exponentiated-gradient step on the selected entries of q, then
    renormalization over all clients."""
    ids = [client_id for client_id, _ in selected]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids in fairness update")
    q = state.q.copy()
    for client_id, scaled in selected:
        if client_id < 0 or client_id >= q.size:
            raise ValueError(f"client id {client_id} out of range")
        exponent = state.eta_q * scaled
        if abs(exponent) > EXP_CLAMP:
            log.warning("fairness exponent %.3e clamped to +/-%g for "
                        "client %d", exponent, EXP_CLAMP, client_id)
            exponent = math.copysign(EXP_CLAMP, exponent)
        factor = math.exp(exponent)
        if state.entropy_mirror:
            power = 1.0 - state.eta_q * state.tau_fair
            q[client_id] = q[client_id] ** power * factor
        else:
            q[client_id] = q[client_id] * factor
    state.q = q / q.sum()


def fuse_weights(router_weights: Array, q: Array,
                 selected_ids: Sequence[int]) -> Array:
    """Final aggregation weights: router weights times the selected slice
    of q, renormalized onto the simplex."""
    router_weights = np.asarray(router_weights, dtype=np.float64)
    selected_ids = list(selected_ids)
    if router_weights.ndim != 1 or len(selected_ids) != router_weights.size:
        raise ValueError("router weights and selected ids disagree in length")
    if len(set(selected_ids)) != len(selected_ids):
        raise ValueError("duplicate client ids in fusion")
    restricted = q[np.asarray(selected_ids, dtype=np.intp)]
    product = router_weights * restricted
    denominator = product.sum()
    if denominator < 1e-300:
        raise ValueError(f"fusion denominator {denominator} underflowed")
    return product / denominator

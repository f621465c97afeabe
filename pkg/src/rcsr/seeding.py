"""Deterministic RNG derivation.

Every random draw in the simulator comes from a stream derived as
``(master_seed, purpose, *indices)`` so results never depend on call
order, worker count, or module import order.
"""

from __future__ import annotations

import numpy as np

DATA_TRAIN = 1
DATA_TEST = 2
PARTITION = 3
MODALITY = 4
BACKBONE = 5
PARAM_INIT = 6
ROUTER_INIT = 7
SAMPLING = 8
CLIENT_TRAIN = 9
PROBE = 10
HOLDOUT = 11
PERSONAL = 12


def derive_rng(master_seed: int, purpose: int, *indices: int) -> np.random.Generator:
    """A fresh generator for (seed, purpose, indices...)."""
    return np.random.default_rng(np.random.SeedSequence((master_seed, purpose) + tuple(indices)))

"""Synthetic paired corpus, non-IID partitioning, and retrieval metrics.

Items are drawn from a latent class process: a class center plus
Gaussian jitter, pushed through two fixed random maps to produce the
"image" and "text" raw views of the same underlying item. Train and
test splits share the centers and maps but never an item.

Partitioning follows the usual Dirichlet-over-classes recipe; modality
assignment marks a seeded subset of clients as image-only or text-only.
Recall@K breaks score ties in favor of the lower gallery index and is
reported in percent.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import model as model_mod
from . import seeding

Array = np.ndarray
log = logging.getLogger(__name__)

MIN_CLIENT_EVAL_PAIRS = 5

# centers and cross-modal maps are shared by every split of one corpus
_DATA_PROCESS = 0


@dataclass
class SyntheticDataset:
    """Paired raw features with class labels; row i is one item."""

    image_raw: Array
    text_raw: Array
    labels: Array
    latents: Array

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, indices: Array) -> "SyntheticDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return SyntheticDataset(self.image_raw[idx], self.text_raw[idx],
                                self.labels[idx], self.latents[idx])


@dataclass
class Partition:
    """Disjoint client index sets over a dataset plus modality types."""

    client_indices: list[Array]
    modality_types: list[str]


def generate_dataset(num_classes: int, per_class: int, latent_dim: int,
                     raw_dim_image: int, raw_dim_text: int, noise: float,
                     seed: int, split: str = "train") -> SyntheticDataset:
    """Draw a paired dataset; 'train' and 'test' share the latent process."""
    if num_classes < 1 or per_class < 1:
        raise ValueError("num_classes and per_class must be >= 1")
    if latent_dim < 1 or raw_dim_image < 1 or raw_dim_text < 1:
        raise ValueError("dimensions must be >= 1")
    if noise < 0:
        raise ValueError(f"noise must be nonnegative, got {noise}")
    if split not in ("train", "test"):
        raise ValueError(f"unknown split '{split}'")

    process_rng = seeding.derive_rng(seed, seeding.DATA_TRAIN, _DATA_PROCESS)
    centers = process_rng.normal(size=(num_classes, latent_dim))
    map_image = process_rng.normal(0.0, latent_dim ** -0.5, (latent_dim, raw_dim_image))
    map_text = process_rng.normal(0.0, latent_dim ** -0.5, (latent_dim, raw_dim_text))

    purpose = seeding.DATA_TRAIN if split == "train" else seeding.DATA_TEST
    item_rng = seeding.derive_rng(seed, purpose, 1)
    labels = np.repeat(np.arange(num_classes), per_class)
    latents = centers[labels] + noise * item_rng.normal(size=(labels.size, latent_dim))
    image_raw = latents @ map_image + noise * item_rng.normal(size=(labels.size, raw_dim_image))
    text_raw = latents @ map_text + noise * item_rng.normal(size=(labels.size, raw_dim_text))
    return SyntheticDataset(image_raw, text_raw, labels, latents)


def save_dataset(path, dataset: SyntheticDataset, seed: int) -> None:
    header = json.dumps({"num_items": len(dataset),
                         "num_classes": int(dataset.labels.max()) + 1,
                         "raw_dim_image": dataset.image_raw.shape[1],
                         "raw_dim_text": dataset.text_raw.shape[1],
                         "latent_dim": dataset.latents.shape[1],
                         "seed": seed}, sort_keys=True)
    np.savez(path, header=np.frombuffer(header.encode(), dtype=np.uint8),
             image_raw=dataset.image_raw, text_raw=dataset.text_raw,
             labels=dataset.labels, latents=dataset.latents)


def load_dataset(path) -> tuple[SyntheticDataset, dict]:
    with np.load(path) as blob:
        header = json.loads(bytes(blob["header"]).decode())
        dataset = SyntheticDataset(blob["image_raw"], blob["text_raw"],
                                   blob["labels"], blob["latents"])
    return dataset, header


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

def dirichlet_partition(labels: Array, num_clients: int, alpha: float,
                        seed: int) -> list[Array]:
    """Split item indices across clients with Dirichlet class proportions.

    Every item is assigned exactly once; per class, fractional counts are
    floored and the remainder goes to the largest share. A client that
    ends up empty takes one item from the currently largest client.
    """
    labels = np.asarray(labels)
    if num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {num_clients}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if num_clients > labels.size:
        raise ValueError(f"cannot give {num_clients} clients at least one of "
                         f"{labels.size} items")
    rng = seeding.derive_rng(seed, seeding.PARTITION)
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, alpha))
        counts = np.floor(props * idx.size).astype(int)
        counts[int(props.argmax())] += idx.size - counts.sum()
        offset = 0
        for k in range(num_clients):
            buckets[k].extend(idx[offset:offset + counts[k]].tolist())
            offset += counts[k]
    for k in range(num_clients):
        if buckets[k]:
            continue
        donor = max(range(num_clients), key=lambda j: len(buckets[j]))
        take = int(rng.integers(len(buckets[donor])))
        buckets[k].append(buckets[donor].pop(take))
    return [np.array(sorted(b), dtype=int) for b in buckets]


def assign_modalities(num_clients: int, missing_rate: float,
                      seed: int) -> list[str]:
    """Mark round(missing_rate * N) clients single-modality, split evenly."""
    if not 0.0 <= missing_rate <= 1.0:
        raise ValueError(f"missing_rate must be in [0, 1], got {missing_rate}")
    rng = seeding.derive_rng(seed, seeding.MODALITY)
    num_single = int(np.floor(missing_rate * num_clients + 0.5))
    num_image = num_single // 2
    num_text = num_single // 2
    if num_single % 2 == 1:
        if rng.integers(2) == 0:
            num_image += 1
        else:
            num_text += 1
    order = rng.permutation(num_clients)
    types = ["paired"] * num_clients
    for k in order[:num_image]:
        types[k] = "image_only"
    for k in order[num_image:num_single]:
        types[k] = "text_only"
    return types


def split_holdout(indices: Array, fraction: float, seed: int,
                  client_id: int) -> tuple[Array, Array]:
    """Per-client train/holdout split; the holdout gets floor(n * fraction)."""
    rng = seeding.derive_rng(seed, seeding.HOLDOUT, client_id)
    perm = rng.permutation(indices)
    cut = int(np.floor(indices.size * fraction))
    return np.sort(perm[cut:]), np.sort(perm[:cut])


# ---------------------------------------------------------------------------
# retrieval metrics
# ---------------------------------------------------------------------------

def recall_at_k(similarity: Array, truth: Array, k: int) -> float:
    """Percent of queries whose true item ranks in the top k.

    Ties are broken toward the lower gallery index, so a score equal to
    the true item's counts against it only when it sits at a lower index.
    """
    similarity = np.asarray(similarity, dtype=np.float64)
    if similarity.ndim != 2:
        raise ValueError("similarity must be a 2-D matrix")
    truth = np.asarray(truth, dtype=int)
    if truth.shape != (similarity.shape[0],):
        raise ValueError("one truth column index per query row is required")
    if truth.min() < 0 or truth.max() >= similarity.shape[1]:
        raise ValueError("truth indices out of gallery range")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    true_scores = similarity[np.arange(truth.size), truth][:, None]
    better = (similarity > true_scores).sum(axis=1)
    col = np.arange(similarity.shape[1])[None, :]
    tied_lower = ((similarity == true_scores) & (col < truth[:, None])).sum(axis=1)
    hits = (better + tied_lower) < k
    return float(100.0 * hits.mean())


@dataclass
class RetrievalMetrics:
    """Global recall table plus per-client fairness statistics."""

    i2t: dict[int, float]
    t2i: dict[int, float]
    mean_recall: float
    per_client_r1: dict[int, float] = field(default_factory=dict)
    excluded_clients: list[int] = field(default_factory=list)
    fairness_std: float = 0.0
    worst_r1: float = 0.0
    r1_gap: float = 0.0


def _pairwise_recalls(z_image: Array, z_text: Array,
                      ks: Sequence[int]) -> tuple[dict[int, float], dict[int, float]]:
    sims = z_image @ z_text.T
    truth = np.arange(z_image.shape[0])
    i2t = {k: recall_at_k(sims, truth, k) for k in ks}
    t2i = {k: recall_at_k(sims.T, truth, k) for k in ks}
    return i2t, t2i


def evaluate(params: "model_mod.TrainableParams", backbone: "model_mod.FrozenBackbone",
             test_set: SyntheticDataset, ks: Sequence[int] = (1, 5, 10),
             client_slices: Mapping[int, SyntheticDataset] | None = None,
             transforms: Mapping[int, Callable[[Array, str], Array]] | None = None,
             ) -> RetrievalMetrics:
    """Global retrieval on the shared test set plus per-client local recall.

    ``client_slices`` maps client id to that client's holdout items;
    slices with fewer than MIN_CLIENT_EVAL_PAIRS pairs are excluded from
    the fairness statistics and logged. ``transforms`` optionally maps a
    client id to an embedding transform (personalization hook).
    """
    z_image = model_mod.encode(params, backbone, test_set.image_raw, "image")
    z_text = model_mod.encode(params, backbone, test_set.text_raw, "text")
    i2t, t2i = _pairwise_recalls(z_image, z_text, ks)
    values = list(i2t.values()) + list(t2i.values())
    metrics = RetrievalMetrics(i2t=i2t, t2i=t2i, mean_recall=float(np.mean(values)))

    if client_slices is None:
        return metrics
    for client_id in sorted(client_slices):
        klice = client_slices[client_id]
        if len(klice) < MIN_CLIENT_EVAL_PAIRS:
            metrics.excluded_clients.append(client_id)
            log.warning("client %d holdout has %d pairs (< %d), excluded from "
                        "fairness stats", client_id, len(klice), MIN_CLIENT_EVAL_PAIRS)
            continue
        zi = model_mod.encode(params, backbone, klice.image_raw, "image")
        zt = model_mod.encode(params, backbone, klice.text_raw, "text")
        if transforms is not None and client_id in transforms:
            zi = transforms[client_id](zi, "image")
            zt = transforms[client_id](zt, "text")
        local_i2t, local_t2i = _pairwise_recalls(zi, zt, (1,))
        metrics.per_client_r1[client_id] = (local_i2t[1] + local_t2i[1]) / 2.0
    if metrics.per_client_r1:
        scores = np.array(list(metrics.per_client_r1.values()))
        metrics.fairness_std = float(scores.std())
        metrics.worst_r1 = float(scores.min())
        metrics.r1_gap = float(scores.max() - scores.min())
    return metrics

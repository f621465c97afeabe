"""Dataset generation, partitioning, and retrieval-metric verification."""

import logging

import numpy as np
import pytest

from rcsr import data, model


def gen(seed=0, split="train", **overrides):
    kwargs = dict(num_classes=20, per_class=25, latent_dim=32,
                  raw_dim_image=64, raw_dim_text=48, noise=0.5, seed=seed)
    kwargs.update(overrides)
    return data.generate_dataset(split=split, **kwargs)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def test_generation_is_deterministic():
    a, b = gen(seed=7), gen(seed=7)
    np.testing.assert_array_equal(a.image_raw, b.image_raw)
    np.testing.assert_array_equal(a.text_raw, b.text_raw)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_zero_noise_collapses_classes():
    d = gen(noise=0.0, per_class=4)
    for cls in range(20):
        block = d.latents[d.labels == cls]
        assert (block == block[0]).all()
        raws = d.image_raw[d.labels == cls]
        assert (raws == raws[0]).all()


def test_train_and_test_share_the_latent_process():
    train = gen(noise=0.0, split="train", per_class=2)
    test = gen(noise=0.0, split="test", per_class=3)
    # with zero jitter, items are exactly the class centers in both splits
    np.testing.assert_array_equal(train.latents[train.labels == 5][0],
                                  test.latents[test.labels == 5][0])


def test_splits_do_not_reuse_item_noise():
    train = gen(split="train", per_class=5)
    test = gen(split="test", per_class=5)
    assert not np.array_equal(train.image_raw, test.image_raw)


def test_class_centers_are_spread_out():
    d = gen(noise=0.0, per_class=1)
    centers = d.latents / np.linalg.norm(d.latents, axis=1, keepdims=True)
    cos = centers @ centers.T
    off_diag = cos[~np.eye(20, dtype=bool)]
    assert np.abs(off_diag).mean() < 0.5


def test_generation_rejects_bad_arguments():
    with pytest.raises(ValueError):
        gen(num_classes=0)
    with pytest.raises(ValueError):
        gen(noise=-0.1)
    with pytest.raises(ValueError):
        gen(split="validation")


def test_dataset_save_load_round_trip(tmp_path):
    d = gen(per_class=3)
    path = tmp_path / "corpus.npz"
    data.save_dataset(path, d, seed=0)
    back, header = data.load_dataset(path)
    np.testing.assert_array_equal(back.image_raw, d.image_raw)
    np.testing.assert_array_equal(back.labels, d.labels)
    assert header["num_classes"] == 20 and header["seed"] == 0


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

def test_single_client_gets_everything():
    d = gen(per_class=4)
    parts = data.dirichlet_partition(d.labels, 1, alpha=0.1, seed=0)
    assert len(parts) == 1
    np.testing.assert_array_equal(parts[0], np.arange(len(d)))


def test_partition_is_disjoint_and_covers():
    d = gen()
    parts = data.dirichlet_partition(d.labels, 10, alpha=0.1, seed=3)
    merged = np.concatenate(parts)
    assert merged.size == len(d)
    assert np.unique(merged).size == len(d)
    assert all(p.size >= 1 for p in parts)


def test_large_alpha_is_nearly_uniform():
    d = gen()
    parts = data.dirichlet_partition(d.labels, 10, alpha=1000.0, seed=0)
    sizes = np.array([p.size for p in parts])
    assert np.abs(sizes - sizes.mean()).max() <= 0.2 * sizes.mean()


def test_small_alpha_concentrates_classes():
    d = gen()
    parts = data.dirichlet_partition(d.labels, 10, alpha=0.1, seed=0)
    dominant = []
    for p in parts:
        counts = np.bincount(d.labels[p], minlength=20)
        dominant.append(counts.max() / p.size)
    assert max(dominant) > 0.5


def test_every_client_nonempty_even_when_starved():
    labels = np.zeros(12, dtype=int)  # a single class, heavily contested
    parts = data.dirichlet_partition(labels, 12, alpha=0.05, seed=1)
    assert all(p.size == 1 for p in parts)


def test_partition_rejections():
    labels = np.zeros(4, dtype=int)
    with pytest.raises(ValueError, match="alpha"):
        data.dirichlet_partition(labels, 2, alpha=0.0, seed=0)
    with pytest.raises(ValueError, match="at least one"):
        data.dirichlet_partition(labels, 5, alpha=0.1, seed=0)


def test_partition_deterministic():
    d = gen()
    a = data.dirichlet_partition(d.labels, 8, alpha=0.3, seed=5)
    b = data.dirichlet_partition(d.labels, 8, alpha=0.3, seed=5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


# ---------------------------------------------------------------------------
# modality assignment
# ---------------------------------------------------------------------------

def test_modality_extremes():
    assert data.assign_modalities(6, 0.0, seed=0) == ["paired"] * 6
    types = data.assign_modalities(6, 1.0, seed=0)
    assert types.count("paired") == 0
    assert types.count("image_only") == 3 and types.count("text_only") == 3


def test_modality_half_rate_thirty_clients():
    types = data.assign_modalities(30, 0.5, seed=0)
    singles = [t for t in types if t != "paired"]
    assert len(singles) == 15
    images, texts = singles.count("image_only"), singles.count("text_only")
    assert {images, texts} == {7, 8}


def test_modality_rejects_bad_rate():
    with pytest.raises(ValueError, match="missing_rate"):
        data.assign_modalities(5, 1.2, seed=0)


def test_holdout_split_sizes():
    idx = np.arange(40, 80)
    train, hold = data.split_holdout(idx, 0.2, seed=0, client_id=3)
    assert hold.size == 8 and train.size == 32
    assert np.intersect1d(train, hold).size == 0
    np.testing.assert_array_equal(np.union1d(train, hold), idx)
    single_train, single_hold = data.split_holdout(np.array([5]), 0.2, 0, 0)
    assert single_train.size == 1 and single_hold.size == 0


# ---------------------------------------------------------------------------
# recall@K
# ---------------------------------------------------------------------------

def recall_oracle(similarity, truth, k):
    """Sort-based reference: stable argsort of negated scores."""
    hits = 0
    for i in range(similarity.shape[0]):
        order = np.argsort(-similarity[i], kind="stable")
        rank = int(np.flatnonzero(order == truth[i])[0])
        hits += rank < k
    return 100.0 * (hits / similarity.shape[0])


def test_recall_identity_and_reversed():
    eye = np.eye(4)
    truth = np.arange(4)
    assert data.recall_at_k(eye, truth, 1) == 100.0
    assert data.recall_at_k(-eye + 1, truth, 1) == 0.0
    assert data.recall_at_k(-eye + 1, truth, 4) == 100.0


def test_recall_tie_breaks_toward_lower_index():
    sims = np.array([[1.0, 1.0, 0.0],
                     [1.0, 1.0, 0.0]])
    truth = np.array([0, 1])
    # query 0's true item is at index 0: the tie at index 1 does not outrank it
    # query 1's true item is at index 1: the tie at index 0 does
    assert data.recall_at_k(sims, truth, 1) == 50.0


def test_recall_matches_sort_oracle_exactly():
    rng = np.random.default_rng(200)
    for trial in range(1000):
        q = int(rng.integers(1, 8))
        g = int(rng.integers(1, 10))
        if trial % 2 == 0:  # quantized scores force plenty of ties
            sims = rng.integers(0, 4, size=(q, g)).astype(float)
        else:
            sims = rng.normal(size=(q, g))
        truth = rng.integers(0, g, size=q)
        k = int(rng.integers(1, g + 2))
        assert data.recall_at_k(sims, truth, k) == recall_oracle(sims, truth, k)


def test_recall_rejections():
    sims = np.eye(3)
    with pytest.raises(ValueError, match="k must"):
        data.recall_at_k(sims, np.arange(3), 0)
    with pytest.raises(ValueError, match="range"):
        data.recall_at_k(sims, np.array([0, 1, 3]), 1)
    with pytest.raises(ValueError, match="per query"):
        data.recall_at_k(sims, np.arange(2), 1)


# ---------------------------------------------------------------------------
# end-to-end evaluation
# ---------------------------------------------------------------------------

def build_model(seed=0):
    config = model.EncoderConfig()
    backbone = model.FrozenBackbone(config, seed=seed)
    params = model.init_params(config, seed=seed)
    return params, backbone


def test_untrained_model_sits_in_the_chance_band():
    recalls = []
    for seed in range(5):
        test_set = gen(seed=seed, split="test", per_class=25)
        params, backbone = build_model(seed=seed)
        metrics = data.evaluate(params, backbone, test_set, ks=(1,))
        recalls.append((metrics.i2t[1] + metrics.t2i[1]) / 2.0)
    chance = 100.0 / 500
    assert np.mean(recalls) <= 3.0 * chance


def test_evaluate_excludes_tiny_slices_and_logs(caplog):
    test_set = gen(split="test", per_class=2)
    params, backbone = build_model()
    tiny = data.SyntheticDataset(test_set.image_raw[:3], test_set.text_raw[:3],
                                 test_set.labels[:3], test_set.latents[:3])
    ok = data.SyntheticDataset(test_set.image_raw[:10], test_set.text_raw[:10],
                               test_set.labels[:10], test_set.latents[:10])
    with caplog.at_level(logging.WARNING):
        metrics = data.evaluate(params, backbone, test_set, ks=(1,),
                                client_slices={0: tiny, 1: ok})
    assert metrics.excluded_clients == [0]
    assert set(metrics.per_client_r1) == {1}
    assert "excluded" in caplog.text


def test_fairness_stats_on_equal_clients():
    test_set = gen(split="test", per_class=2)
    params, backbone = build_model()
    klice = data.SyntheticDataset(test_set.image_raw[:8], test_set.text_raw[:8],
                                  test_set.labels[:8], test_set.latents[:8])
    metrics = data.evaluate(params, backbone, test_set, ks=(1,),
                            client_slices={0: klice, 1: klice})
    assert metrics.fairness_std == 0.0
    assert metrics.r1_gap == 0.0
    assert metrics.worst_r1 == list(metrics.per_client_r1.values())[0]


def test_transforms_change_only_their_client():
    test_set = gen(split="test", per_class=3)
    params, backbone = build_model()
    klice = data.SyntheticDataset(test_set.image_raw[:12], test_set.text_raw[:12],
                                  test_set.labels[:12], test_set.latents[:12])
    rng = np.random.default_rng(0)
    shuffler = rng.permutation(12)

    def scramble(z, modality):
        return z[shuffler] if modality == "image" else z

    base = data.evaluate(params, backbone, test_set, ks=(1,),
                         client_slices={0: klice, 1: klice})
    moved = data.evaluate(params, backbone, test_set, ks=(1,),
                          client_slices={0: klice, 1: klice},
                          transforms={0: scramble})
    assert moved.per_client_r1[1] == base.per_client_r1[1]
    assert moved.per_client_r1[0] != base.per_client_r1[0]

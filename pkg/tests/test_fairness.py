"""Fairness game tests: loss normalization, the exponentiated-gradient
update with its hand-computed example, and weight fusion."""

import math

import numpy as np
import pytest

from rcsr import fairness as fair


def test_first_observation_normalizes_to_one():
    state = fair.init_fairness(4)
    assert fair.normalize_loss(2.7, "paired", state) == 1.0
    # the running mean was seeded, so a doubled loss now maps to 2
    assert fair.normalize_loss(5.4, "paired", state) == pytest.approx(2.0)


def test_loss_equal_to_running_mean_gives_one():
    state = fair.init_fairness(4)
    state.group_mean["image_only"] = 0.8
    state.group_sq["image_only"] = 0.8 ** 2
    assert fair.normalize_loss(0.8, "image_only", state) == pytest.approx(1.0)


def test_tiny_running_mean_is_clamped():
    state = fair.init_fairness(4)
    state.group_mean["text_only"] = 1e-15
    state.group_sq["text_only"] = 0.0
    value = fair.normalize_loss(1.0, "text_only", state)
    assert value == pytest.approx(1.0 / 1e-12)


def test_normalize_rejects_bad_inputs():
    state = fair.init_fairness(4)
    with pytest.raises(ValueError, match="group"):
        fair.normalize_loss(1.0, "audio", state)
    with pytest.raises(ValueError, match="finite"):
        fair.normalize_loss(float("nan"), "paired", state)


def test_group_means_follow_ema():
    state = fair.init_fairness(4)
    fair.update_group_means(state, [("paired", 1.0), ("paired", 3.0)])
    assert state.group_mean["paired"] == pytest.approx(2.0)
    fair.update_group_means(state, [("paired", 4.0)])
    assert state.group_mean["paired"] == pytest.approx(0.9 * 2.0 + 0.1 * 4.0)
    # untouched group stays uninitialized
    assert "text_only" not in state.group_mean


def test_update_q_hand_example():
    # N=2 both selected, q=(0.5,0.5), scaled losses (1,0), eta=0.1:
    # q1 = e^0.1 / (e^0.1 + 1)
    state = fair.init_fairness(2, eta_q=0.1)
    fair.update_q(state, [(0, 1.0), (1, 0.0)])
    expected = math.exp(0.1) / (math.exp(0.1) + 1.0)
    assert state.q[0] == pytest.approx(expected, abs=1e-12)
    assert state.q[0] == pytest.approx(0.52498, abs=5e-6)


def test_update_q_zero_step_size_is_identity():
    state = fair.init_fairness(5, eta_q=0.0)
    before = state.q.copy()
    fair.update_q(state, [(0, 3.0), (2, -1.0)])
    assert np.allclose(state.q, before, atol=1e-15)


def test_equal_scaled_losses_full_selection_cancels():
    state = fair.init_fairness(6)
    before = state.q.copy()
    fair.update_q(state, [(k, 1.3) for k in range(6)])
    assert np.allclose(state.q, before, atol=1e-12)


def test_partial_selection_grows_selected_mass_uniformly():
    state = fair.init_fairness(4, eta_q=0.1)
    fair.update_q(state, [(0, 1.0), (1, 1.0)])
    # selected pair keeps equal weight, both above the unselected pair
    assert state.q[0] == pytest.approx(state.q[1], abs=1e-15)
    assert state.q[2] == pytest.approx(state.q[3], abs=1e-15)
    assert state.q[0] > state.q[2]
    factor = math.exp(0.1)
    expected_selected = 0.25 * factor / (0.5 * factor + 0.5)
    assert state.q[0] == pytest.approx(expected_selected, abs=1e-12)


def test_update_q_is_monotone_in_scaled_loss():
    rng = np.random.default_rng(0)
    for trial in range(20):
        n = int(rng.integers(3, 10))
        state = fair.init_fairness(n)
        state.q = rng.uniform(0.1, 1.0, n)
        state.q /= state.q.sum()
        losses = rng.normal(size=n)
        before = state.q.copy()
        fair.update_q(state, list(enumerate(losses)))
        for a in range(n):
            for b in range(n):
                if losses[a] > losses[b]:
                    assert (state.q[a] / state.q[b]
                            > before[a] / before[b])


def test_q_stays_on_simplex_under_many_updates():
    rng = np.random.default_rng(1)
    state = fair.init_fairness(8)
    for _ in range(200):
        count = int(rng.integers(1, 9))
        ids = rng.choice(8, size=count, replace=False)
        fair.update_q(state, [(int(i), float(rng.normal(scale=3.0)))
                              for i in ids])
        assert np.all(state.q > 0.0)
        assert abs(state.q.sum() - 1.0) < 1e-9


def test_exponent_clamp_keeps_q_finite():
    state = fair.init_fairness(3)
    fair.update_q(state, [(0, 1e6), (1, -1e6)])
    assert np.all(np.isfinite(state.q))
    assert np.all(state.q > 0.0)
    assert abs(state.q.sum() - 1.0) < 1e-9


def test_update_q_rejects_duplicates_and_bad_ids():
    state = fair.init_fairness(3)
    with pytest.raises(ValueError, match="duplicate"):
        fair.update_q(state, [(0, 1.0), (0, 2.0)])
    with pytest.raises(ValueError, match="out of range"):
        fair.update_q(state, [(3, 1.0)])


def test_fuse_uniform_router_restricts_q():
    q = np.array([0.1, 0.2, 0.3, 0.4])
    fused = fair.fuse_weights(np.array([0.5, 0.5]), q, [1, 3])
    assert np.allclose(fused, [0.2 / 0.6, 0.4 / 0.6], atol=1e-15)


def test_fuse_uniform_q_returns_router_weights():
    q = np.full(4, 0.25)
    router = np.array([0.2, 0.8])
    fused = fair.fuse_weights(router, q, [0, 2])
    assert np.allclose(fused, router, atol=1e-15)


def test_fuse_matches_brute_force():
    rng = np.random.default_rng(2)
    for trial in range(50):
        n = int(rng.integers(3, 12))
        k = int(rng.integers(1, n + 1))
        q = rng.uniform(0.05, 1.0, n)
        q /= q.sum()
        ids = sorted(rng.choice(n, size=k, replace=False).tolist())
        router = rng.uniform(0.05, 1.0, k)
        router /= router.sum()
        fused = fair.fuse_weights(router, q, ids)
        brute = np.array([router[j] * q[i] for j, i in enumerate(ids)])
        brute /= brute.sum()
        assert np.allclose(fused, brute, atol=1e-12)
        assert abs(fused.sum() - 1.0) < 1e-9
        assert np.all(fused > 0.0)


def test_fuse_rejects_underflow_and_shape_mismatch():
    q = np.array([1e-305, 1e-305, 1.0 - 2e-305])
    with pytest.raises(ValueError, match="underflow"):
        fair.fuse_weights(np.array([0.5, 0.5]), q, [0, 1])
    with pytest.raises(ValueError, match="length"):
        fair.fuse_weights(np.array([0.5, 0.5]), q, [0, 1, 2])
    with pytest.raises(ValueError, match="duplicate"):
        fair.fuse_weights(np.array([0.5, 0.5]), q, [0, 0])


def test_zscore_variant():
    state = fair.init_fairness(4, zscore=True)
    # first observation seeds the stats and reports 0
    assert fair.normalize_loss(2.0, "paired", state) == 0.0
    # zero deviation still reports 0
    assert fair.normalize_loss(5.0, "paired", state) == 0.0
    fair.update_group_means(state, [("paired", 1.0), ("paired", 3.0)])
    mean = state.group_mean["paired"]
    dev = math.sqrt(state.group_sq["paired"] - mean * mean)
    value = fair.normalize_loss(4.0, "paired", state)
    assert value == pytest.approx((4.0 - mean) / dev, abs=1e-12)


def test_entropy_mirror_variant():
    state = fair.init_fairness(2, eta_q=0.1, tau_fair=0.1,
                               entropy_mirror=True)
    fair.update_q(state, [(0, 1.0), (1, 0.0)])
    power = 1.0 - 0.1 * 0.1
    raw = np.array([0.5 ** power * math.exp(0.1), 0.5 ** power])
    assert np.allclose(state.q, raw / raw.sum(), atol=1e-15)


def test_state_validation():
    state = fair.init_fairness(3)
    state.validate()
    state.q = np.array([0.5, 0.6, -0.1])
    with pytest.raises(ValueError, match="simplex"):
        state.validate()

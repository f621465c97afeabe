"""Personal adapter tests: strength schedule, identity-at-init, local
fine-tuning that leaves the shared parameters untouched."""

import numpy as np
import pytest

from rcsr import autodiff as ad
from rcsr import data as data_mod
from rcsr import model as model_mod
from rcsr import personalize as pz
from rcsr.client import ClientState


def small_setup(seed=0, modality="paired"):
    cfg = model_mod.EncoderConfig(raw_dim_image=12, raw_dim_text=10,
                                  backbone_width_image=8,
                                  backbone_width_text=6, num_blocks=1,
                                  bottleneck_dim=4, embed_dim=8)
    backbone = model_mod.FrozenBackbone(cfg, seed)
    params = model_mod.init_params(cfg, seed)
    dataset = data_mod.generate_dataset(num_classes=4, per_class=10,
                                        latent_dim=6, raw_dim_image=12,
                                        raw_dim_text=10, noise=0.05,
                                        seed=seed)
    client = ClientState(client_id=0, modality_type=modality,
                         train_indices=np.arange(20),
                         holdout_indices=np.arange(20, 25))
    protos = {"image": unit_row(np.arange(1.0, 9.0)),
              "text": unit_row(np.arange(8.0, 0.0, -1.0))}
    return cfg, backbone, params, dataset, client, protos


def unit_row(v):
    v = np.asarray(v, dtype=np.float64)[None, :]
    return v / np.linalg.norm(v)


def test_strength_schedule_endpoints():
    lam = 0.2
    assert pz.personalization_strength(0.5, lam) == lam
    assert pz.personalization_strength(0.0, lam) == min(lam * 1.5, 0.5)
    assert pz.personalization_strength(0.0, lam) == pytest.approx(0.3)
    assert pz.personalization_strength(0.0, 0.4) == 0.5


def test_strength_monotone_and_flat():
    lam = 0.2
    grid = np.linspace(0.0, 1.0, 101)
    values = [pz.personalization_strength(float(w), lam) for w in grid]
    for lo, hi in zip(values, values[1:]):
        assert hi <= lo + 1e-15
    flat = [v for w, v in zip(grid, values) if w >= 0.5]
    assert all(v == lam for v in flat)


def test_strength_rejects_bad_inputs():
    with pytest.raises(ValueError, match="router weight"):
        pz.personalization_strength(1.5, 0.2)
    with pytest.raises(ValueError, match="lambda_p"):
        pz.personalization_strength(0.5, 0.0)


def test_zero_strength_and_zero_up_projection_are_identity():
    rng = np.random.default_rng(0)
    adapter = pz.init_adapter(8, client_id=3, seed=1)
    z = rng.normal(size=(5, 8))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    out = pz.personalize_embedding(adapter, z, "image", strength=0.0)
    assert np.array_equal(out, z) and out is not z

    adapter.arrays["image.w2"][:] = 0.0
    out = pz.personalize_embedding(adapter, z, "image", strength=0.3)
    assert np.array_equal(out, z)


def test_personalized_rows_are_unit_norm():
    rng = np.random.default_rng(1)
    adapter = pz.init_adapter(8, client_id=0, seed=2)
    for name in adapter.arrays:
        adapter.arrays[name] = rng.normal(scale=0.5,
                                          size=adapter.arrays[name].shape)
    z = rng.normal(size=(7, 8))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    out = pz.personalize_embedding(adapter, z, "text", strength=0.5)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)
    assert not np.allclose(out, z)


def test_fresh_adapter_is_approximate_identity():
    rng = np.random.default_rng(2)
    adapter = pz.init_adapter(16, client_id=5, seed=3)
    z = rng.normal(size=(10, 16))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    for modality in ("image", "text"):
        out = pz.personalize_embedding(adapter, z, modality, strength=0.5)
        agreement = np.sum(out * z, axis=1)
        assert np.all(agreement > 1.0 - 1e-8)


def test_personalize_rejects_mismatches():
    adapter = pz.init_adapter(8, client_id=0, seed=0)
    z = np.ones((2, 6)) / np.sqrt(6.0)
    with pytest.raises(ValueError, match="dim"):
        pz.personalize_embedding(adapter, z, "image", 0.2)
    with pytest.raises(ValueError, match="modality"):
        pz.personalize_embedding(adapter, np.ones((1, 8)), "audio", 0.2)


def test_init_adapter_deterministic_and_scaled():
    a = pz.init_adapter(8, client_id=2, seed=9)
    b = pz.init_adapter(8, client_id=2, seed=9)
    other = pz.init_adapter(8, client_id=3, seed=9)
    for name in a.arrays:
        assert np.array_equal(a.arrays[name], b.arrays[name])
    assert any(not np.array_equal(a.arrays[n], other.arrays[n])
               for n in a.arrays)
    assert np.abs(a.arrays["image.w2"]).max() <= 1e-4
    assert np.abs(a.arrays["image.w1"]).max() <= 0.05
    assert a.hidden_dim == 4


def anchor_value(adapter, params, backbone, dataset, client, proto, modality,
                 strength):
    raw = dataset.image_raw if modality == "image" else dataset.text_raw
    z = model_mod.encode(params, backbone, raw[client.train_indices], modality)
    tilde = pz.personalize_embedding(adapter, z, modality, strength)
    return float(1.0 - np.mean(tilde @ proto[0]))


def test_finetune_zero_lr_is_identity():
    _, backbone, params, dataset, client, protos = small_setup()
    adapter = pz.init_adapter(8, client_id=0, seed=0)
    settings = pz.PersonalSettings(lr=0.0, batch_size=8, temperature=0.07,
                                   lambda_p=0.2, master_seed=0, round_index=5)
    out = pz.personal_finetune(adapter, params, backbone, dataset, client,
                               protos, router_weight=0.3, settings=settings)
    for name in adapter.arrays:
        assert np.array_equal(out.arrays[name], adapter.arrays[name])


def test_finetune_leaves_shared_parameters_untouched():
    _, backbone, params, dataset, client, protos = small_setup()
    before = {k: v.copy() for k, v in params.arrays.items()}
    adapter = pz.init_adapter(8, client_id=0, seed=0)
    settings = pz.PersonalSettings(lr=0.01, batch_size=8, temperature=0.07,
                                   lambda_p=0.2, master_seed=0, round_index=1)
    pz.personal_finetune(adapter, params, backbone, dataset, client, protos,
                         router_weight=0.1, settings=settings)
    for name in before:
        assert np.array_equal(params.arrays[name], before[name])


def test_finetune_reduces_single_modality_anchor_loss():
    _, backbone, params, dataset, client, protos = small_setup(
        modality="image_only")
    adapter = pz.init_adapter(8, client_id=0, seed=0)
    strength = pz.personalization_strength(0.1, 0.2)
    before = anchor_value(adapter, params, backbone, dataset, client,
                          protos["text"], "image", strength)
    for round_index in range(1, 6):
        settings = pz.PersonalSettings(lr=0.005, batch_size=8,
                                       temperature=0.07, lambda_p=0.2,
                                       master_seed=0,
                                       round_index=round_index)
        adapter = pz.personal_finetune(adapter, params, backbone, dataset,
                                       client, protos, router_weight=0.1,
                                       settings=settings)
    after = anchor_value(adapter, params, backbone, dataset, client,
                         protos["text"], "image", strength)
    assert after < before


def test_anchor_gradient_vanishes_at_the_prototype():
    protos = {"text": unit_row(np.arange(8.0, 0.0, -1.0)),
              "image": unit_row(np.arange(1.0, 9.0))}
    loss_node, wrt = pz._personal_graph(("image",), batch=4, strength=0.2,
                                        temperature=0.07,
                                        global_protos=protos)
    adapter = pz.init_adapter(8, client_id=0, seed=1)
    adapter.arrays["image.w2"][:] = 0.0
    bindings = dict(adapter.arrays)
    bindings["z_image"] = np.tile(protos["text"], (4, 1))
    value, grads = ad.value_and_gradient(loss_node, bindings, wrt)
    assert abs(value) < 1e-12
    for name in wrt:
        assert np.abs(grads[name]).max() < 1e-12


def test_personal_graph_gradient_check():
    rng = np.random.default_rng(3)
    protos = {"image": unit_row(rng.normal(size=8)),
              "text": unit_row(rng.normal(size=8))}
    errors = []
    for trial in range(20):
        paired = trial % 2 == 0
        modalities = ("image", "text") if paired else ("text",)
        loss_node, wrt = pz._personal_graph(modalities, batch=4, strength=0.3,
                                            temperature=0.07,
                                            global_protos=protos)
        adapter = pz.init_adapter(8, client_id=trial, seed=4)
        bindings = dict(adapter.arrays)
        for modality in modalities:
            z = rng.normal(size=(4, 8))
            bindings[f"z_{modality}"] = z / np.linalg.norm(z, axis=1,
                                                           keepdims=True)
        errors.append(ad.check_gradients(loss_node, bindings, wrt))
    assert max(errors) <= 1e-4

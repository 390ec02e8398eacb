"""Field model: shapes, initialization health, conditioning, persistence."""

import numpy as np
import pytest

import nisf.autodiff as ad
from nisf.autodiff import Tensor
from nisf.errors import ContractError, DimensionError
from nisf.model import FieldModel, ModelConfig, param_count


def tiny_config(**overrides):
    base = dict(coord_dim=4, latent_dim=8, hidden_width=8, num_res_layers=2,
                num_classes=4)
    base.update(overrides)
    return ModelConfig(**base)


def test_param_count_hand_check():
    # N=2 coords, d=3 latent, width 4, 1 residual layer, M=2 classes:
    #   input projection (2+3)*4 + 4          = 24
    #   residual layer   2 * (4*4 + 4)        = 40
    #   seg head         4*2 + 2              = 10
    #   intensity head   4*1 + 1              = 5
    cfg = ModelConfig(coord_dim=2, latent_dim=3, hidden_width=4,
                      num_res_layers=1, num_classes=2)
    assert param_count(cfg) == 79
    assert FieldModel.init(cfg, seed=0).num_params == 79


def test_param_count_formula_tracks_config():
    for cfg in (ModelConfig(), tiny_config(),
                tiny_config(hidden_width=16, num_res_layers=3)):
        w, L, M = cfg.hidden_width, cfg.num_res_layers, cfg.num_classes
        expect = ((cfg.coord_dim + cfg.latent_dim) * w + w
                  + L * 2 * (w * w + w)
                  + w * M + M + w + 1)
        assert param_count(cfg) == expect


def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(num_classes=1)
    with pytest.raises(ContractError):
        ModelConfig(hidden_width=0)
    with pytest.raises(ContractError):
        ModelConfig(gabor_s0=0.0)


def test_forward_shapes_and_metadata():
    cfg = tiny_config()
    model = FieldModel.init(cfg, seed=1)
    rng = np.random.default_rng(0)
    coords = rng.uniform(0, 1, size=(13, 4))
    coords[4] = [1.2, 0.5, 0.5, 0.5]   # outside the unit cube
    coords[9] = [0.5, -0.01, 0.5, 0.5]
    out = model.forward(coords, rng.normal(scale=0.1, size=cfg.latent_dim))
    assert out.seg_probs.shape == (13, 4)
    assert out.intensity.shape == (13, 1)
    np.testing.assert_array_equal(np.nonzero(out.out_of_range)[0], [4, 9])
    seg, intensity = out   # unpacks as the (seg, recon) pair
    assert seg is out.seg_probs and intensity is out.intensity


def test_forward_softmax_rows_sum_to_one():
    model = FieldModel.init(tiny_config(), seed=2)
    rng = np.random.default_rng(1)
    out = model.forward(rng.uniform(0, 1, (200, 4)), rng.normal(scale=0.1, size=8))
    np.testing.assert_allclose(out.seg_probs.values.sum(axis=1), 1.0, atol=1e-9)


def test_init_activation_scale_healthy():
    # trunk activations on 1024 uniform points must keep a usable scale:
    # neither collapsed (<0.1) nor exploding (>2.0) at any depth
    cfg = ModelConfig()
    model = FieldModel.init(cfg, seed=0)
    rng = np.random.default_rng(42)
    coords = rng.uniform(0, 1, size=(1024, cfg.coord_dim))
    h = rng.normal(scale=0.1, size=cfg.latent_dim)
    for depth, act in enumerate(model.trunk_activations(coords, h)):
        assert 0.1 <= act.std() <= 2.0, f"layer {depth} std {act.std():.3f}"


def test_init_is_seed_deterministic_and_seed_sensitive():
    cfg = tiny_config()
    a = FieldModel.init(cfg, seed=5)
    b = FieldModel.init(cfg, seed=5)
    c = FieldModel.init(cfg, seed=6)
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()


def test_zero_heads_give_uniform_probs_and_half_intensity():
    cfg = tiny_config()
    model = FieldModel.init(cfg, seed=3)
    params = {n: Tensor(model.params[n].values.copy(), name=n)
              for n in model.param_names()}
    for n in ("w_seg", "b_seg", "w_int", "b_int"):
        params[n] = Tensor(np.zeros_like(params[n].values), name=n)
    zeroed = model.with_params(params)
    rng = np.random.default_rng(2)
    out = zeroed.forward(rng.uniform(0, 1, (17, 4)), rng.normal(size=8))
    np.testing.assert_allclose(out.seg_probs.values, 0.25, atol=1e-15)
    np.testing.assert_allclose(out.intensity.values, 0.5, atol=1e-15)


def test_latent_conditioning_changes_output():
    model = FieldModel.init(tiny_config(), seed=4)
    rng = np.random.default_rng(3)
    coords = rng.uniform(0, 1, (5, 4))
    out1 = model.forward(coords, rng.normal(scale=0.1, size=8))
    out2 = model.forward(coords, rng.normal(scale=0.1, size=8))
    assert not np.allclose(out1.seg_probs.values, out2.seg_probs.values)


def test_latent_shape_contracts():
    model = FieldModel.init(tiny_config(), seed=4)
    coords = np.random.default_rng(0).uniform(0, 1, (5, 4))
    with pytest.raises(DimensionError):
        model.forward(coords, np.zeros(7))
    with pytest.raises(DimensionError):
        model.forward(coords, np.zeros((3, 8)))
    with pytest.raises(DimensionError):
        model.forward(np.zeros((5, 3)), np.zeros(8))


def test_single_row_latent_matches_vector_latent():
    model = FieldModel.init(tiny_config(), seed=8)
    rng = np.random.default_rng(5)
    coords = rng.uniform(0, 1, (9, 4))
    h = rng.normal(scale=0.1, size=8)
    flat = model.forward(coords, h)
    row = model.forward(coords, h.reshape(1, 8))
    assert np.array_equal(flat.seg_probs.values, row.seg_probs.values)
    assert np.array_equal(flat.intensity.values, row.intensity.values)


def test_row_results_independent_of_batch_composition():
    # evaluating a permuted batch permutes results bitwise
    model = FieldModel.init(tiny_config(), seed=7)
    rng = np.random.default_rng(4)
    coords = rng.uniform(0, 1, (11, 4))
    h = rng.normal(scale=0.1, size=8)
    perm = rng.permutation(11)
    out = model.forward(coords, h)
    out_p = model.forward(coords[perm], h)
    assert np.array_equal(out.seg_probs.values[perm], out_p.seg_probs.values)
    assert np.array_equal(out.intensity.values[perm], out_p.intensity.values)


def test_save_load_round_trip_is_bit_exact(tmp_path):
    cfg = tiny_config()
    model = FieldModel.init(cfg, seed=9)
    path = tmp_path / "field.nmodel"
    model.save(path)
    loaded = FieldModel.load(path)
    assert loaded.config == cfg
    assert loaded.checksum() == model.checksum()
    for name in model.param_names():
        assert np.array_equal(loaded.params[name].values, model.params[name].values)


def test_checksum_changes_when_any_parameter_moves():
    model = FieldModel.init(tiny_config(), seed=10)
    before = model.checksum()
    model.params["res1_b2"].values[3] += 1e-12
    assert model.checksum() != before


def test_set_trainable_touches_every_parameter():
    model = FieldModel.init(tiny_config(), seed=11)
    model.set_trainable(True)
    assert all(p.requires_grad for p in model.parameters())
    model.set_trainable(False)
    assert not any(p.requires_grad for p in model.parameters())


def test_config_dict_round_trip():
    cfg = tiny_config(gabor_omega0=12.0)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg

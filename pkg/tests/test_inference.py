"""Latent-only inference: frozen model, traces, early-stop selection."""

import numpy as np
import pytest

from nisf.errors import ContractError, NumericalError
from nisf.inference import (InferConfig, InferenceTrace, analysis_points,
                            decode_segmentation, evaluate_points,
                            full_observations, infer_latent, sample_volume,
                            select_early_stop_steps, validate_prior)
from nisf.model import FieldModel, ModelConfig
from nisf.phantom import generate_subject
from nisf.training import TrainConfig, train_prior
from nisf.volume import VolumeSample, degrade

TINY = ModelConfig(num_res_layers=2, hidden_width=16, latent_dim=8)


def _subject(seed=21, grid=(6, 6, 3, 2)):
    return generate_subject(seed, grid_shape=grid, spacing=(4.0, 4.0, 10.0),
                            subject_id=f"t{seed}")[1]


def _trained_model(subject, epochs=40):
    cfg = TrainConfig(model=TINY, epochs=epochs, lr_prior=1e-3, seed=2, log_every=0)
    result = train_prior([subject], cfg)
    result.model.set_trainable(False)
    return result.model


# -- config -------------------------------------------------------------------


def test_infer_config_defaults_and_steps_property():
    cfg = InferConfig()
    assert cfg.steps_to_run == cfg.max_steps == 1000
    assert InferConfig(max_steps=100, selected_steps=40).steps_to_run == 40
    assert InferConfig(max_steps=100, selected_steps=0).steps_to_run == 0


def test_infer_config_contracts():
    with pytest.raises(ContractError):
        InferConfig(max_steps=-1)
    with pytest.raises(ContractError):
        InferConfig(max_steps=100, selected_steps=101)
    with pytest.raises(ContractError):
        InferConfig(max_steps=100, selected_steps=-5)
    with pytest.raises(ContractError):
        InferConfig(lr_infer=0.0)
    with pytest.raises(ContractError):
        InferConfig(record_cadence=0)
    with pytest.raises(ContractError):
        InferConfig(points_per_step=0)


def test_infer_weights_drop_training_terms():
    w = InferConfig(lambda_h=3e-4).weights()
    assert w.alpha == 1.0
    assert w.lambda_theta_phi == 0.0
    assert w.lambda_h == 3e-4


# -- trace --------------------------------------------------------------------


def test_trace_append_and_csv_without_dice():
    tr = InferenceTrace()
    tr.append(0, 0.7, 0.01)
    tr.append(50, 0.5, 0.02)
    assert not tr.has_dice
    assert tr.csv_header() == "step,recon_loss,latent_norm"
    rows = tr.csv_rows()
    assert rows[0].startswith("0,0.7")
    assert float(rows[1].split(",")[1]) == 0.5


def test_trace_with_dice_adds_columns():
    tr = InferenceTrace()
    tr.append(0, 0.7, 0.01, dice=(0.2, 0.4, 0.6))
    assert tr.has_dice
    assert tr.dice_mean[0] == pytest.approx(0.4)
    header = tr.csv_header()
    assert header.endswith("dice_class1,dice_class2,dice_class3,dice_mean")
    assert len(tr.csv_rows()[0].split(",")) == len(header.split(","))


def test_trace_rejects_non_monotonic_and_non_finite():
    tr = InferenceTrace()
    tr.append(10, 0.5, 0.1)
    with pytest.raises(ContractError):
        tr.append(10, 0.4, 0.1)
    with pytest.raises(NumericalError):
        tr.append(20, float("nan"), 0.1)


# -- frozen evaluation -----------------------------------------------------------


def test_evaluate_points_chunking_is_invisible():
    model = FieldModel.init(TINY, seed=0)
    rng = np.random.default_rng(3)
    coords = rng.uniform(size=(53, 4))
    h = rng.normal(scale=0.1, size=TINY.latent_dim)
    lab_a, probs_a, int_a = evaluate_points(model, h, coords, chunk=7)
    lab_b, probs_b, int_b = evaluate_points(model, h, coords, chunk=10 ** 6)
    assert np.array_equal(lab_a, lab_b)
    assert np.array_equal(probs_a, probs_b)
    assert np.array_equal(int_a, int_b)
    assert probs_a.shape == (53, TINY.num_classes)
    np.testing.assert_allclose(probs_a.sum(axis=1), 1.0, atol=1e-9)


def test_decode_segmentation_is_argmax_of_probs():
    model = FieldModel.init(TINY, seed=1)
    coords = np.random.default_rng(0).uniform(size=(20, 4))
    labels, probs = decode_segmentation(model, np.zeros(TINY.latent_dim), coords)
    assert np.array_equal(labels, np.argmax(probs, axis=1))


def test_full_observations_counts_and_masking():
    vol = _subject()
    coords, inten = full_observations(vol)
    total = np.prod(vol.shape)
    assert coords.shape == (total, 4)
    assert inten.shape == (total, 1)

    masked = degrade(vol, "drop_slices", slices=[1])
    coords_m, _ = full_observations(masked)
    assert coords_m.shape[0] == total - vol.shape[0] * vol.shape[1] * vol.shape[3]

    dark = VolumeSample(vol.subject_id, vol.intensity, vol.labels, vol.spacing,
                        mask=np.zeros(vol.shape, dtype=bool))
    with pytest.raises(ContractError):
        full_observations(dark)


def test_sample_volume_decodes_full_grid():
    vol = _subject()
    model = FieldModel.init(TINY, seed=0)
    h = np.zeros(TINY.latent_dim)
    out = sample_volume(model, h, degrade(vol, "drop_slices", slices=[0]))
    assert out.shape == vol.shape
    assert out.spacing == vol.spacing
    assert out.subject_id == vol.subject_id
    assert out.mask is None and out.phantom is None
    assert out.intensity.min() >= 0.0 and out.intensity.max() <= 1.0
    # frame 0 agrees with a direct point evaluation
    from nisf.training import make_batch
    from dataclasses import replace as dc_replace
    batch = make_batch(dc_replace(vol, mask=None), 0)
    lab, _, inten = evaluate_points(model, h, batch.coords)
    assert np.array_equal(out.labels[:, :, :, 0].reshape(-1), lab)


# -- latent fitting ----------------------------------------------------------------


def test_infer_latent_leaves_model_frozen_and_reduces_loss():
    vol = _subject()
    model = _trained_model(vol)
    checksum = model.checksum()
    coords, inten = full_observations(vol)
    cfg = InferConfig(max_steps=150, lr_infer=1e-2, seed=4, record_cadence=50)
    h, trace = infer_latent(model, coords, inten, cfg)
    assert model.checksum() == checksum
    assert h.values.shape == (TINY.latent_dim,)
    assert trace.steps[0] == 0 and trace.steps[-1] == 150
    assert trace.recon_loss[-1] < trace.recon_loss[0]


def test_infer_latent_runs_exactly_selected_steps():
    vol = _subject()
    model = FieldModel.init(TINY, seed=0)
    coords, inten = full_observations(vol)
    cfg = InferConfig(max_steps=40, selected_steps=7, record_cadence=1, seed=1)
    _, trace = infer_latent(model, coords, inten, cfg)
    assert trace.steps == list(range(8))  # 0 plus one entry per step


def test_infer_latent_zero_steps_returns_seeded_init():
    vol = _subject()
    model = FieldModel.init(TINY, seed=0)
    coords, inten = full_observations(vol)
    cfg = InferConfig(max_steps=10, selected_steps=0, seed=9)
    h_a, trace = infer_latent(model, coords, inten, cfg)
    h_b, _ = infer_latent(model, coords, inten, cfg)
    assert np.array_equal(h_a.values, h_b.values)
    assert trace.steps == [0]
    # N(0, 1e-4) scale: away from zero but small
    assert 0.0 < np.abs(h_a.values).max() < 0.1


def test_infer_latent_seed_changes_init_and_result():
    vol = _subject()
    model = FieldModel.init(TINY, seed=0)
    coords, inten = full_observations(vol)
    a, _ = infer_latent(model, coords, inten, InferConfig(max_steps=5, seed=0))
    b, _ = infer_latent(model, coords, inten, InferConfig(max_steps=5, seed=1))
    assert not np.array_equal(a.values, b.values)


def test_infer_latent_subsampling_matches_full_batch_when_budget_covers():
    vol = _subject()
    model = FieldModel.init(TINY, seed=0)
    coords, inten = full_observations(vol)
    n = coords.shape[0]
    full, _ = infer_latent(model, coords, inten, InferConfig(max_steps=6, seed=3))
    capped, _ = infer_latent(model, coords, inten,
                             InferConfig(max_steps=6, seed=3, points_per_step=n))
    assert np.array_equal(full.values, capped.values)
    sub, trace = infer_latent(model, coords, inten,
                              InferConfig(max_steps=6, seed=3, points_per_step=n // 3))
    assert not np.array_equal(full.values, sub.values)
    # trace still reports the full-observation reconstruction loss
    assert len(trace.recon_loss) == len(trace.steps)


def test_infer_latent_contract_violations():
    model = FieldModel.init(TINY, seed=0)
    good = np.random.default_rng(0).uniform(size=(10, 4))
    inten = np.full((10, 1), 0.5)
    with pytest.raises(ContractError, match="align"):
        infer_latent(model, good, inten[:5], InferConfig(max_steps=1))
    with pytest.raises(ContractError, match="observation"):
        infer_latent(model, good[:0], inten[:0], InferConfig(max_steps=1))
    with pytest.raises(ContractError, match=r"\[0,1\]"):
        infer_latent(model, good + 2.0, inten, InferConfig(max_steps=1))


# -- early stopping ---------------------------------------------------------------


def _trace_with(steps, dice_means):
    tr = InferenceTrace()
    for s, d in zip(steps, dice_means):
        tr.append(s, 0.5, 0.1, dice=(d, d, d))
    return tr


def test_early_stop_picks_the_mean_maximum():
    grid = [0, 50, 100, 150]
    a = _trace_with(grid, [0.1, 0.6, 0.5, 0.4])
    b = _trace_with(grid, [0.1, 0.4, 0.6, 0.3])
    # means: .1, .5, .55, .35 -> 100
    assert select_early_stop_steps([a, b]) == 100


def test_early_stop_tie_breaks_to_the_smaller_step():
    grid = [0, 10, 20]
    tr = _trace_with(grid, [0.2, 0.5, 0.5])
    assert select_early_stop_steps([tr]) == 10


def test_early_stop_contract_violations():
    with pytest.raises(ContractError):
        select_early_stop_steps([])
    plain = InferenceTrace()
    plain.append(0, 0.5, 0.1)
    with pytest.raises(ContractError, match="Dice"):
        select_early_stop_steps([plain])
    a = _trace_with([0, 10], [0.1, 0.2])
    b = _trace_with([0, 20], [0.1, 0.2])
    with pytest.raises(ContractError, match="step grids"):
        select_early_stop_steps([a, b])


# -- analysis points and validation ----------------------------------------------


def test_analysis_points_defaults_to_two_frames():
    vol = _subject(grid=(5, 4, 2, 6))
    coords, labels = analysis_points(vol)
    per_frame = 5 * 4 * 2
    assert coords.shape == (2 * per_frame, 4)
    assert np.array_equal(labels[:per_frame], vol.labels[:, :, :, 0].reshape(-1))
    assert np.array_equal(labels[per_frame:], vol.labels[:, :, :, 3].reshape(-1))


def test_analysis_points_ignores_observation_mask():
    vol = degrade(_subject(), "drop_slices", slices=[1])
    coords, _ = analysis_points(vol, frames=(0,))
    assert coords.shape[0] == vol.shape[0] * vol.shape[1] * vol.shape[2]


def test_analysis_points_deduplicates_frames():
    vol = _subject(grid=(4, 4, 2, 3))
    coords, _ = analysis_points(vol, frames=(2, 0, 2))
    assert coords.shape[0] == 2 * 4 * 4 * 2


def test_validate_prior_produces_aligned_curves():
    subjects = [_subject(30), _subject(31)]
    model = _trained_model(subjects[0], epochs=15)
    cfg = InferConfig(max_steps=20, record_cadence=10, lr_infer=1e-2, seed=5)
    result = validate_prior(model, subjects, cfg)
    assert result.steps == [0, 10, 20]
    assert len(result.traces) == 2
    assert result.mean_dice.shape == (3,)
    assert result.selected_steps in result.steps
    expect = np.mean([result.traces[0].dice_mean, result.traces[1].dice_mean], axis=0)
    assert np.allclose(result.mean_dice, expect)
    with pytest.raises(ContractError):
        validate_prior(model, [], cfg)

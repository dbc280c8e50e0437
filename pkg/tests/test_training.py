"""Split logic, the masking protocol, and the training loop."""

import json
from datetime import datetime, timezone

import numpy as np
import pytest

from physair.data import Dataset
from physair.errors import ValidationError
from physair.geo import SensorMeta
from physair.model import ModelConfig
from physair.training import (
    MaskedSample,
    Normalizer,
    SensorSplit,
    TrainConfig,
    TrainingDiverged,
    build_node_inputs,
    ensemble_predictions,
    epoch_sample_plan,
    evaluate_target_sensor,
    iter_masked_samples,
    leakage_scan,
    load_trained,
    make_split,
    train_model,
    validation_mse,
)

T0 = datetime(2024, 3, 1, tzinfo=timezone.utc)


def toy_dataset(hours=24, n=6, seed=0):
    rng = np.random.default_rng(seed)
    sensors = tuple(
        SensorMeta(f"s{j}", 32.70 + 0.02 * rng.uniform(), -117.1 - 0.02 * rng.uniform())
        for j in range(n))
    base = 15.0 + 8.0 * np.sin(np.arange(hours) / 4.0)[:, None]
    pm25 = np.clip(base + rng.normal(0, 2.0, (hours, n)), 0, None)
    wind = np.column_stack([rng.uniform(2, 12, hours), rng.uniform(0, 360, hours)])
    return Dataset(sensors=sensors, start=T0, pm25=pm25, wind=wind).validate()


def tiny_model_config():
    return ModelConfig(preset=None, n_layers=1, hidden_dim=8)


# ---------------------------------------------------------------------------
# Splits.
# ---------------------------------------------------------------------------

def test_split_counts_follow_ratio_at_41():
    split = make_split([f"s{i}" for i in range(41)], seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == (28, 4, 9)


def test_split_counts_follow_ratio_at_40():
    split = make_split([f"s{i}" for i in range(40)], seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == (27, 4, 9)


def test_split_is_a_disjoint_cover():
    ids = [f"s{i}" for i in range(17)]
    split = make_split(ids, seed=3)
    combined = sorted(split.train + split.val + split.test)
    assert combined == sorted(ids)


def test_split_deterministic_and_seed_sensitive():
    ids = [f"s{i}" for i in range(20)]
    assert make_split(ids, seed=5) == make_split(ids, seed=5)
    assert make_split(ids, seed=5) != make_split(ids, seed=6)


def test_split_rejects_overlap():
    with pytest.raises(ValidationError):
        SensorSplit(("a", "b"), ("b",), ("c",), seed=0).validate()


# ---------------------------------------------------------------------------
# Sampling protocol.
# ---------------------------------------------------------------------------

def test_one_sample_per_hour_each_epoch():
    hours, masked = epoch_sample_plan(2928, 28, seed=0, epoch=1)
    assert len(hours) == 2928 and len(masked) == 2928
    np.testing.assert_array_equal(np.sort(hours), np.arange(2928))
    assert masked.min() >= 0 and masked.max() < 28


def test_masked_sensor_uniform_over_two_sensors():
    counts = np.zeros(2)
    for epoch in range(10):
        _, masked = epoch_sample_plan(1000, 2, seed=1, epoch=epoch)
        counts += np.bincount(masked, minlength=2)
    fractions = counts / counts.sum()
    assert abs(fractions[0] - 0.5) < 0.02


def test_plan_changes_between_epochs_but_not_between_runs():
    a1 = epoch_sample_plan(100, 5, seed=2, epoch=1)
    a2 = epoch_sample_plan(100, 5, seed=2, epoch=2)
    b1 = epoch_sample_plan(100, 5, seed=2, epoch=1)
    assert not np.array_equal(a1[0], a2[0]) or not np.array_equal(a1[1], a2[1])
    np.testing.assert_array_equal(a1[0], b1[0])
    np.testing.assert_array_equal(a1[1], b1[1])


def test_masked_sample_inputs_zeroed_with_flag_zero():
    ds = toy_dataset()
    split = make_split(ds.sensor_ids(), seed=0)
    for sample in iter_masked_samples(ds, split, epoch=1, seed=0):
        pos = sample.node_ids.index(sample.masked_id)
        np.testing.assert_array_equal(sample.inputs[pos], 0.0)
        flags = np.delete(sample.inputs[:, -1], pos)
        np.testing.assert_array_equal(flags, 1.0)
        assert sample.truth == ds.pm25[sample.hour,
                                       ds.sensor_ids().index(sample.masked_id)]


def test_no_test_sensor_ever_enters_training_inputs():
    ds = toy_dataset(hours=16)
    split = make_split(ds.sensor_ids(), seed=0)
    forbidden = set(split.test) | set(split.val)
    for epoch in (1, 2, 3):
        for sample in iter_masked_samples(ds, split, epoch=epoch, seed=0):
            assert not (set(sample.node_ids) & forbidden)
            assert sample.masked_id in split.train


def test_leakage_scan_clean_on_proper_split():
    ds = toy_dataset(hours=16)
    split = make_split(ds.sensor_ids(), seed=0)
    summary = leakage_scan(ds, split, epochs=3, seed=0)
    assert summary == {"epochs": 3, "samples": 48, "clean": True}


def test_leakage_scan_rejects_overlapping_split():
    ds = toy_dataset(hours=8)
    ids = ds.sensor_ids()
    # construct the broken split directly; validate() would refuse it
    bad = SensorSplit(train=tuple(ids[:3]), val=(ids[3],),
                      test=(ids[2], ids[4]), seed=0)
    with pytest.raises(ValidationError, match="integrity"):
        leakage_scan(ds, bad, epochs=1)


def test_window_lookback_clamps_at_series_start():
    values = np.arange(12.0).reshape(6, 2)
    x = build_node_inputs(values, hour=0, masked_pos=1, window=3)
    # hour 0 with window 3 repeats the first hour
    np.testing.assert_array_equal(x[0], [0.0, 0.0, 0.0, 1.0])
    x2 = build_node_inputs(values, hour=4, masked_pos=0, window=3)
    np.testing.assert_array_equal(x2[1], [values[2, 1], values[3, 1],
                                          values[4, 1], 1.0])


def test_normalizer_roundtrip_and_degenerate_std():
    norm = Normalizer.from_values(np.array([2.0, 4.0, 6.0]))
    x = np.array([1.0, 9.0])
    np.testing.assert_allclose(norm.denormalize(norm.normalize(x)), x,
                               atol=1e-12)
    flat = Normalizer.from_values(np.full(5, 3.0))
    assert flat.std == 1.0


# ---------------------------------------------------------------------------
# Training runs (small and fast).
# ---------------------------------------------------------------------------

def run_config(**over):
    base = dict(batch_size=32, lr=1e-3, max_epochs=3, patience=20,
                val_every=1, eval_batch=16, seed=0)
    base.update(over)
    return TrainConfig(**base)


def test_training_descends(tmp_path):
    ds = toy_dataset(hours=48)
    split = make_split(ds.sensor_ids(), seed=0)
    result = train_model(ds, split, tiny_model_config(),
                         run_config(max_epochs=50, val_every=100),
                         tmp_path / "run")
    history = result.state.history
    assert history[49]["train_mse"] < history[0]["train_mse"]


def test_overfits_single_hour(tmp_path):
    ds = toy_dataset(hours=1)
    split = make_split(ds.sensor_ids(), seed=0)
    result = train_model(ds, split, tiny_model_config(),
                         run_config(lr=3e-3, max_epochs=200, val_every=1000),
                         tmp_path / "run")
    assert result.state.history[-1]["train_mse"] < 1e-2


def test_history_bit_identical_across_runs(tmp_path):
    ds = toy_dataset(hours=24)
    split = make_split(ds.sensor_ids(), seed=0)
    r1 = train_model(ds, split, tiny_model_config(), run_config(),
                     tmp_path / "a")
    r2 = train_model(ds, split, tiny_model_config(), run_config(),
                     tmp_path / "b")
    assert json.dumps(r1.state.history) == json.dumps(r2.state.history)
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == \
        (tmp_path / "b" / "best.ckpt").read_bytes()


def test_saved_best_is_minimum_of_recorded_vals(tmp_path):
    ds = toy_dataset(hours=24)
    split = make_split(ds.sensor_ids(), seed=0)
    result = train_model(ds, split, tiny_model_config(),
                         run_config(max_epochs=6), tmp_path / "run")
    vals = [h["val_mse"] for h in result.state.history
            if h["val_mse"] is not None]
    assert result.state.best_val_mse == min(vals)


def test_resume_matches_uninterrupted_run(tmp_path):
    ds = toy_dataset(hours=24)
    split = make_split(ds.sensor_ids(), seed=0)
    full = train_model(ds, split, tiny_model_config(),
                       run_config(max_epochs=4), tmp_path / "full")
    train_model(ds, split, tiny_model_config(), run_config(max_epochs=2),
                tmp_path / "split")
    resumed = train_model(ds, split, tiny_model_config(),
                          run_config(max_epochs=4), tmp_path / "split",
                          resume=True)
    assert json.dumps(full.state.history) == json.dumps(resumed.state.history)
    assert (tmp_path / "full" / "last.ckpt").read_bytes() == \
        (tmp_path / "split" / "last.ckpt").read_bytes()


def test_divergence_aborts_with_diagnostic(tmp_path):
    # Adam moves each weight by roughly lr per step, so an absurd lr
    # pushes the second forward pass past float64 range.
    ds = toy_dataset(hours=8)
    split = make_split(ds.sensor_ids(), seed=0)
    with pytest.raises(TrainingDiverged, match="non-finite loss"), \
            np.errstate(over="ignore", invalid="ignore"):
        train_model(ds, split, tiny_model_config(),
                    run_config(lr=1e150, max_epochs=30, val_every=1000),
                    tmp_path / "run")


def test_missing_train_hours_are_a_data_error(tmp_path):
    ds = toy_dataset(hours=8)
    ds.pm25[3, 0] = np.nan
    split = SensorSplit(train=("s0", "s1", "s2", "s3"), val=("s4",),
                        test=("s5",), seed=0)
    with pytest.raises(ValidationError):
        train_model(ds, split, tiny_model_config(), run_config(),
                    tmp_path / "run")


def test_checkpoint_roundtrip_restores_predictions(tmp_path):
    ds = toy_dataset(hours=12)
    split = make_split(ds.sensor_ids(), seed=0)
    result = train_model(ds, split, tiny_model_config(),
                         run_config(max_epochs=2), tmp_path / "run")
    model, normalizer, split_back, extra = load_trained(result.checkpoint_path)
    assert split_back == split
    assert extra["model_config"]["hidden_dim"] == 8
    preds, truths = evaluate_target_sensor(
        [model], normalizer, ds, split.train, split.test[0],
        np.arange(ds.hours))
    assert preds.shape == truths.shape == (12,)
    assert np.isfinite(preds).all()


def test_validation_mse_finite_and_reproducible(tmp_path):
    ds = toy_dataset(hours=12)
    split = make_split(ds.sensor_ids(), seed=0)
    result = train_model(ds, split, tiny_model_config(),
                         run_config(max_epochs=1), tmp_path / "run")
    model, normalizer, _, _ = load_trained(result.checkpoint_path)
    a = validation_mse([model], normalizer, ds, split)
    b = validation_mse([model], normalizer, ds, split)
    assert np.isfinite(a) and a == b


# ---------------------------------------------------------------------------
# Ensembling.
# ---------------------------------------------------------------------------

def test_ensemble_mean_of_five():
    per_model = np.array([[1.0], [2.0], [3.0], [4.0], [5.0]])
    assert ensemble_predictions(per_model)[0] == 3.0


def test_ensemble_of_identical_models_is_identity():
    row = np.array([7.0, 8.0, 9.0])
    per_model = np.tile(row, (5, 1))
    np.testing.assert_array_equal(ensemble_predictions(per_model), row)


def test_ensemble_rejects_wrong_shape():
    with pytest.raises(ValidationError):
        ensemble_predictions(np.zeros(5))


def test_train_ensemble_per_seed_dirs_and_parallel_equivalence(tmp_path):
    ds = toy_dataset(hours=12)
    split = make_split(ds.sensor_ids(), seed=0)
    cfg = TrainConfig(batch_size=8, lr=1e-3, max_epochs=2, patience=5,
                      eval_batch=8, seed=99)
    from physair.training import train_ensemble
    seq = train_ensemble(ds, split, tiny_model_config(), cfg,
                         tmp_path / "seq", seeds=(0, 1), workers=1)
    assert [r.state.history[0]["epoch"] for r in seq] == [1, 1]
    assert (tmp_path / "seq" / "seed0" / "best.ckpt").exists()
    assert (tmp_path / "seq" / "seed1" / "best.ckpt").exists()
    # different seeds must not share weights
    a = (tmp_path / "seq" / "seed0" / "best.ckpt").read_bytes()
    b = (tmp_path / "seq" / "seed1" / "best.ckpt").read_bytes()
    assert a != b
    par = train_ensemble(ds, split, tiny_model_config(), cfg,
                         tmp_path / "par", seeds=(0, 1), workers=2)
    assert (tmp_path / "par" / "seed0" / "best.ckpt").read_bytes() == a
    assert (tmp_path / "par" / "seed1" / "best.ckpt").read_bytes() == b
    assert [r.checkpoint_path.parent.name for r in par] == ["seed0", "seed1"]

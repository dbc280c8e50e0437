"""Baseline interpolators against hand-built and brute-force oracles."""

import logging

import numpy as np
import pytest

from physair.baselines import (
    GP_JITTER,
    GaussianProcess,
    Idw,
    MeanFill,
    OrdinaryKriging,
    fit_linear_variogram,
    select_gp_hyperparameters,
)
from physair.errors import ValidationError
from physair.geo import SensorMeta, haversine_km

BASE_LAT, BASE_LON = 32.7, -117.15


def random_coords(rng, n, spread=0.15):
    lat = BASE_LAT + rng.uniform(-spread, spread, n)
    lon = BASE_LON + rng.uniform(-spread, spread, n)
    return np.column_stack([lat, lon])


def hav(p, q):
    return haversine_km(SensorMeta("a", p[0], p[1]), SensorMeta("b", q[0], q[1]))


# ---------------------------------------------------------------------------
# Mean fill.
# ---------------------------------------------------------------------------

def test_mean_fill_simple_average():
    est = MeanFill().fit([[0, 0], [0, 1], [1, 0]], [2.0, 4.0, 6.0])
    assert est.predict([[0.5, 0.5]])[0] == 4.0


def test_mean_fill_single_sensor():
    est = MeanFill().fit([[10.0, 20.0]], [3.25])
    np.testing.assert_array_equal(est.predict([[0, 0], [5, 5]]), [3.25, 3.25])


def test_mean_fill_constant_field():
    est = MeanFill().fit([[0, 0], [0, 1], [1, 1], [1, 0]], [7.0] * 4)
    assert np.all(est.predict([[0.2, 0.7]]) == 7.0)


def test_mean_fill_empty_context_raises():
    with pytest.raises(ValidationError):
        MeanFill().fit(np.empty((0, 2)), [])


def test_mean_fill_predict_before_fit_raises():
    with pytest.raises(ValidationError):
        MeanFill().predict([[0, 0]])


# ---------------------------------------------------------------------------
# Inverse distance weighting.
# ---------------------------------------------------------------------------

def test_idw_exact_at_sensor_location():
    coords = [[32.7, -117.1], [32.8, -117.2], [32.9, -117.0]]
    est = Idw().fit(coords, [5.0, 9.0, 1.0])
    assert est.predict([coords[1]])[0] == 9.0


def test_idw_equidistant_pair_averages():
    est = Idw().fit([[0.0, 0.1], [0.0, -0.1]], [3.0, 11.0])
    pred = est.predict([[0.0, 0.0]])[0]
    assert abs(pred - 7.0) < 1e-12


def test_idw_matches_brute_force_weights():
    rng = np.random.default_rng(11)
    coords = random_coords(rng, 4)
    values = rng.uniform(0, 50, 4)
    targets = random_coords(rng, 6)
    est = Idw(power=1.0).fit(coords, values)
    pred = est.predict(targets)
    for t in range(6):
        w = np.array([1.0 / hav(targets[t], coords[i]) for i in range(4)])
        expected = float(w @ values / w.sum())
        assert abs(pred[t] - expected) < 1e-12


def test_idw_power_two_matches_brute_force():
    rng = np.random.default_rng(12)
    coords = random_coords(rng, 5)
    values = rng.uniform(0, 30, 5)
    target = random_coords(rng, 1)
    pred = Idw(power=2.0).fit(coords, values).predict(target)[0]
    w = np.array([hav(target[0], coords[i]) ** -2.0 for i in range(5)])
    assert abs(pred - w @ values / w.sum()) < 1e-12


def test_idw_prediction_stays_in_value_hull():
    rng = np.random.default_rng(13)
    for _ in range(20):
        n = rng.integers(2, 9)
        coords = random_coords(rng, n)
        values = rng.uniform(-5, 40, n)
        preds = Idw().fit(coords, values).predict(random_coords(rng, 5))
        assert np.all(preds >= values.min() - 1e-12)
        assert np.all(preds <= values.max() + 1e-12)


def test_idw_rejects_nonpositive_power():
    with pytest.raises(ValidationError):
        Idw(power=0.0).fit([[0, 0]], [1.0])


def test_idw_empty_context_raises():
    with pytest.raises(ValidationError):
        Idw().fit(np.empty((0, 2)), [])


def test_idw_deterministic():
    rng = np.random.default_rng(14)
    coords = random_coords(rng, 6)
    values = rng.uniform(0, 20, 6)
    targets = random_coords(rng, 3)
    a = Idw().fit(coords, values).predict(targets)
    b = Idw().fit(coords, values).predict(targets)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# Ordinary kriging.
# ---------------------------------------------------------------------------

def test_kriging_weights_sum_to_one():
    rng = np.random.default_rng(21)
    for _ in range(10):
        n = int(rng.integers(3, 12))
        coords = random_coords(rng, n)
        values = rng.uniform(0, 60, n)
        system = OrdinaryKriging().fit(coords, values).solve(random_coords(rng, 4))
        np.testing.assert_allclose(system.weights.sum(axis=1), 1.0, atol=1e-8)
        assert np.isfinite(system.multipliers).all()


def test_kriging_exact_at_sample_point_with_zero_nugget():
    rng = np.random.default_rng(22)
    coords = random_coords(rng, 5)
    values = rng.uniform(0, 40, 5)
    est = OrdinaryKriging(slope=1.0, nugget=0.0).fit(coords, values)
    pred = est.predict(coords[2:3])[0]
    assert abs(pred - values[2]) < 1e-6


def test_kriging_three_point_system_matches_dense_oracle():
    coords = np.array([[32.70, -117.10], [32.76, -117.18], [32.82, -117.06]])
    values = np.array([10.0, 20.0, 15.0])
    target = np.array([[32.75, -117.12]])
    est = OrdinaryKriging(slope=1.0, nugget=0.0).fit(coords, values)
    system = est.solve(target)

    d01 = hav(coords[0], coords[1])
    d02 = hav(coords[0], coords[2])
    d12 = hav(coords[1], coords[2])
    a = np.array([
        [0.0, d01, d02, 1.0],
        [d01, 0.0, d12, 1.0],
        [d02, d12, 0.0, 1.0],
        [1.0, 1.0, 1.0, 0.0],
    ])
    rhs = np.array([hav(target[0], coords[i]) for i in range(3)] + [1.0])
    expected = np.linalg.solve(a, rhs)

    np.testing.assert_allclose(system.weights[0], expected[:3], atol=1e-10)
    assert abs(system.multipliers[0] - expected[3]) < 1e-10
    pred = est.predict(target)[0]
    assert abs(pred - expected[:3] @ values) < 1e-10


def test_kriging_singular_system_falls_back_to_idw(caplog):
    # Two coincident sensors make identical matrix rows.
    coords = [[32.7, -117.1], [32.7, -117.1], [32.8, -117.2]]
    values = [1.0, 2.0, 9.0]
    target = [[32.75, -117.15]]
    est = OrdinaryKriging(slope=1.0, nugget=0.0).fit(coords, values)
    with caplog.at_level(logging.WARNING, logger="physair.baselines"):
        pred = est.predict(target)
    assert "falling back" in caplog.text
    expected = Idw().fit(coords, values).predict(target)
    np.testing.assert_array_equal(pred, expected)


def test_variogram_slope_clamped_nonnegative():
    # Near pairs disagree strongly, far pairs agree: the unconstrained
    # least-squares slope is negative and must clamp to zero.
    coords = np.array([[0.0, 0.0], [0.0, 0.01], [0.0, 0.10], [0.0, 0.11]])
    values = np.array([0.0, 10.0, 0.0, 10.0])
    est = OrdinaryKriging().fit(coords, values)
    assert est.slope_ == 0.0
    assert est.nugget_ >= 0.0


def test_variogram_recovers_linear_trend():
    # Values proportional to longitude give semivariance growing with
    # distance; the fitted slope must be positive.
    rng = np.random.default_rng(23)
    lon = np.sort(rng.uniform(-117.3, -117.0, 12))
    coords = np.column_stack([np.full(12, 32.7), lon])
    values = 100.0 * (lon - lon.min())
    from physair.geo import pairwise_distances_km
    dist = pairwise_distances_km(coords[:, 0], coords[:, 1])
    slope, nugget = fit_linear_variogram(dist, values)
    assert slope > 0.0
    assert nugget >= 0.0


def test_kriging_requires_two_sensors():
    with pytest.raises(ValidationError):
        OrdinaryKriging().fit([[0.0, 0.0]], [1.0])


def test_kriging_get_set_params_roundtrip():
    est = OrdinaryKriging(slope=2.0, nugget=0.5)
    params = est.get_params()
    assert params == {"slope": 2.0, "nugget": 0.5, "n_bins": 10}
    est.set_params(n_bins=5)
    assert est.n_bins == 5
    with pytest.raises(ValidationError):
        est.set_params(bogus=1)


# ---------------------------------------------------------------------------
# Gaussian process.
# ---------------------------------------------------------------------------

def test_gp_two_point_closed_form():
    coords = np.array([[32.70, -117.10], [32.78, -117.20]])
    values = np.array([12.0, 30.0])
    target = np.array([[32.74, -117.16]])
    variance, lengthscale, noise = 3.0, 4.0, 0.25
    est = GaussianProcess(variance, lengthscale, noise).fit(coords, values)
    pred = est.predict(target)[0]

    d12 = hav(coords[0], coords[1])
    s = variance + noise + GP_JITTER
    k12 = variance * np.exp(-d12 / lengthscale)
    det = s * s - k12 * k12
    c = values.mean()
    r = values - c
    alpha = np.array([s * r[0] - k12 * r[1], -k12 * r[0] + s * r[1]]) / det
    k_star = variance * np.exp(-np.array(
        [hav(target[0], coords[0]), hav(target[0], coords[1])]) / lengthscale)
    assert abs(pred - (c + k_star @ alpha)) < 1e-10


def test_gp_noiseless_exact_at_training_point():
    rng = np.random.default_rng(31)
    coords = random_coords(rng, 4, spread=0.2)
    values = rng.uniform(5, 45, 4)
    est = GaussianProcess(variance=2.0, lengthscale=5.0, noise=0.0)
    est.fit(coords, values)
    pred = est.predict(coords)
    np.testing.assert_allclose(pred, values, atol=1e-6)


def test_gp_long_lengthscale_behaves_like_mean_fill():
    # As the kernel flattens (lengthscale >> span) with observation
    # noise present, the posterior mean collapses to the constant mean:
    # k_* -> sigma^2 * 1 and the zero-sum residuals cancel. Noise must
    # be nonzero; a noiseless GP interpolates exactly at any
    # lengthscale instead of averaging.
    coords = np.array([[32.70, -117.10], [32.71, -117.11], [32.705, -117.09]])
    values = np.array([10.0, 20.0, 18.0])
    est = GaussianProcess(variance=1.0, lengthscale=1e6, noise=1.0)
    pred = est.fit(coords, values).predict(np.array([[32.707, -117.10]]))[0]
    assert abs(pred - values.mean()) < 1e-3


def test_gp_constant_values_predict_the_constant():
    coords = np.array([[32.7, -117.1], [32.8, -117.2], [32.75, -117.0],
                       [32.72, -117.15]])
    est = GaussianProcess(variance=1.5, lengthscale=3.0, noise=0.1)
    est.fit(coords, np.full(4, 7.5))
    preds = est.predict(np.array([[32.73, -117.12], [33.0, -117.3]]))
    np.testing.assert_allclose(preds, 7.5, atol=1e-10)


def test_gp_single_point_log_marginal_likelihood_hand_value():
    est = GaussianProcess(variance=2.0, lengthscale=5.0, noise=0.5)
    est.fit([[32.7, -117.1]], [13.0])
    s = 2.0 + 0.5 + GP_JITTER
    expected = -0.5 * np.log(s) - 0.5 * np.log(2.0 * np.pi)
    assert abs(est.log_marginal_likelihood() - expected) < 1e-12


def test_gp_rejects_bad_hyperparameters():
    with pytest.raises(ValidationError):
        GaussianProcess(variance=-1.0).fit([[0, 0]], [1.0])
    with pytest.raises(ValidationError):
        GaussianProcess(lengthscale=0.0).fit([[0, 0]], [1.0])
    with pytest.raises(ValidationError):
        GaussianProcess(noise=-0.1).fit([[0, 0]], [1.0])


def test_gp_predict_before_fit_raises():
    with pytest.raises(ValidationError):
        GaussianProcess().predict([[0, 0]])


# ---------------------------------------------------------------------------
# GP hyperparameter selection.
# ---------------------------------------------------------------------------

def test_select_gp_hyperparameters_is_the_grid_argmax():
    rng = np.random.default_rng(41)
    coords = random_coords(rng, 6)
    rows = np.vstack([
        20.0 + 5.0 * np.sin(coords[:, 1] * 40.0) + rng.normal(0, 0.5, 6)
        for _ in range(8)
    ])
    rows[2, 3] = np.nan  # one missing reading
    chosen = select_gp_hyperparameters(coords, rows)

    def summed_lml(params):
        total = 0.0
        for t in range(rows.shape[0]):
            mask = np.isfinite(rows[t])
            est = GaussianProcess(**params).fit(coords[mask], rows[t, mask])
            total += est.log_marginal_likelihood()
        return total

    best = summed_lml(chosen)
    var = rows[np.isfinite(rows)].var()
    for vf in (0.5, 4.0):
        for ls in (1.0, 20.0):
            for nf in (0.0, 1.0):
                params = {"variance": vf * var, "lengthscale": ls,
                          "noise": nf * var}
                assert summed_lml(params) <= best + 1e-9


def test_select_gp_hyperparameters_deterministic():
    rng = np.random.default_rng(42)
    coords = random_coords(rng, 5)
    rows = rng.uniform(5, 25, (6, 5))
    a = select_gp_hyperparameters(coords, rows)
    b = select_gp_hyperparameters(coords, rows)
    assert a == b


def test_select_gp_hyperparameters_rejects_empty():
    with pytest.raises(ValidationError):
        select_gp_hyperparameters([[32.7, -117.1]], np.full((3, 1), np.nan))


# ---------------------------------------------------------------------------
# Estimator conventions shared by all baselines.
# ---------------------------------------------------------------------------

def test_all_baselines_get_params_roundtrip():
    for est in (MeanFill(), Idw(power=2.0), OrdinaryKriging(),
                GaussianProcess(variance=3.0)):
        params = est.get_params()
        est.set_params(**params)
        assert est.get_params() == params


def test_all_baselines_deterministic_predictions():
    rng = np.random.default_rng(51)
    coords = random_coords(rng, 8)
    values = rng.uniform(0, 35, 8)
    targets = random_coords(rng, 4)
    for make in (MeanFill, Idw,
                 lambda: OrdinaryKriging(),
                 lambda: GaussianProcess(variance=2.0, lengthscale=8.0)):
        a = make().fit(coords, values).predict(targets)
        b = make().fit(coords, values).predict(targets)
        np.testing.assert_array_equal(a, b)

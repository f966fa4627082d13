import math

import numpy as np
import pytest

from pqkd import analysis as an
from pqkd import features as ft
from pqkd.errors import FitError, UsageError


def test_fit_recovers_noiseless_model():
    s = np.array([50, 100, 200, 400, 800, 1600, 3200, 6400.0])
    fit = an.fit_shot_model(s, 90 - 300 / np.sqrt(s))
    assert abs(fit.delta_inf - 90) <= 1e-9 and abs(fit.k_fit - 300) <= 1e-9
    assert fit.r2_w == pytest.approx(1.0) and fit.n_points == 8


def test_fit_constant_data():
    fit = an.fit_shot_model([100, 200, 400, 800], [5.0, 5.0, 5.0, 5.0])
    assert abs(fit.k_fit) <= 1e-9 and fit.delta_inf == pytest.approx(5.0, abs=1e-9)


def test_fit_respects_s_min_and_weights():
    s = np.array([50, 100, 200, 400, 800.0])
    y = 90 - 300 / np.sqrt(s)
    y[0] = -1000.0  # an outlier below the fit range
    fit = an.fit_shot_model(s, y, s_min=75)
    assert fit.s_min == 100 and fit.n_points == 4 and abs(fit.delta_inf - 90) <= 1e-9
    with pytest.raises(FitError):
        an.fit_shot_model(s, y, s_min=300)
    with pytest.raises(FitError):
        an.fit_shot_model(s, y, variance=[1, 1, 0, 0, 0])


def test_weighted_r2_hand_case():
    # y_bar_w = 11/4, ss_res = 3, ss_tot = 27/4 -> 1 - 4/9
    assert an.weighted_r2([1, 2, 4], [1, 3, 3], [1, 1, 2]) == pytest.approx(5 / 9, abs=1e-15)


def test_reference_fit_format():
    # weights 1/variance follow the inverse-variance convention; with noisy points the fit still reports finite SEs
    rng = np.random.default_rng(0)
    s = np.array([75, 100, 200, 400, 800, 1600.0])
    var = rng.uniform(1, 4, size=6)
    y = 89.05 - 275.75 / np.sqrt(s) + rng.normal(0, np.sqrt(var))
    fit = an.fit_shot_model(s, y, var, s_min=75)
    assert all(np.isfinite([fit.delta_inf, fit.k_fit, fit.r2_w, fit.se_delta_inf, fit.se_k]))
    assert fit.se_delta_inf > 0 and fit.r2_w <= 1.0


def test_hoeffding_examples():
    assert an.hoeffding_bound(1000, 0.1) == pytest.approx(2 * math.exp(-20))
    rep = an.hoeffding_check(0.5, 1000, 0.1, 100_000)
    assert rep.max_rate == 0.0 and rep.ok
    rep = an.hoeffding_check(np.full(4, 0.25), 100, 1.0, 1000)
    assert rep.max_rate == 0.0 and rep.ok
    rep = an.hoeffding_check(0.3, 200, 0.05, 20_000)
    assert rep.max_rate <= rep.bound + rep.slack


def test_lipschitz_trials_no_violations():
    rep = an.lipschitz_trials(200, seed=1)
    assert rep.ok and rep.max_kernel_ratio <= 1 + 1e-9 and rep.max_mixing_ratio <= 1 + 1e-9
    assert rep.max_mixing_ratio > 0.05


def test_feature_lipschitz_surrogate():
    pipe = ft.FeaturePipeline(shots=100)
    with pytest.raises(UsageError):
        an.feature_lipschitz_surrogate(pipe, np.zeros(15))
    pipe.fit(15, 0, n_evals=4)
    l_phi = an.feature_lipschitz_surrogate(pipe, np.full(15, 0.7), pairs=10)
    # z is affine in z_tilde with per-bin scale 1/(sigma+eps): ||dz||_2 <= max scale * ||dz_tilde||_1
    assert 0 < l_phi <= np.max(1 / pipe.standardizer.scale) + 1e-9


def test_ema_report_examples():
    raw, used = an.iid_ema_trace(0.9, steps=2000, dims=256)
    rep = an.ema_report(raw, used, burn_in=100)
    assert abs(rep.median - 0.0526) <= 0.2 * 0.0526
    assert rep.q1 <= rep.median <= rep.q3
    raw, used = an.iid_ema_trace(0.0, steps=50, dims=8)
    assert np.allclose(an.ema_report(raw, used).ratios, 1.0)
    const = np.ones((10, 3))
    const[:, 0] = np.arange(10)
    rep = an.ema_report(const, const)
    assert rep.n_undefined == 2 and len(rep.ratios) == 1
    cdf = rep.cdf_rows()
    assert cdf[-1][1] == 1.0
    with pytest.raises(UsageError):
        an.ema_report(np.zeros((0, 3)), np.zeros((0, 3)))


def test_ema_variance_ratio_value():
    assert an.ema_variance_ratio(0.9) == pytest.approx(0.0526, abs=1e-4)


def test_noise_curve_slope_and_duplicates():
    pipe = ft.FeaturePipeline()
    theta = np.random.default_rng(0).uniform(-np.pi, np.pi, 30)
    curve = an.feature_noise_curve(pipe, theta, shots=(50, 200, 800, 3200), reps=8)
    assert -0.6 <= curve.slope <= -0.4
    dup = an.feature_noise_curve(pipe, theta, shots=(100, 100, 400), reps=4)
    assert dup.rows()[0] == dup.rows()[1]


def test_shot_row_delta_in_points():
    row = an.ShotRow(S=200, ema=True, seed=0, acc_photonic=0.95, acc_ablation=0.60)
    assert row.delta == pytest.approx(35.0)


def test_summarize():
    assert an.summarize([1.0, 3.0]) == (2.0, pytest.approx(math.sqrt(2)))
    assert an.summarize([4.0]) == (4.0, 0.0)

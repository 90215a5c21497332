import json

import numpy as np
import pytest

from dcm.config import parse_config
from dcm.errors import ConfigMismatch, InsufficientRows, SingularSystem
from dcm.estimator import (
    empty_coefficient_set,
    fit_dcm,
    fit_target,
    load_artifact,
    save_artifact,
)
from dcm.panel import ColumnSpec, DesignMatrix, build_design
from dcm.scorer import score_counterfactual
from dcm.synthetic import SynthSpec, build_config, generate_panel

from helpers import es_off_shock, max_coefficient_error, small_economy, small_spec


def manual_design(x, labels=None):
    n, p = x.shape
    columns = [ColumnSpec("lag", f"v{i}", 0) for i in range(p)] + [ColumnSpec("intercept")]
    matrix = np.column_stack([x, np.ones(n)])
    return DesignMatrix(matrix=matrix, columns=tuple(columns), target=("v", 1))


def test_exact_linear_system_recovered():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 1))
    design = manual_design(x)
    fit = fit_target(design, 2.0 * x[:, 0], lam=0.0)
    assert fit.coefficients[0] == pytest.approx(2.0, abs=1e-12)
    assert fit.coefficients[1] == pytest.approx(0.0, abs=1e-12)
    assert fit.residual_variance == pytest.approx(0.0, abs=1e-20)
    assert fit.r_squared == pytest.approx(1.0)


def test_singular_system_names_offending_column():
    x = np.column_stack([np.full(30, 3.0)])  # constant column collides with intercept
    design = manual_design(x)
    with pytest.raises(SingularSystem) as excinfo:
        fit_target(design, np.arange(30.0), lam=0.0)
    assert excinfo.value.offending_columns  # reported with the offending set


def test_noisy_fit_matches_independent_normal_equations():
    rng = np.random.default_rng(7)
    n = 10_000
    x = rng.normal(size=(n, 2))
    y = 3.0 * x[:, 0] - 1.0 * x[:, 1] + rng.normal(scale=0.1, size=n)
    design = manual_design(x)
    fit = fit_target(design, y, lam=0.0)

    # independent closed-form solve on the same matrix
    full = design.matrix
    reference = np.linalg.inv(full.T @ full) @ (full.T @ y)
    assert np.allclose(fit.coefficients, reference, atol=1e-10)
    for true_value, idx in ((3.0, 0), (-1.0, 1)):
        assert abs(fit.coefficients[idx] - true_value) <= 3.0 * fit.standard_errors[idx]


def test_scale_equivariance_and_invariant_fit():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 2))
    y = 1.5 * x[:, 0] + 0.5 * x[:, 1] + rng.normal(scale=0.2, size=200)
    base = fit_target(manual_design(x), y, lam=0.0)
    scaled_x = x.copy()
    scaled_x[:, 0] *= 4.0
    scaled = fit_target(manual_design(scaled_x), y, lam=0.0)
    assert scaled.coefficients[0] == pytest.approx(base.coefficients[0] / 4.0, rel=1e-9)
    assert scaled.coefficients[1] == pytest.approx(base.coefficients[1], rel=1e-9)
    predictions_base = manual_design(x).matrix @ base.coefficients
    predictions_scaled = manual_design(scaled_x).matrix @ scaled.coefficients
    assert np.allclose(predictions_base, predictions_scaled, atol=1e-10)


def noiseless_recovery_spec(seed=0, **overrides):
    kwargs = dict(
        n_customers=600,
        n_periods=6,
        n_outcomes=1,
        n_surrogates=3,
        n_es=1,
        n_covariates=2,
        same_period_enabled=False,
        lag_window=1,
        noise_sd={"outcome": 0.0, "surrogate_non_es": 0.0, "es_interaction": 0.0},
        initial_mode="exogenous",
        lag_structure="orthogonal",
        coefficient_scale=0.8,
        spectral_cap=0.9,
        ridge_lambda=1e-10,
        seed=seed,
    )
    kwargs.update(overrides)
    return SynthSpec(**kwargs)


def test_noiseless_recovery_small():
    spec = noiseless_recovery_spec(seed=21)
    panel, truth = generate_panel(spec)
    fitted = fit_dcm(panel, build_config(spec))
    assert max_coefficient_error(truth, fitted) < 1e-8


def test_same_period_coefficients_near_zero_when_truth_has_none():
    # the generating economy has no same-period effects, but the fitted
    # model still estimates them; they must come out statistically zero
    spec = small_spec(seed=13, n_customers=8000, same_period_scale=0.0)
    panel, truth = generate_panel(spec)
    config = build_config(spec)
    fitted = fit_dcm(panel, config)
    for j, t in zip(*np.nonzero(fitted.fitted)):
        name = config.dynamic_names[j]
        if not config.block_for_role(config.role_of(name)).same_period:
            continue
        for e in range(len(config.es_names)):
            estimate = fitted.same_period[j, t, e]
            se = fitted.same_period_se[j, t, e]
            assert abs(estimate) <= 3.0 * se


def test_fit_target_matches_fit_dcm_slices():
    panel, _, config = small_economy(seed=17, n_customers=250)
    coeffs = fit_dcm(panel, config)
    design = build_design(panel, ("y0", 3), config)
    single = fit_target(design, panel.column("y0", 3), config.ridge_lambda)
    j = coeffs.target_index("y0")
    stored = []
    for col in design.columns:
        if col.kind == "lag":
            k = config.surrogate_names.index(col.variable)
            stored.append(coeffs.lag[j, 3, k, col.period])
        elif col.kind == "static":
            stored.append(coeffs.covariate[j, 3, config.static_names.index(col.variable)])
        elif col.kind == "same_period":
            stored.append(coeffs.same_period[j, 3, config.es_names.index(col.variable)])
        elif col.kind == "intercept":
            stored.append(coeffs.intercept[j, 3])
    assert np.allclose(single.coefficients, stored, rtol=0, atol=1e-12)


def test_structural_zeros_never_estimated():
    panel, _, config = small_economy(seed=19, n_customers=200, lag_window=2)
    coeffs = fit_dcm(panel, config)
    j_es = coeffs.target_index("e0")
    assert np.all(coeffs.same_period[j_es] == 0.0)  # ES targets: no same-period terms
    for j in range(len(config.dynamic_names)):
        for t in range(config.n_periods):
            window = set(config.lag_sources(t))
            for s in range(config.n_periods):
                if s not in window:
                    assert coeffs.lag[j, t, :, s].tolist() == [0.0] * len(
                        config.surrogate_names
                    )


def test_insufficient_rows_rejected():
    spec = small_spec(seed=23, n_customers=6)
    panel, _ = generate_panel(spec)
    with pytest.raises(InsufficientRows):
        fit_dcm(panel, build_config(spec))


def test_artifact_roundtrip_bit_identical(tmp_path):
    panel, _, config = small_economy(seed=29, n_customers=150)
    coeffs = fit_dcm(panel, config)
    path = str(tmp_path / "model.json")
    save_artifact(coeffs, path)
    loaded = load_artifact(path)
    assert loaded.equals(coeffs)

    # scoring an artifact after a save/load round trip changes nothing
    shock = es_off_shock(config)
    before = score_counterfactual(coeffs, panel, shock)
    after = score_counterfactual(loaded, panel, shock)
    assert np.array_equal(before.delta, after.delta)


def test_artifact_with_edited_config_rejected(tmp_path):
    panel, _, config = small_economy(seed=31, n_customers=150)
    coeffs = fit_dcm(panel, config)
    path = str(tmp_path / "model.json")
    save_artifact(coeffs, path)
    edited = parse_config(
        json.dumps({**config.canonical_dict(), "ridge_lambda": 0.5})
    )
    with pytest.raises(ConfigMismatch):
        load_artifact(path, edited)


def test_pooled_mode_recovers_stationary_dynamics():
    spec = small_spec(
        seed=37,
        n_customers=4000,
        n_periods=6,
        lag_window=1,
        same_period_enabled=False,
        noise_sd={"outcome": 0.3, "surrogate_non_es": 0.3, "es_interaction": 0.3},
    )
    config = build_config(spec)
    truth = empty_coefficient_set(config)
    rng = np.random.default_rng(5)
    transition = rng.uniform(0.05, 0.25, (len(config.dynamic_names), 3))
    weights = rng.uniform(0.2, 0.6, len(config.dynamic_names))
    for j in range(len(config.dynamic_names)):
        for t in range(config.n_periods):
            truth.fitted[j, t] = True
            if t >= 1:
                truth.lag[j, t, :, t - 1] = transition[j]
            truth.covariate[j, t, 0] = weights[j]
            truth.intercept[j, t] = 0.2
    spec.truth = truth
    spec.spectral_cap = None
    panel, _ = generate_panel(spec)

    pooled_config = parse_config(
        json.dumps({**config.canonical_dict(), "pooling": "by_lag"})
    )
    coeffs = fit_dcm(panel, pooled_config)
    assert coeffs.pooled
    j = coeffs.target_index("y0")
    tied = [coeffs.lag[j, t, 0, t - 1] for t in range(1, config.n_periods)]
    assert np.ptp(tied) == 0.0  # coefficients tied across periods
    assert abs(tied[0] - transition[j, 0]) < 0.05

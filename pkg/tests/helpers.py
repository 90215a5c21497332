"""Shared builders for the test suite: tiny economies, hand-set coefficient
sets, and comparison utilities."""

from __future__ import annotations

import json

import numpy as np

from dcm.config import ModelConfig, parse_config, shock_from_dict
from dcm.estimator import CoefficientSet, empty_coefficient_set
from dcm.synthetic import SynthSpec, build_config, generate_panel


def minimal_config_doc(**overrides) -> dict:
    doc = {
        "variables": [
            {"name": "rev", "role": "outcome"},
            {"name": "visits", "role": "surrogate_non_es"},
            {"name": "orders", "role": "surrogate_non_es"},
        ],
        "n_periods": 3,
    }
    doc.update(overrides)
    return doc


def parse_doc(doc: dict) -> ModelConfig:
    return parse_config(json.dumps(doc))


def es_config_doc(**overrides) -> dict:
    doc = {
        "variables": [
            {"name": "rev", "role": "outcome"},
            {"name": "visits", "role": "surrogate_non_es"},
            {"name": "chat", "role": "es_interaction"},
            {"name": "tenure", "role": "static_covariate"},
        ],
        "n_periods": 4,
        "same_period_enabled": True,
        "groups": {"channel_chat": ["chat"], "all_rev": ["rev"]},
    }
    doc.update(overrides)
    return doc


def small_spec(seed: int = 0, **overrides) -> SynthSpec:
    kwargs = dict(
        n_customers=300,
        n_periods=5,
        n_outcomes=1,
        n_surrogates=2,
        n_es=1,
        n_covariates=1,
        same_period_enabled=True,
        positive_dynamics=True,
        noise_sd={"outcome": 0.4, "surrogate_non_es": 0.3, "es_interaction": 0.3},
        coefficient_scale=0.3,
        same_period_scale=0.5,
        lag_decay=0.5,
        intercept_scale=0.4,
        covariate_weight_scale=0.4,
        spectral_cap=0.8,
        seed=seed,
    )
    kwargs.update(overrides)
    return SynthSpec(**kwargs)


def small_economy(seed: int = 0, **overrides):
    spec = small_spec(seed, **overrides)
    panel, truth = generate_panel(spec)
    return panel, truth, build_config(spec)


def es_off_shock(config: ModelConfig, label: str = "es:off"):
    return shock_from_dict(
        {
            "label": label,
            "entries": [
                {"variables": "es_interaction", "periods": "all", "mode": "set", "value": 0.0}
            ],
        },
        config,
    )


def zero_shock(config: ModelConfig, label: str = "noop"):
    return shock_from_dict(
        {
            "label": label,
            "entries": [
                {"variables": "es_interaction", "periods": "all", "mode": "scale", "value": 1.0}
            ],
        },
        config,
    )


def max_coefficient_error(truth: CoefficientSet, fitted: CoefficientSet) -> float:
    """Largest absolute difference over every coefficient the truth generated."""
    worst = 0.0
    for name in ("lag", "same_period", "covariate", "policy_coef", "intercept"):
        a = getattr(truth, name)
        b = getattr(fitted, name)
        for j, t in zip(*np.nonzero(truth.fitted)):
            if a[j, t].size:
                worst = max(worst, float(np.max(np.abs(a[j, t] - b[j, t]))))
    return worst


def confidence_band_coverage(
    truth: CoefficientSet, fitted: CoefficientSet, z: float
) -> tuple[int, int]:
    """(inside, total) over every generated coefficient's z-band."""
    config = truth.config
    inside = 0
    total = 0

    def check(true_value: float, estimate: float, se: float) -> None:
        nonlocal inside, total
        total += 1
        if abs(estimate - true_value) <= z * se:
            inside += 1

    for j, t in zip(*np.nonzero(truth.fitted)):
        name = config.dynamic_names[j]
        block = config.block_for_role(config.role_of(name))
        for k, source in enumerate(config.surrogate_names):
            if source not in block.lagged:
                continue
            for s in config.lag_sources(t):
                check(truth.lag[j, t, k, s], fitted.lag[j, t, k, s], fitted.lag_se[j, t, k, s])
        if block.static_covariates:
            for c in range(len(config.static_names)):
                check(
                    truth.covariate[j, t, c],
                    fitted.covariate[j, t, c],
                    fitted.covariate_se[j, t, c],
                )
        for e in range(len(config.es_names)):
            if not block.same_period:
                continue
            check(
                truth.same_period[j, t, e],
                fitted.same_period[j, t, e],
                fitted.same_period_se[j, t, e],
            )
        if block.policy and config.policy_name is not None:
            check(truth.policy_coef[j, t], fitted.policy_coef[j, t], fitted.policy_se[j, t])
        check(truth.intercept[j, t], fitted.intercept[j, t], fitted.intercept_se[j, t])
    return inside, total


def hand_truth(config: ModelConfig, lag_value: float = 0.5, cov_weight: float = 1.0) -> CoefficientSet:
    """All-lags-equal truth used by the hand-recursion examples."""
    truth = empty_coefficient_set(config)
    n_sources = len(config.surrogate_names)
    for j, name in enumerate(config.dynamic_names):
        for t in range(config.n_periods):
            truth.fitted[j, t] = True
            for s in config.lag_sources(t):
                truth.lag[j, t, :, s] = lag_value
            truth.covariate[j, t, :] = cov_weight
    return truth


def relative_close(a: float, b: float, rel: float = 1e-9, floor: float = 1e-12) -> bool:
    return abs(a - b) <= max(rel * max(abs(a), abs(b)), floor)
